"""Batch-normalized feed-forward backbone with hand-written backprop.

Each hidden block is ``affine -> BN -> ReLU``; a final affine produces the
K class logits.  The penultimate activations are the features handed to the
graph stage.  Running statistics use the biased (divide-by-N) variance
everywhere.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .data import OE, sample_pretrain
from .errors import BatchTooSmallError, FormatError, ShapeError, TrainingDivergedError
from .losses import NodeMasks, oe_loss_and_grad

log = logging.getLogger(__name__)

MAGIC = b"GBKB"
FORMAT_VERSION = 1


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    RECALIBRATE = "recalibrate"


@dataclass
class BnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    @classmethod
    def identity(cls, width, eps=1e-5):
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width), eps)


@dataclass
class BackboneModel:
    weights: list
    biases: list
    bns: list
    momentum: float = 0.1

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.bns) != len(self.weights) - 1:
            raise ShapeError("need one bias per affine and one BN per hidden block")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"layer widths do not chain: {a.shape} -> {b.shape}")
        for w, bn in zip(self.weights, self.bns):
            if bn.gamma.shape != (w.shape[1],):
                raise ShapeError("BN width must match the preceding affine")

    @classmethod
    def init(cls, in_dim, hidden, out_dim, seed=0, eps=1e-5):
        rng = np.random.default_rng([int(seed) % 2**64, 101])
        dims = [in_dim, *hidden, out_dim]
        weights, biases = [], []
        for a, b in zip(dims, dims[1:]):
            weights.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
            biases.append(np.zeros(b))
        bns = [BnLayer.identity(h, eps) for h in hidden]
        return cls(weights, biases, bns)

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def feature_dim(self):
        return self.dims[-2]

    def copy(self):
        return copy.deepcopy(self)

    def parameters(self):
        """Trainable arrays in declaration order (views, not copies)."""
        params = []
        for w, b, bn in zip(self.weights, self.biases, self.bns):
            params += [w, b, bn.gamma, bn.beta]
        params += [self.weights[-1], self.biases[-1]]
        return params

    def bn_checksum(self):
        h = hashlib.sha256()
        for bn in self.bns:
            h.update(np.ascontiguousarray(bn.running_mean, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(bn.running_var, dtype="<f8").tobytes())
        return h.hexdigest()


def _as_batch(model, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ShapeError(f"expected batch with {model.dims[0]} columns, got {x.shape}")
    return x


def backbone_forward(model, batch, mode=Mode.EVAL, return_cache=False):
    """Return ``(logits, features)``; with ``return_cache`` also the backprop cache.

    TRAIN normalizes by batch statistics and moves the running statistics by
    ``model.momentum``.  RECALIBRATE normalizes by batch statistics and
    overwrites the running statistics with them (weights untouched), so one
    full-data pass yields the exact dataset statistics layer by layer.  EVAL
    uses the running statistics only.
    """
    mode = Mode(mode)
    h = _as_batch(model, batch)
    if mode is not Mode.EVAL and h.shape[0] < 2 and model.bns:
        raise BatchTooSmallError(f"{mode.value} mode needs at least 2 rows in a batch")
    cache = []
    for w, b, bn in zip(model.weights, model.biases, model.bns):
        a = h @ w + b
        if mode is Mode.EVAL:
            mean, var = bn.running_mean, bn.running_var
        else:
            mean = a.mean(axis=0)
            var = ((a - mean) ** 2).mean(axis=0)
            if mode is Mode.TRAIN:
                m = model.momentum
                bn.running_mean = (1 - m) * bn.running_mean + m * mean
                bn.running_var = (1 - m) * bn.running_var + m * var
            else:
                bn.running_mean = mean.copy()
                bn.running_var = var.copy()
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        xhat = (a - mean) * inv_std
        y = bn.gamma * xhat + bn.beta
        cache.append((h, xhat, inv_std, y > 0))
        h = np.maximum(y, 0.0)
    logits = h @ model.weights[-1] + model.biases[-1]
    cache.append(h)
    if return_cache:
        return logits, h, (mode, cache)
    return logits, h


def backbone_backward(model, cache, dlogits):
    """Gradients of a scalar loss for every array in ``model.parameters()``."""
    mode, layers = cache
    h = layers[-1]
    grads_tail = [h.T @ dlogits, dlogits.sum(axis=0)]
    dh = dlogits @ model.weights[-1].T
    grads = []
    for i in range(len(model.bns) - 1, -1, -1):
        h_in, xhat, inv_std, active = layers[i]
        bn = model.bns[i]
        dy = dh * active
        dgamma = (dy * xhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dxhat = dy * bn.gamma
        if mode is Mode.EVAL:
            da = dxhat * inv_std
        else:
            n = dxhat.shape[0]
            da = (inv_std / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        grads = [h_in.T @ da, da.sum(axis=0), dgamma, dbeta] + grads
        dh = da @ model.weights[i].T
    return grads + grads_tail


def backbone_loss(model, x, roles, lam, mode=Mode.TRAIN):
    """Outlier-exposure loss of the backbone logits on one batch, with gradients."""
    logits, _, cache = backbone_forward(model, x, mode, return_cache=True)
    masks = NodeMasks.from_roles(roles)
    total, ce, kl, dlogits = oe_loss_and_grad(logits, masks, lam)
    return (total, ce, kl), backbone_backward(model, cache, dlogits)


def train_backbone(model, dataset, lr=0.05, epochs=50, batch_size=128, lam=0.0, seed=0):
    """Minibatch SGD on the outlier-exposure objective; returns ``(model, trace)``.

    ``trace`` holds the mean batch loss per epoch.  ``dataset`` is any object
    with ``features`` and ``roles`` (OE rows coded -1, ignored when ``lam`` is 0).
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    model = model.copy()
    x = np.asarray(dataset.features, dtype=np.float64)
    roles = np.asarray(dataset.roles)
    keep = (roles >= 0) | (roles == OE)
    x, roles = x[keep], roles[keep]
    rng = np.random.default_rng([int(seed) % 2**64, 202])
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(roles))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2 or not np.any(roles[idx] >= 0):
                continue
            (total, _, _), grads = backbone_loss(model, x[idx], roles[idx], lam)
            if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(epoch)
            for p, g in zip(model.parameters(), grads):
                p -= lr * g
            losses.append(total)
        trace.append(float(np.mean(losses)) if losses else float("nan"))
    return model, trace


def gaussianize(model, data, mode="exact", epochs=20, batch_size=256, seed=0):
    """Recalibrate every BN layer's running statistics on ``data``.

    ``exact`` sets each layer's statistics to the per-channel mean and biased
    variance of its pre-BN activations over the whole of ``data``, computed
    after all earlier layers are recalibrated.  ``ema`` instead runs
    ``epochs`` shuffled TRAIN-mode passes that only move the running
    statistics.  Weights, gamma and beta are never modified.
    """
    model = model.copy()
    x = np.asarray(data, dtype=np.float64)
    if mode == "exact":
        backbone_forward(model, x, Mode.RECALIBRATE)
    elif mode == "ema":
        rng = np.random.default_rng([int(seed) % 2**64, 303])
        for _ in range(epochs):
            order = rng.permutation(x.shape[0])
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                if len(idx) >= 2:
                    backbone_forward(model, x[idx], Mode.TRAIN)
    else:
        raise ValueError(f"unknown gaussianization mode {mode!r}")
    for i, bn in enumerate(model.bns):
        dead = np.flatnonzero(bn.running_var == 0)
        if dead.size:
            warnings.warn(
                f"BN layer {i}: {dead.size} constant channel(s) clamped by eps",
                RuntimeWarning,
                stacklevel=2,
            )
    return model


def extract_features(model, data):
    return backbone_forward(model, data, Mode.EVAL)[1]


def pretrain_backbone(dim, hidden=(64, 64), n_classes=300, n_per_class=30,
                      epochs=30, lr=0.05, batch_size=128, seed=0):
    """Train a backbone on the balanced pre-training stand-in distribution.

    Many small classes give features that transfer better than a few large
    ones at the same sample budget.
    """
    x, y = sample_pretrain(dim, n_classes, n_per_class, seed)
    model = BackboneModel.init(dim, hidden, n_classes, seed=seed)
    model, trace = train_backbone(model, SimpleNamespace(features=x, roles=y), lr=lr, epochs=epochs,
                                  batch_size=batch_size, lam=0.0, seed=seed)
    log.debug("pretrain loss %.4f -> %.4f", trace[0], trace[-1])
    return model


def save_backbone(path, model):
    dims = model.dims
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", FORMAT_VERSION, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        eps = model.bns[0].eps if model.bns else 1e-5
        fh.write(struct.pack("<dd", eps, model.momentum))
        for w, b, bn in zip(model.weights, model.biases, model.bns):
            for arr in (w, b, bn.gamma, bn.beta, bn.running_mean, bn.running_var):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for arr in (model.weights[-1], model.biases[-1]):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_backbone(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}")
    try:
        version, n_dims = struct.unpack_from("<HI", raw, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        dims = struct.unpack_from(f"<{n_dims}I", raw, 10)
        off = 10 + 4 * n_dims
        eps, momentum = struct.unpack_from("<dd", raw, off)
        off += 16

        def take(*shape):
            nonlocal off
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, "<f8", n, off).astype(np.float64).reshape(shape)
            off += 8 * n
            return arr

        weights, biases, bns = [], [], []
        for a, b in zip(dims[:-2], dims[1:-1]):
            weights.append(take(a, b))
            biases.append(take(b))
            bns.append(BnLayer(take(b), take(b), take(b), take(b), eps))
        weights.append(take(dims[-2], dims[-1]))
        biases.append(take(dims[-1]))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if off != len(raw):
        raise FormatError("trailing bytes after checkpoint payload")
    return BackboneModel(weights, biases, bns, momentum)
