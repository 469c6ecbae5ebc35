"""Graph convolutional classifier trained with outlier exposure.

Layer rule: ``H_{l+1} = relu(A_hat @ H_l @ W_l)`` for the hidden layers; the
last layer is ``A_hat @ H @ W + b`` with no nonlinearity.  With ``A_hat = I``
the same stack is the parameter-matched MLP baseline, and a single layer is a
linear classifier.
"""

from __future__ import annotations

import copy
import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, RangeError, ShapeError, TrainingDivergedError
from .graph import NormalizedGraph
from .losses import NodeMasks, oe_loss, oe_loss_and_grad  # noqa: F401  (re-exported)

MAGIC = b"GGCN"
FORMAT_VERSION = 1


@dataclass
class GcnModel:
    weights: list
    bias: np.ndarray | None = None
    aggregate: bool = True
    trace: list = field(default_factory=list, repr=False)

    @classmethod
    def init(cls, in_dim, n_classes, hidden_dim=64, layers=3, head_bias=True,
             aggregate=True, seed=0):
        if layers < 1:
            raise ValueError("need at least one layer")
        rng = np.random.default_rng([int(seed) % 2**64, 404])
        dims = [in_dim] + [hidden_dim] * (layers - 1) + [n_classes]
        weights = []
        for a, b in zip(dims, dims[1:]):
            limit = math.sqrt(6.0 / (a + b))
            weights.append(rng.uniform(-limit, limit, size=(a, b)))
        bias = np.zeros(n_classes) if head_bias else None
        return cls(weights, bias, aggregate)

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_layers(self):
        return len(self.weights)

    def parameters(self):
        return list(self.weights) + ([self.bias] if self.bias is not None else [])

    def copy(self):
        return copy.deepcopy(self)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    epochs: int = 200
    lr0: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.epochs < 1 or self.lr0 <= 0:
            raise ValueError("need lam >= 0, epochs >= 1 and lr0 > 0")


def _check_inputs(model, graph, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ShapeError(f"expected {model.dims[0]} input columns, got {x.shape}")
    if graph.n != x.shape[0]:
        raise ShapeError(f"graph has {graph.n} nodes but X has {x.shape[0]} rows")
    return x


def _forward(model, graph, x):
    h = x
    cache = []
    for l, w in enumerate(model.weights):
        ah = graph @ h
        pre = ah @ w
        last = l == model.n_layers - 1
        if last:
            if model.bias is not None:
                pre = pre + model.bias
            cache.append((ah, None))
            return pre, h, cache
        cache.append((ah, pre > 0))
        h = np.maximum(pre, 0.0)


def gcn_forward(model, graph, x):
    """Return ``(logits, hidden)``; ``hidden`` is the input to the last layer."""
    x = _check_inputs(model, graph, x)
    logits, hidden, _ = _forward(model, graph, x)
    return logits, hidden


def mlp_forward(model, x):
    x = np.asarray(x, dtype=np.float64)
    return gcn_forward(model, NormalizedGraph.identity(x.shape[0]), x)[0]


def gcn_backward(model, graph, x, masks, lam):
    """Loss terms and analytic gradients for every array in ``model.parameters()``.

    Uses the symmetry of ``A_hat``: the adjoint of aggregation is aggregation.
    """
    x = _check_inputs(model, graph, x)
    logits, _, cache = _forward(model, graph, x)
    total, ce, kl, g = oe_loss_and_grad(logits, masks, lam)
    grads = [None] * model.n_layers
    bias_grad = g.sum(axis=0) if model.bias is not None else None
    for l in range(model.n_layers - 1, -1, -1):
        ah, active = cache[l]
        if active is not None:
            g = g * active
        grads[l] = ah.T @ g
        if l:
            g = graph @ (g @ model.weights[l].T)
    out = grads + ([bias_grad] if bias_grad is not None else [])
    return (total, ce, kl), out


def cosine_lr(t, T, lr0):
    if T < 1 or t < 0 or t > T:
        raise RangeError(f"step {t} outside [0, {T}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / T))


def train_gcn(graph, x, masks, config, model=None, hidden_dim=64, layers=3,
              head_bias=True, aggregate=True, n_classes=None):
    """Full-batch Adam with cosine-annealed step size, one step per epoch.

    The returned model carries ``trace``: one ``(epoch, total, ce, kl, lr)``
    row per step, losses measured before the step is applied.
    """
    x = np.asarray(x, dtype=np.float64)
    if model is None:
        if n_classes is None:
            n_classes = int(masks.labels[masks.id_mask].max()) + 1
        model = GcnModel.init(x.shape[1], n_classes, hidden_dim, layers,
                              head_bias, aggregate, config.seed)
    model = model.copy()
    model.trace = []
    b1, b2 = config.betas
    params = model.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    for epoch in range(config.epochs):
        (total, ce, kl), grads = gcn_backward(model, graph, x, masks, config.lam)
        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergedError(epoch)
        lr = cosine_lr(epoch, config.epochs, config.lr0)
        model.trace.append((epoch, total, ce, kl, lr))
        t = epoch + 1
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= b1
            mi += (1 - b1) * g
            vi *= b2
            vi += (1 - b2) * g * g
            mhat = mi / (1 - b1**t)
            vhat = vi / (1 - b2**t)
            p -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)
    return model


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "total", "ce", "kl", "lr"])
        for epoch, total, ce, kl, lr in trace:
            w.writerow([epoch, repr(float(total)), repr(float(ce)), repr(float(kl)), repr(float(lr))])


def save_gcn(path, model):
    dims = model.dims
    flags = (1 if model.bias is not None else 0) | (2 if model.aggregate else 0)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HHB", FORMAT_VERSION, model.n_layers, flags))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for arr in model.parameters():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_gcn(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}")
    try:
        version, n_layers, flags = struct.unpack_from("<HHB", raw, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        dims = struct.unpack_from(f"<{n_layers + 1}I", raw, 9)
        off = 9 + 4 * (n_layers + 1)
        weights = []
        for a, b in zip(dims, dims[1:]):
            weights.append(np.frombuffer(raw, "<f8", a * b, off).astype(np.float64).reshape(a, b))
            off += 8 * a * b
        bias = None
        if flags & 1:
            bias = np.frombuffer(raw, "<f8", dims[-1], off).astype(np.float64)
            off += 8 * dims[-1]
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if off != len(raw):
        raise FormatError("trailing bytes after checkpoint payload")
    return GcnModel(weights, bias, bool(flags & 2))
