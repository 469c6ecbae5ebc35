"""Softmax utilities and the outlier-exposure objective.

The objective is ``CE(ID rows) + lam * KL(softmax || uniform)(OE rows)``, each
term a plain mean over its rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidMaskError


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_to_uniform(logits):
    """Per-row ``KL(softmax(logits) || U) = log K - H(softmax(logits))``.

    Written as ``log K - lse(z) + sum(p * z)`` on max-shifted logits ``z`` so a
    row of equal logits gives exactly zero.
    """
    K = logits.shape[-1]
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1)
    p = e / s[..., None]
    return np.maximum(np.log(K) - np.log(s) + (p * z).sum(axis=-1), 0.0)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return -np.sum(np.where(nz, p * np.log(np.where(nz, p, 1.0)), 0.0), axis=-1)


@dataclass(frozen=True)
class NodeMasks:
    """Which rows enter which term of the loss.

    ``labels`` is indexed by row; entries outside ``id_mask`` are ignored.
    """

    id_mask: np.ndarray
    oe_mask: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        id_mask = np.asarray(self.id_mask, dtype=bool)
        oe_mask = np.asarray(self.oe_mask, dtype=bool)
        labels = np.asarray(self.labels, dtype=np.int64)
        if id_mask.shape != oe_mask.shape or labels.shape != id_mask.shape:
            raise InvalidMaskError("masks and labels must have one entry per node")
        if np.any(id_mask & oe_mask):
            raise InvalidMaskError("ID and OE masks overlap")
        if np.any(labels[id_mask] < 0):
            raise InvalidMaskError("ID node without a class label")
        object.__setattr__(self, "id_mask", id_mask)
        object.__setattr__(self, "oe_mask", oe_mask)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_roles(cls, roles):
        roles = np.asarray(roles)
        return cls(roles >= 0, roles == -1, np.where(roles >= 0, roles, -1))


def oe_loss(logits, masks, lam):
    """Return ``(total, ce_term, kl_term)``."""
    total, ce, kl, _ = oe_loss_and_grad(logits, masks, lam, need_grad=False)
    return total, ce, kl


def oe_loss_and_grad(logits, masks, lam, need_grad=True):
    """Loss terms plus the gradient of the total with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    n_id = int(masks.id_mask.sum())
    if n_id == 0:
        raise InvalidMaskError("at least one ID node is required")
    K = logits.shape[1]
    if np.any(masks.labels[masks.id_mask] >= K):
        raise InvalidMaskError(f"class label outside [0, {K})")

    id_logits = logits[masks.id_mask]
    y = masks.labels[masks.id_mask]
    id_logp = log_softmax(id_logits)
    ce = float(-id_logp[np.arange(n_id), y].mean())

    n_oe = int(masks.oe_mask.sum())
    oe_logits = logits[masks.oe_mask]
    kl = float(kl_to_uniform(oe_logits).mean()) if n_oe else 0.0
    total = ce + lam * kl

    grad = None
    if need_grad:
        grad = np.zeros_like(logits)
        g_id = np.exp(id_logp)
        g_id[np.arange(n_id), y] -= 1.0
        grad[masks.id_mask] = g_id / n_id
        if n_oe and lam != 0:
            p = softmax(oe_logits)
            logp = log_softmax(oe_logits)
            neg_h = (p * logp).sum(axis=1, keepdims=True)
            grad[masks.oe_mask] = (lam / n_oe) * p * (logp - neg_h)
    return total, ce, kl, grad
