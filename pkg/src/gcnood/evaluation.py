"""OOD scores, the six evaluation metrics and inductive test-graph inference.

Scores are oriented so that higher means more in-distribution, and ID
samples are the positive class for every detection metric.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .backbone import backbone_forward, extract_features
from .data import head_tail_split
from .errors import InvalidKError, MetricError, ScoreError, ShapeError
from .gcn import gcn_forward
from .graph import NormalizedGraph, _unit_rows, build_graph
from .losses import softmax

log = logging.getLogger(__name__)

METRIC_NAMES = ("fpr95", "auroc", "aupr", "acc", "acc_head", "acc_tail")


@dataclass(frozen=True)
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.id_scores, dtype=np.float64).ravel()
        b = np.asarray(self.ood_scores, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise MetricError("scores must be finite")
        object.__setattr__(self, "id_scores", a)
        object.__setattr__(self, "ood_scores", b)

    def check(self):
        if self.id_scores.size == 0 or self.ood_scores.size == 0:
            raise MetricError("both ID and OOD score sets must be non-empty")


def msp_scores(logits):
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ScoreError("logits must be finite")
    return softmax(logits).max(axis=-1)


def msp_score(logits):
    """Maximum softmax probability of one logit vector."""
    return float(msp_scores(np.asarray(logits, dtype=np.float64)[None, :])[0])


def knn_distance_scores(train_feats, x, k):
    """Negated distance from each row of ``x`` to its k-th nearest training row,
    both sides L2-normalized."""
    train = _unit_rows(train_feats)
    q = _unit_rows(np.atleast_2d(x))
    if not 1 <= k <= train.shape[0]:
        raise InvalidKError(f"k must lie in [1, {train.shape[0]}], got {k}")
    # |u - v|^2 = 2 - 2 u.v for unit vectors
    d2 = np.maximum(2.0 - 2.0 * (q @ train.T), 0.0)
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
    return -np.sqrt(kth)


def knn_distance_score(train_feats, x, k):
    return float(knn_distance_scores(train_feats, np.asarray(x)[None, :], k)[0])


def fpr_at_tpr(scores, tpr_target=0.95):
    """FPR at the largest threshold whose ID true-positive rate reaches the target."""
    scores.check()
    if not 0 < tpr_target <= 1:
        raise MetricError(f"tpr_target must lie in (0, 1], got {tpr_target}")
    ids = np.sort(scores.id_scores)[::-1]
    n = ids.size
    m = np.arange(1, n + 1)
    # smallest count m with m / n >= target; the m-th largest score is tau
    first = int(np.flatnonzero(m / n >= tpr_target)[0])
    tau = ids[first]
    return float(np.count_nonzero(scores.ood_scores >= tau) / scores.ood_scores.size)


def auroc(scores):
    """Mann-Whitney statistic: P(id > ood) + 0.5 P(id == ood)."""
    scores.check()
    n_id, n_ood = scores.id_scores.size, scores.ood_scores.size
    ranks = rankdata(np.concatenate([scores.id_scores, scores.ood_scores]))
    u = ranks[:n_id].sum() - n_id * (n_id + 1) / 2.0
    return float(u / (n_id * n_ood))


def aupr(scores):
    """Average precision with ID as positives, tied scores stepped together."""
    scores.check()
    allv = np.concatenate([scores.id_scores, scores.ood_scores])
    is_id = np.concatenate([np.ones(scores.id_scores.size), np.zeros(scores.ood_scores.size)])
    order = np.argsort(-allv, kind="stable")
    allv, is_id = allv[order], is_id[order]
    tp = np.cumsum(is_id)
    fp = np.cumsum(1.0 - is_id)
    # keep the last position of every run of equal scores
    last = np.r_[allv[1:] != allv[:-1], True]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / scores.id_scores.size
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def accuracy_report(pred, true, K, head=None):
    """Return ``(acc, acc_head, acc_tail)``; ``acc_tail`` is None when there are no tail classes."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ShapeError("prediction and label vectors differ in length")
    if np.any((true < 0) | (true >= K)):
        raise MetricError(f"labels must lie in [0, {K})")
    if head is None:
        head, _ = head_tail_split(K)
    correct = pred == true
    in_head = np.isin(true, sorted(head))

    def frac(mask):
        return float(correct[mask].mean()) if mask.any() else None

    return frac(np.ones_like(correct)), frac(in_head), frac(~in_head)


@dataclass
class MetricsReport:
    fpr95: float
    auroc: float
    aupr: float
    acc: float
    acc_head: float | None
    acc_tail: float | None
    meta: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def metrics(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def record(self):
        """Deterministic record: metrics and meta, never wall-clock timings."""
        return {"metrics": self.metrics(), "meta": dict(sorted(self.meta.items()))}

    def to_json(self):
        return json.dumps(self.record(), sort_keys=True, indent=2) + "\n"

    def to_text(self):
        lines = []
        for name, value in self.metrics().items():
            lines.append(f"{name}={'NA' if value is None else repr(value)}")
        for key, value in sorted(self.meta.items()):
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, record):
        return cls(**record["metrics"], meta=dict(record.get("meta", {})))


@dataclass
class InferenceResult:
    """Per-row outputs of test inference, in the test set's row order."""

    scores: np.ndarray
    preds: np.ndarray
    roles: np.ndarray
    logits: np.ndarray

    @property
    def score_set(self):
        return ScoreSet(self.scores[self.roles >= 0], self.scores[self.roles == -2])

    @property
    def id_preds(self):
        return self.preds[self.roles >= 0]

    @property
    def id_true(self):
        return self.roles[self.roles >= 0]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["role", "score", "pred", "true"])
            for role, score, pred in zip(self.roles, self.scores, self.preds):
                name = "ID" if role >= 0 else ("OE" if role == -1 else "TEST_OOD")
                true = int(role) if role >= 0 else ""
                w.writerow([name, repr(float(score)), int(pred), true])


def classifier_logits(model, x, k):
    """Logits of a graph or graph-free classifier over the rows of ``x``.

    A graph model gets a k-NN graph built over ``x`` alone, with k clipped to
    ``len(x) - 1``; a single row becomes an isolated node.
    """
    n = x.shape[0]
    if not model.aggregate:
        graph = NormalizedGraph.identity(n)
    elif n == 1:
        graph = NormalizedGraph.identity(1)
    else:
        k_eff = min(k, n - 1)
        if k_eff < k:
            log.info("clipping k from %d to %d for a graph of %d nodes", k, k_eff, n)
        graph = build_graph(x, k_eff)
    return gcn_forward(model, graph, x)[0]


def _batches(n, batch_size, seed):
    if batch_size is None or batch_size >= n:
        # a single batch keeps the original node ordering
        return [np.arange(n)]
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([int(seed) % 2**64, 505]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def infer_logits(backbone, classifier, x, k, batch_size=None, seed=0):
    """Test-time logits for raw rows ``x``, one independent graph per batch.

    ``backbone=None`` treats ``x`` as ready-made features; ``classifier=None``
    scores with the backbone's own logits.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty test set")
    if classifier is None:
        return backbone_forward(backbone, x)[0]
    feats = x if backbone is None else extract_features(backbone, x)
    out = None
    for idx in _batches(feats.shape[0], batch_size, seed):
        logits = classifier_logits(classifier, feats[idx], k)
        if out is None:
            out = np.empty((feats.shape[0], logits.shape[1]))
        out[idx] = logits
    return out


def inductive_infer(backbone, classifier, test_set, k, batch_size=None, seed=0):
    """Score every row of ``test_set`` (ID and TEST_OOD) by maximum softmax probability."""
    logits = infer_logits(backbone, classifier, test_set.features, k, batch_size, seed)
    return InferenceResult(msp_scores(logits), logits.argmax(axis=1), test_set.roles, logits)


def knn_infer(train_feats, train_labels, test_feats, roles, k, K):
    """k-NN baseline: distance score plus majority-vote predictions among ID training rows.

    Vote ties go to the smaller class index.
    """
    scores = knn_distance_scores(train_feats, test_feats, k)
    train = _unit_rows(train_feats)
    q = _unit_rows(test_feats)
    sims = q @ train.T
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = train_labels[nearest]
    train_labels = np.asarray(train_labels)
    counts = np.zeros((q.shape[0], K), dtype=np.int64)
    for j in range(k):
        np.add.at(counts, (np.arange(q.shape[0]), votes[:, j]), 1)
    preds = counts.argmax(axis=1)
    return InferenceResult(scores, preds, np.asarray(roles), counts.astype(np.float64))


def evaluate(result, K, meta=None, tpr_target=0.95):
    """Compute all six metrics from an :class:`InferenceResult`."""
    s = result.score_set
    acc, acc_head, acc_tail = accuracy_report(result.id_preds, result.id_true, K)
    return MetricsReport(
        fpr95=fpr_at_tpr(s, tpr_target),
        auroc=auroc(s),
        aupr=aupr(s),
        acc=acc,
        acc_head=acc_head,
        acc_tail=acc_tail,
        meta=dict(meta or {}),
    )


def average_reports(reports, meta=None):
    """Field-wise mean of several reports (None entries stay None)."""
    values = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports]
        values[name] = None if any(v is None for v in vals) else float(np.mean(vals))
    return MetricsReport(**values, meta=dict(meta or {}))
