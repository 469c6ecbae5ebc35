"""Experiment harness: config parsing, the per-condition pipeline, sweeps and report aggregation."""

from __future__ import annotations

import csv
import dataclasses
import difflib
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import (
    BackboneModel,
    extract_features,
    gaussianize,
    pretrain_backbone,
    save_backbone,
    train_backbone,
)
from .data import (
    TEST_OOD,
    DatasetSpec,
    LabeledDataset,
    make_benchmark,
    read_embeddings,
    sample_heldout_oe,
    sample_test_ood,
)
from .errors import ConfigError, GcnOodError, StageError
from .evaluation import (
    METRIC_NAMES,
    MetricsReport,
    average_reports,
    evaluate,
    infer_logits,
    inductive_infer,
    knn_infer,
    msp_scores,
)
from .gcn import TrainConfig, save_gcn, train_gcn, write_trace
from .graph import NormalizedGraph, build_graph
from .losses import NodeMasks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Condition:
    pretrained: bool
    gaussianized: bool
    # "backbone" scores with the backbone's own logits, "knn" with feature distances
    head: str


CONDITIONS = {
    "SCRATCH_OE": Condition(False, False, "backbone"),
    "SCRATCH_GCN": Condition(False, False, "gcn"),
    "PRETRAIN": Condition(True, False, "linear"),
    "PRETRAIN_GCN": Condition(True, False, "gcn"),
    "PRETRAIN_GAU": Condition(True, True, "linear"),
    "PRETRAIN_GAU_GCN": Condition(True, True, "gcn"),
    "PRETRAIN_GAU_MLP": Condition(True, True, "mlp"),
    "KNN_BASELINE": Condition(True, False, "knn"),
}

SWEEP_AXES = ("k", "lambda", "batch_size")


def _parse_int_list(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_int(text):
    value = str(text).strip().lower()
    return None if value in ("", "none", "all", "full") else int(value)


def _parse_optional_path(text):
    value = str(text).strip()
    return None if value in ("", "none") else value


@dataclass(frozen=True)
class ExperimentConfig:
    condition: str
    # dataset
    K: int = 10
    n_max: int = 500
    rho: float = 100.0
    dim: int = 32
    n_oe: int = 1000
    n_ood_test: int = 1000
    n_test_per_class: int = 100
    seed: int = 0
    ood_sets: tuple = (0,)
    train_path: str | None = None
    test_path: str | None = None
    # graph and loss
    k: int = 7
    lam: float = 0.5
    # classifier
    epochs: int = 200
    lr0: float = 0.01
    hidden_dim: int = 64
    layers: int = 3
    head_bias: bool = True
    # backbone
    backbone_hidden: tuple = (64, 64)
    backbone_epochs: int = 50
    backbone_lr: float = 0.05
    backbone_batch: int = 128
    pretrain_classes: int = 300
    pretrain_per_class: int = 30
    pretrain_epochs: int = 30
    gau_data: str = "id_oe"
    gau_mode: str = "exact"
    gau_epochs: int = 20
    # evaluation
    batch_size: int | None = None
    tpr_target: float = 0.95
    n_heldout_oe: int = 1000
    out: str = "runs"

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            suggestion = difflib.get_close_matches(self.condition, CONDITIONS, n=1)
            hint = f"; did you mean {suggestion[0]!r}?" if suggestion else ""
            raise ConfigError("condition", f"unknown condition {self.condition!r}{hint}")
        if self.k < 1:
            raise ConfigError("k", "must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda", "must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.gau_data not in ("id_oe", "id"):
            raise ConfigError("gau_data", "must be id_oe or id")
        if self.gau_mode not in ("exact", "ema"):
            raise ConfigError("gau_mode", "must be exact or ema")
        if not self.ood_sets:
            raise ConfigError("ood_sets", "need at least one OOD set")
        if (self.train_path is None) != (self.test_path is None):
            raise ConfigError("train_path", "train_path and test_path must be given together")

    @property
    def spec(self):
        return DatasetSpec(
            K=self.K, n_max=self.n_max, rho=self.rho, dim=self.dim, n_oe=self.n_oe,
            n_ood_test=self.n_ood_test, seed=self.seed, n_test_per_class=self.n_test_per_class,
        )

    @property
    def train_config(self):
        return TrainConfig(lam=self.lam, epochs=self.epochs, lr0=self.lr0, seed=self.seed)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            key = _FIELD_TO_KEY.get(f.name, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = "none"
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


# keys as written in config files, where they differ from attribute names
_KEY_TO_FIELD = {"lambda": "lam"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}

_PARSERS = {
    "ood_sets": _parse_int_list,
    "backbone_hidden": _parse_int_list,
    "head_bias": _parse_bool,
    "batch_size": _parse_optional_int,
    "train_path": _parse_optional_path,
    "test_path": _parse_optional_path,
}


def _known_keys():
    return [_FIELD_TO_KEY.get(f.name, f.name) for f in dataclasses.fields(ExperimentConfig)]


def _convert(key, raw):
    name = _KEY_TO_FIELD.get(key, key)
    ftype = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}[name]
    if name in _PARSERS:
        parse = _PARSERS[name]
    elif ftype == "int":
        parse = int
    elif ftype == "float":
        parse = float
    else:
        parse = str
    if not isinstance(raw, str):
        return name, raw
    try:
        return name, parse(raw.strip())
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None


def read_config_text(text):
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(line, f"line {lineno} is not key=value")
        values[key.strip()] = value.strip()
    return values


def parse_config(path=None, overrides=None):
    """Merge a config file with overrides (overrides win) into an ExperimentConfig.

    Override values may be strings (as typed on a command line) or already
    typed values; ``None`` overrides are ignored.
    """
    values = {}
    if path is not None:
        values.update(read_config_text(Path(path).read_text()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = _known_keys()
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            near = difflib.get_close_matches(key, known, n=1)
            hint = f"; nearest known key is {near[0]!r}" if near else ""
            raise ConfigError(key, f"unknown key{hint}")
        name, value = _convert(key, raw)
        kwargs[name] = value
    if "condition" not in kwargs:
        raise ConfigError("condition", "required key missing")
    return ExperimentConfig(**kwargs)


def run_name(config, axes=()):
    parts = [config.condition, f"seed{config.seed}"]
    for axis in axes:
        value = getattr(config, _KEY_TO_FIELD.get(axis, axis))
        parts.append(f"{axis}{'full' if value is None else value}")
    return "-".join(parts)


# Pretraining is identical across conditions that share a seed, so one
# process keeps the trained models around.
_PRETRAIN_CACHE = {}


def _pretrained(config):
    key = (config.dim, config.backbone_hidden, config.pretrain_classes, config.pretrain_per_class,
           config.pretrain_epochs, config.backbone_lr, config.backbone_batch, config.seed)
    if key not in _PRETRAIN_CACHE:
        _PRETRAIN_CACHE[key] = pretrain_backbone(
            config.dim, hidden=config.backbone_hidden, n_classes=config.pretrain_classes,
            n_per_class=config.pretrain_per_class, epochs=config.pretrain_epochs,
            lr=config.backbone_lr, batch_size=config.backbone_batch, seed=config.seed,
        )
    return _PRETRAIN_CACHE[key].copy()


@contextmanager
def _stage(name, timings):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (GcnOodError, ValueError, ArithmeticError, OSError) as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def _load_data(config):
    """Training set and one test set per configured OOD set."""
    if config.train_path is not None:
        spec = config.spec
        train = read_embeddings(config.train_path, spec)
        test = read_embeddings(config.test_path, spec)
        test = test.subset((test.roles >= 0) | (test.roles == TEST_OOD))
        if train.features.shape[1] != config.dim or test.features.shape[1] != config.dim:
            raise ConfigError("dim", "does not match the ingested embedding width")
        return train, [test], None
    spec = config.spec
    train, first_test = make_benchmark(spec, ood_set=config.ood_sets[0])
    tests = [first_test]
    id_part = first_test.subset(first_test.roles >= 0)
    for ood_set in config.ood_sets[1:]:
        ood = sample_test_ood(spec, ood_set=ood_set)
        tests.append(LabeledDataset(
            np.concatenate([id_part.features, ood]),
            np.concatenate([id_part.roles, np.full(ood.shape[0], TEST_OOD, dtype=np.int32)]),
            spec,
        ))
    heldout = sample_heldout_oe(spec, config.n_heldout_oe) if config.n_heldout_oe else None
    return train, tests, heldout


def _classifier_shape(head, config):
    if head == "linear":
        return dict(layers=1, aggregate=False)
    if head == "mlp":
        return dict(layers=config.layers, aggregate=False)
    return dict(layers=config.layers, aggregate=True)


def run_experiment(config, run_dir=None):
    """Run one condition end to end and persist its artifacts; returns the MetricsReport.

    On failure a ``FAILED`` file holding the stage-tagged message is left in
    the run directory next to whatever artifacts were already written.
    """
    run_dir = Path(run_dir) if run_dir is not None else Path(config.out) / run_name(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("FAILED", "report.txt", "report.json"):
        (run_dir / stale).unlink(missing_ok=True)
    (run_dir / "config.txt").write_text(config.to_text())
    try:
        report = _run(config, run_dir)
    except StageError as exc:
        (run_dir / "FAILED").write_text(str(exc) + "\n")
        raise
    (run_dir / "report.txt").write_text(report.to_text())
    (run_dir / "report.json").write_text(report.to_json())
    _write_timings(run_dir / "timings.txt", report.timings)
    return report


def _write_timings(path, timings):
    Path(path).write_text("".join(f"{k}={v:.6f}\n" for k, v in timings.items()))


def _run(config, run_dir):
    cond = CONDITIONS[config.condition]
    timings = {}
    meta = {
        "condition": config.condition,
        "seed": config.seed,
        "k": config.k,
        "lambda": config.lam,
        "batch_size": "full" if config.batch_size is None else config.batch_size,
        "ood_sets": ",".join(str(s) for s in config.ood_sets),
    }

    with _stage("data", timings):
        train, tests, heldout = _load_data(config)
        train = train.subset(train.roles >= -1)
        masks = NodeMasks.from_roles(train.roles)
        K = config.K

    with _stage("backbone", timings):
        if cond.pretrained:
            backbone = _pretrained(config)
        else:
            init = BackboneModel.init(config.dim, config.backbone_hidden, K, seed=config.seed)
            backbone, _ = train_backbone(
                init, train, lr=config.backbone_lr, epochs=config.backbone_epochs,
                batch_size=config.backbone_batch, lam=config.lam, seed=config.seed,
            )
        save_backbone(run_dir / "backbone.gbkb", backbone)
        meta["bn_checksum_before"] = backbone.bn_checksum()

    with _stage("gaussianize", timings):
        if cond.gaussianized:
            data = train.features if config.gau_data == "id_oe" else train.features[train.id_mask]
            backbone = gaussianize(backbone, data, mode=config.gau_mode,
                                   epochs=config.gau_epochs, seed=config.seed)
            save_backbone(run_dir / "backbone_gau.gbkb", backbone)
        meta["bn_checksum_after"] = backbone.bn_checksum()

    with _stage("features", timings):
        feats = extract_features(backbone, train.features)

    classifier = None
    with _stage("classifier", timings):
        if cond.head in ("gcn", "linear", "mlp"):
            shape = _classifier_shape(cond.head, config)
            if shape["aggregate"]:
                graph = build_graph(feats, config.k)
            else:
                graph = NormalizedGraph.identity(feats.shape[0])
            classifier = train_gcn(
                graph, feats, masks, config.train_config, hidden_dim=config.hidden_dim,
                head_bias=config.head_bias, n_classes=K, **shape,
            )
            save_gcn(run_dir / "classifier.ggcn", classifier)
            write_trace(run_dir / "trace.csv", classifier.trace)

    with _stage("inference", timings):
        results = []
        for test in tests:
            if cond.head == "knn":
                id_rows = train.id_mask
                results.append(knn_infer(
                    feats[id_rows], train.roles[id_rows], extract_features(backbone, test.features),
                    test.roles, config.k, K,
                ))
            else:
                results.append(inductive_infer(
                    backbone, classifier, test, config.k, config.batch_size, config.seed,
                ))
        if heldout is not None and cond.head != "knn":
            logits = infer_logits(backbone, classifier, heldout, config.k,
                                  config.batch_size, config.seed)
            meta["heldout_oe_msp"] = float(msp_scores(logits).mean())

    with _stage("metrics", timings):
        for i, (ood_set, result) in enumerate(zip(config.ood_sets, results)):
            result.write_csv(run_dir / ("scores.csv" if i == 0 else f"scores_ood{ood_set}.csv"))
        reports = [evaluate(r, K, tpr_target=config.tpr_target) for r in results]
        report = reports[0] if len(reports) == 1 else average_reports(reports)
        report.meta = meta
    report.timings = timings
    return report


@dataclass
class SweepResult:
    axis: str
    values: list
    seeds: list
    cells: dict = field(default_factory=dict)   # (value, seed) -> MetricsReport or error string

    def failed(self):
        return {key: v for key, v in self.cells.items() if not isinstance(v, MetricsReport)}

    def mean(self, value, metric):
        vals = [self.cells[(value, s)] for s in self.seeds]
        vals = [getattr(r, metric) for r in vals if isinstance(r, MetricsReport)]
        if not vals or any(v is None for v in vals):
            return None
        return float(np.mean(vals))


def _axis_value(axis, raw):
    if axis not in SWEEP_AXES:
        raise ConfigError("axis", f"must be one of {', '.join(SWEEP_AXES)}")
    name, value = _convert(axis, raw if isinstance(raw, str) else str(raw))
    return name, value


def _fmt(value):
    if value is None:
        return "NA"
    return repr(value) if isinstance(value, float) else str(value)


def run_sweep(base, axis, values, seeds, out_dir=None):
    """Run ``base`` for every (value, seed) cell, writing sweep.csv and per-metric .dat files."""
    if not values:
        raise ConfigError("values", "sweep needs at least one value")
    if not seeds:
        raise ConfigError("seeds", "sweep needs at least one seed")
    out_dir = Path(out_dir if out_dir is not None else base.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    parsed = [_axis_value(axis, v) for v in values]
    result = SweepResult(axis, [v for _, v in parsed], list(seeds))
    for name, value in parsed:
        for seed in seeds:
            try:
                cfg = base.replace(**{name: value, "seed": seed})
                result.cells[(value, seed)] = run_experiment(cfg, out_dir / run_name(cfg, (axis,)))
            except (StageError, ConfigError) as exc:
                log.warning("sweep cell %s=%s seed=%s failed: %s", axis, value, seed, exc)
                result.cells[(value, seed)] = str(exc)
    write_sweep(result, out_dir)
    return result


def write_sweep(result, out_dir):
    out_dir = Path(out_dir)
    header = ["axis_value", "seed", *METRIC_NAMES]
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header + ["status"])
        for value in result.values:
            for seed in result.seeds:
                cell = result.cells[(value, seed)]
                if isinstance(cell, MetricsReport):
                    w.writerow([_fmt(value), seed, *(_fmt(getattr(cell, m)) for m in METRIC_NAMES), "ok"])
                else:
                    w.writerow([_fmt(value), seed, *(["NA"] * len(METRIC_NAMES)), "failed"])
        for value in result.values:
            w.writerow([_fmt(value), "mean", *(_fmt(result.mean(value, m)) for m in METRIC_NAMES), "mean"])
    for metric in METRIC_NAMES:
        with open(out_dir / f"{result.axis}_{metric}.dat", "w") as fh:
            fh.write(f"# {result.axis} mean_{metric}\n")
            for value in result.values:
                fh.write(f"{_fmt(value)} {_fmt(result.mean(value, metric))}\n")


ABLATION_COLUMNS = (("AUROC", "auroc"), ("AUPR", "aupr"), ("FPR95", "fpr95"),
                    ("ACC", "acc"), ("ACC_head", "acc_head"), ("ACC_tail", "acc_tail"))


def collect_reports(root):
    """Every successful run directory below ``root`` as ``(path, MetricsReport)``."""
    found = []
    for path in sorted(Path(root).rglob("report.json")):
        if (path.parent / "FAILED").exists():
            continue
        found.append((path.parent, MetricsReport.from_record(json.loads(path.read_text()))))
    return found


def aggregate_reports(root, out_csv):
    """Ablation table: one row per condition, metrics averaged over its runs (as percentages)."""
    groups = {}
    for _, report in collect_reports(root):
        groups.setdefault(report.meta.get("condition", "?"), []).append(report)
    order = [c for c in CONDITIONS if c in groups] + sorted(set(groups) - set(CONDITIONS))
    rows = []
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "n_runs", *(col for col, _ in ABLATION_COLUMNS)])
        for cond in order:
            mean = average_reports(groups[cond])
            cells = []
            for _, attr in ABLATION_COLUMNS:
                v = getattr(mean, attr)
                cells.append("NA" if v is None else f"{100 * v:.2f}")
            w.writerow([cond, len(groups[cond]), *cells])
            rows.append((cond, len(groups[cond]), cells))
    return rows
