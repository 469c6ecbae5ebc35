"""Command-line entry point: ``gen``, ``run``, ``sweep`` and ``report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DatasetSpec, make_benchmark, write_embeddings, write_spec
from .errors import GcnOodError
from .experiment import CONDITIONS, SWEEP_AXES, aggregate_reports, parse_config, run_experiment, run_sweep


def _add_run_flags(p):
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--condition", choices=sorted(CONDITIONS))
    p.add_argument("--k", help="neighbors per node in the k-NN graphs")
    p.add_argument("--lambda", dest="lam", help="weight of the outlier-exposure term")
    p.add_argument("--batch-size", help="test nodes per inference graph (default: all)")
    p.add_argument("--seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _overrides(args):
    values = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value
    flags = {
        "condition": args.condition, "k": args.k, "lambda": args.lam,
        "batch_size": args.batch_size, "seed": args.seed, "out": args.out,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    return values


def _seeds(text):
    return [int(s) for s in text.replace(",", " ").split()]


def build_parser():
    parser = argparse.ArgumentParser(prog="gcnood", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic benchmark as embedding files")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--K", type=int, default=10)
    gen.add_argument("--n-max", type=int, default=500)
    gen.add_argument("--rho", type=float, default=100.0)
    gen.add_argument("--dim", type=int, default=32)
    gen.add_argument("--n-oe", type=int, default=1000)
    gen.add_argument("--n-ood-test", type=int, default=1000)
    gen.add_argument("--n-test-per-class", type=int, default=100)
    gen.add_argument("--ood-set", type=int, default=0)

    run = sub.add_parser("run", help="run one experiment")
    _add_run_flags(run)

    sweep = sub.add_parser("sweep", help="sweep one axis over several seeds")
    _add_run_flags(sweep)
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", required=True, help="comma-separated axis values")
    sweep.add_argument("--seeds", type=_seeds, default=[0], help="comma-separated seeds")

    report = sub.add_parser("report", help="aggregate run directories into an ablation CSV")
    report.add_argument("root", type=Path)
    report.add_argument("--out", type=Path, help="CSV path (default: ROOT/ablation.csv)")
    return parser


def cmd_gen(args):
    spec = DatasetSpec(K=args.K, n_max=args.n_max, rho=args.rho, dim=args.dim, n_oe=args.n_oe,
                       n_ood_test=args.n_ood_test, seed=args.seed,
                       n_test_per_class=args.n_test_per_class)
    train, test = make_benchmark(spec, ood_set=args.ood_set)
    args.out.mkdir(parents=True, exist_ok=True)
    write_embeddings(args.out / "train.gemb", train.features, train.roles)
    write_embeddings(args.out / "test.gemb", test.features, test.roles)
    write_spec(args.out / "spec.txt", spec)
    print(f"wrote {len(train)} training and {len(test)} test rows to {args.out}")


def cmd_run(args):
    config = parse_config(args.config, _overrides(args))
    report = run_experiment(config)
    sys.stdout.write(report.to_text())


def cmd_sweep(args):
    overrides = _overrides(args)
    overrides.pop("seed", None)
    config = parse_config(args.config, overrides)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    result = run_sweep(config, args.axis, values, args.seeds)
    for value in result.values:
        auroc = result.mean(value, "auroc")
        print(f"{args.axis}={value} mean_auroc={'NA' if auroc is None else f'{auroc:.4f}'}")
    failed = result.failed()
    for (value, seed), message in failed.items():
        print(f"failed {args.axis}={value} seed={seed}: {message}", file=sys.stderr)
    return 1 if failed else 0


def cmd_report(args):
    out = args.out or args.root / "ablation.csv"
    rows = aggregate_reports(args.root, out)
    for cond, n, cells in rows:
        print(cond, n, *cells)
    print(f"wrote {out}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"gen": cmd_gen, "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}[args.command]
    try:
        return handler(args) or 0
    except GcnOodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
