"""Command line interface.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, default_config_path, load_config
from .errors import ConfigurationError, FormatError

OUTPUT_ENV = "REPLAYCL_OUTPUT_DIR"

log = logging.getLogger("replaycl")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config or default_config_path())
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "epochs", None) is not None:
        cfg.training.epochs = args.epochs
    env = os.environ.get(OUTPUT_ENV)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    elif env:
        cfg.output_dir = env
    return cfg


def cmd_run(args) -> int:
    from .experiment import run_and_write

    cfg = _load(args)
    doc = run_and_write(cfg)
    for label, m in doc["methods"].items():
        bwt = "n/a" if m["bwt"] is None else f"{m['bwt']:.3f}"
        print(f"{label:<20} ACC {m['acc']:.3f}  BWT {bwt}")
    print(f"wrote {Path(cfg.output_dir) / 'results.json'}")
    return 0


def cmd_bench_mua(args) -> int:
    from .experiment import bench_mua, write_bench_csv

    cfg = _load(args)
    rows = bench_mua(cfg, args.K, args.candidates, args.repeats)
    path = write_bench_csv(rows, Path(cfg.output_dir) / "bench_mua.csv")
    print(f"{'method':<20} {'K':>3} {'seconds':>10} {'backbone':>9} {'head':>7}")
    for r in rows:
        print(f"{r['method']:<20} {r['K']:>3} {r['avg_seconds']:>10.4f} {r['backbone_passes']:>9} {r['head_passes']:>7}")
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .model import Classifier, ClassifierConfig, gradient_check

    worst = 0.0
    for seed in args.seeds:
        rng = np.random.default_rng(seed)
        m = Classifier(ClassifierConfig(num_classes=10, seed=seed))
        x = rng.standard_normal((8, m.config.input_dim))
        y = rng.integers(0, 10, size=8)
        err = gradient_check(m, x, y, seed=seed)
        worst = max(worst, err)
        print(f"seed {seed}: max relative error {err:.3e}")
    ok = worst < args.tol
    print("PASS" if ok else "FAIL", f"(tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_gen_synth(args) -> int:
    from .datasets import SyntheticSpec, write_synthetic

    spec = SyntheticSpec(num_classes=args.classes, clips_per_class=args.clips, seconds=args.seconds,
                         sample_rate=args.sample_rate, seed=args.seed)
    path = write_synthetic(spec, args.out)
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    from .experiment import write_report

    text, table, curves = write_report(args.results, args.out)
    print(text)
    print(f"wrote {table} and {curves}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="replaycl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a continual-learning experiment")
    run.add_argument("config", nargs="?", help="TOML config (default: bundled synthetic config)")
    run.add_argument("--seed", type=int, help="replace the config's seed list with this seed")
    run.add_argument("--epochs", type=int, help="override training.epochs")
    run.add_argument("--out", help="output directory")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench-mua", help="time the uncertainty memory-update algorithms")
    bench.add_argument("config", nargs="?")
    bench.add_argument("--K", type=int, nargs="+", default=[2, 4, 6])
    bench.add_argument("--candidates", type=int, default=None)
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--seed", type=int)
    bench.add_argument("--epochs", type=int)
    bench.add_argument("--out")
    bench.set_defaults(func=cmd_bench_mua)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the classifier's gradients")
    gc.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    gen = sub.add_parser("gen-synth", help="write the synthetic dataset as WAV files plus a manifest CSV")
    gen.add_argument("out")
    gen.add_argument("--classes", type=int, default=10)
    gen.add_argument("--clips", type=int, default=40)
    gen.add_argument("--seconds", type=float, default=1.0)
    gen.add_argument("--sample-rate", type=int, default=16000)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen_synth)

    rep = sub.add_parser("report", help="tabulate results.json files")
    rep.add_argument("results", help="results directory or a results.json file")
    rep.add_argument("--out", help="where to write report.csv and accuracy_curves.csv")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
