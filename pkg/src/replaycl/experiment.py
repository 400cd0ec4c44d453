"""Library entry points behind the CLI: run, bench-mua, report."""
from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, MethodConfig
from .datasets import Dataset, SyntheticSpec, generate_synthetic, load_dataset, load_manifest_csv, stack_inputs
from .engine import (TaskStream, TrainSettings, build_task_stream, dump_results, matrix_from_json,
                     run_method, summarize)
from .errors import ConfigurationError, FormatError
from .model import Classifier, ClassifierConfig, train_epoch
from .numerics import AdamState
from .replay import derive_seed, select

log = logging.getLogger(__name__)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    frontend = cfg.frontend.build()
    d = cfg.dataset
    if d.kind == "synthetic":
        spec = SyntheticSpec(num_classes=d.num_classes, clips_per_class=d.clips_per_class,
                             seconds=d.seconds, sample_rate=frontend.sample_rate, seed=d.seed,
                             tones_per_class=d.tones_per_class, snr_db=d.snr_db)
        return generate_synthetic(spec, frontend)
    csv_path = Path(d.csv)
    root = Path(d.root) if d.root else csv_path.parent
    manifest = load_manifest_csv(root, csv_path)
    return load_dataset(manifest, d.eval_fold, frontend, d.cache_dir or None)


def train_settings(cfg: ExperimentConfig) -> TrainSettings:
    return TrainSettings(cfg.training.epochs, cfg.training.batch_size, cfg.training.lr, cfg.capacity,
                         tuple(cfg.model.hidden_dims), cfg.model.embedding_dim)


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None) -> dict:
    """Run every configured method for every seed; returns the results document."""
    dataset = dataset or build_dataset(cfg)
    settings = train_settings(cfg)
    runs: dict[str, list] = {m.display: [] for m in cfg.methods}
    for seed in cfg.seeds:
        stream = build_task_stream(dataset, cfg.classes_per_task, cfg.stream.tasks, seed)
        for m in cfg.methods:
            t0 = time.perf_counter()
            r = run_method(dataset, stream, m.strategy(), settings, seed, m.display)
            log.info("seed %d %-20s ACC %.3f BWT %s (%.1fs)", seed, m.display, r.acc,
                     "n/a" if r.bwt is None else f"{r.bwt:.3f}", time.perf_counter() - t0)
            runs[m.display].append(r)
    return {
        "schema": "replaycl.results/1",
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "method_order": [m.display for m in cfg.methods],
        "methods": {m.display: summarize(runs[m.display], m.strategy()) for m in cfg.methods},
    }


def run_and_write(cfg: ExperimentConfig, out_dir=None) -> dict:
    doc = run_experiment(cfg)
    dump_results(doc, out_dir or cfg.output_dir)
    return doc


# --- MUA cost benchmark ------------------------------------------------------

BENCH_COLUMNS = ["method", "K", "candidates", "avg_seconds", "backbone_passes", "head_passes"]


def trained_reference_model(dataset: Dataset, stream: TaskStream, cfg: ExperimentConfig, seed: int) -> Classifier:
    """A model trained jointly on every class of the stream (the scorer for benchmarks)."""
    clips = [c for t in stream.tasks for c in t.train]
    x, y = stack_inputs(clips)
    model = Classifier(ClassifierConfig(x.shape[1], tuple(cfg.model.hidden_dims), cfg.model.embedding_dim,
                                        stream.classes_through(len(stream) - 1), seed=derive_seed(seed, 4)))
    adam = AdamState(model.params(), lr=cfg.training.lr)
    for epoch in range(cfg.training.epochs):
        train_epoch(model, x, y, adam, cfg.training.batch_size, np.random.default_rng(derive_seed(seed, 7, epoch)))
    return model


def measure_mua_cost(model, candidates, method: MethodConfig, capacity: int, frontend,
                     seed: int = 0, repeats: int = 1) -> dict:
    """Wall time and forward passes of one buffer refill (scoring plus selection)."""
    strategy = method.strategy()
    times, bb, hd = [], 0, 0
    for r in range(repeats):
        b0, h0 = model.backbone_count, model.head_count
        start = time.perf_counter()
        select(strategy, candidates, capacity, model, derive_seed(seed, 8, r), frontend)
        times.append(time.perf_counter() - start)
        bb, hd = model.backbone_count - b0, model.head_count - h0
    return {"avg_seconds": float(np.mean(times)), "backbone_passes": int(bb), "head_passes": int(hd)}


def bench_mua(cfg: ExperimentConfig, Ks: Sequence[int] = (2, 4, 6), candidates: int | None = None,
              repeats: int = 3, dataset: Dataset | None = None) -> list[dict]:
    methods = [m for m in cfg.methods if m.name in ("uncertainty", "uncertainty++")]
    if len(methods) < 2:
        raise ConfigurationError("bench-mua needs at least two uncertainty methods in the config")
    dataset = dataset or build_dataset(cfg)
    seed = cfg.seeds[0]
    stream = build_task_stream(dataset, cfg.classes_per_task, cfg.stream.tasks, seed)
    model = trained_reference_model(dataset, stream, cfg, seed)
    pool = [c for t in stream.tasks for c in t.train]
    if candidates is not None:
        pool = pool[:candidates]
    # capacity below the pool size so the refill actually scores
    capacity = min(cfg.capacity, max(len(pool) - 1, 0))
    rows = []
    for m in methods:
        for K in Ks:
            mk = MethodConfig(**{**vars(m), "K": int(K)})
            cost = measure_mua_cost(model, pool, mk, capacity, dataset.frontend, seed, repeats)
            rows.append({"method": m.display, "K": int(K), "candidates": len(pool), **cost})
    return rows


def write_bench_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "avg_seconds": repr(r["avg_seconds"])})
    return path


def read_bench_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            {"method": r["method"], "K": int(r["K"]), "candidates": int(r["candidates"]),
             "avg_seconds": float(r["avg_seconds"]), "backbone_passes": int(r["backbone_passes"]),
             "head_passes": int(r["head_passes"])}
            for r in csv.DictReader(f)
        ]


# --- report ------------------------------------------------------------------

REPORT_COLUMNS = ["Method", "K", "ACC", "BWT", "AvgTime"]


def load_results(results_dir) -> list[tuple[Path, dict]]:
    root = Path(results_dir)
    paths = [root] if root.is_file() else sorted(root.rglob("results.json"))
    if not paths:
        raise FileNotFoundError(f"no results.json under {root}")
    docs = []
    for p in paths:
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
            doc["methods"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{p}: not a valid results document ({exc})") from exc
        docs.append((p, doc))
    return docs


def _fmt(values: list[float], digits: int = 3) -> str:
    if not values:
        return "n/a"
    if len(values) == 1:
        return f"{values[0]:.{digits}f}"
    return f"{np.mean(values):.{digits}f} ± {np.std(values):.{digits}f}"


def build_report(results_dir) -> tuple[list[dict], list[dict]]:
    """Aggregate runs by method label; returns (table rows, accuracy-curve rows)."""
    merged: dict[str, dict] = {}
    curves = []
    for path, doc in load_results(results_dir):
        order = doc.get("method_order") or list(doc["methods"])
        for label in order:
            m = doc["methods"][label]
            entry = merged.setdefault(label, {"K": m.get("K"), "acc": [], "bwt": [], "time": []})
            for r in m.get("runs", []):
                entry["acc"].append(r["acc"])
                if r.get("bwt") is not None:
                    entry["bwt"].append(r["bwt"])
                entry["time"].append(r.get("avg_mua_seconds", 0.0))
                R = matrix_from_json(r["R"])
                for t in range(R.shape[0]):
                    curves.append({"method": label, "seed": r["seed"], "task": t,
                                   "acc_seen": float(np.nanmean(R[t, : t + 1]))})
    table = []
    for label, e in merged.items():
        table.append({
            "Method": label,
            "K": "" if e["K"] is None else str(e["K"]),
            "ACC": _fmt(e["acc"]),
            "BWT": _fmt(e["bwt"]),
            "AvgTime": _fmt(e["time"], 4),
        })
    return table, curves


def render_table(rows: list[dict]) -> str:
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) for c in REPORT_COLUMNS}
    line = "  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS)
    out = [line, "  ".join("-" * widths[c] for c in REPORT_COLUMNS)]
    for r in rows:
        out.append("  ".join(r[c].ljust(widths[c]) for c in REPORT_COLUMNS))
    return "\n".join(out)


def write_report(results_dir, out_dir=None) -> tuple[str, Path, Path]:
    table, curves = build_report(results_dir)
    root = Path(results_dir)
    out = Path(out_dir) if out_dir else (root if root.is_dir() else root.parent)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "report.csv"
    with open(table_path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(table)
    curve_path = out / "accuracy_curves.csv"
    with open(curve_path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["method", "seed", "task", "acc_seen"])
        w.writeheader()
        w.writerows(curves)
    return render_table(table), table_path, curve_path
