"""Class-incremental task loop, accuracy matrix and experiment harness."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import Frontend
from .datasets import Dataset, LabeledClip, stack_inputs
from .errors import ConfigurationError, ContractError, MetricError
from .model import Classifier, ClassifierConfig, evaluate, train_epoch
from .numerics import AdamState
from .replay import ReplayBuffer, Strategy, derive_seed, select, union

log = logging.getLogger(__name__)

TIMING_FIELDS = ("avg_mua_seconds", "mua_seconds")


@dataclass
class Task:
    classes: list[int]
    train: list[LabeledClip]
    eval: list[LabeledClip]


@dataclass
class TaskStream:
    """Class-disjoint tasks. Clip labels are remapped to order of first
    appearance so task ``t`` owns model classes ``[t*k, (t+1)*k)``."""

    tasks: list[Task]
    class_order: list[int]

    def __len__(self) -> int:
        return len(self.tasks)

    def classes_through(self, t: int) -> int:
        return sum(len(task.classes) for task in self.tasks[: t + 1])


def build_task_stream(dataset: Dataset, classes_per_task: int, num_tasks: int, seed: int) -> TaskStream:
    if num_tasks < 1 or classes_per_task < 1:
        raise ConfigurationError("need at least one task with at least one class")
    if num_tasks * classes_per_task > dataset.num_classes:
        raise ConfigurationError(
            f"{num_tasks} tasks x {classes_per_task} classes exceeds the {dataset.num_classes} available classes"
        )
    order = [int(c) for c in np.random.default_rng([seed, 3]).permutation(dataset.num_classes)]
    order = order[: num_tasks * classes_per_task]
    remap = {c: i for i, c in enumerate(order)}

    def route(clips):
        out = [[] for _ in range(num_tasks)]
        for c in clips:
            if c.label in remap:
                new = remap[c.label]
                out[new // classes_per_task].append(
                    LabeledClip(c.clip_id, new, c.x, c.waveform, c.sample_rate, c.name))
        return out

    train, ev = route(dataset.train), route(dataset.eval)
    tasks = []
    for t in range(num_tasks):
        if not train[t] or not ev[t]:
            raise ConfigurationError(f"task {t} has an empty train or eval split")
        tasks.append(Task(list(range(t * classes_per_task, (t + 1) * classes_per_task)), train[t], ev[t]))
    return TaskStream(tasks, order)


# --- metrics -----------------------------------------------------------------

def new_accuracy_matrix(T: int) -> np.ndarray:
    return np.full((T, T), np.nan)


def compute_acc(R) -> float:
    """Mean of the final row: accuracy on every task's eval set after the last task."""
    R = np.asarray(R, dtype=np.float64)
    final = R[-1]
    if np.isnan(final).any():
        raise ContractError("final row of the accuracy matrix is incomplete")
    return float(final.mean())


def compute_bwt(R) -> float:
    """``1/(T-1) * sum_{i<T} (R[T-1, i] - R[i, i])`` with zero-based indices."""
    R = np.asarray(R, dtype=np.float64)
    T = R.shape[0]
    if T < 2:
        raise MetricError("backward transfer needs at least two tasks")
    final, diag = R[-1, :-1], np.diag(R)[:-1]
    if np.isnan(final).any() or np.isnan(diag).any():
        raise ContractError("accuracy matrix lacks the diagonal or final row")
    return float(np.sum(final - diag) / (T - 1))


# --- task loop ---------------------------------------------------------------

@dataclass
class TrainSettings:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    capacity: int = 50
    hidden_dims: tuple[int, ...] = (128, 128)
    embedding_dim: int = 64


@dataclass
class EngineState:
    stream: TaskStream
    model: Classifier
    buffer: ReplayBuffer
    settings: TrainSettings
    seed: int
    frontend: Frontend | None = None
    R: np.ndarray = None
    next_task: int = 0
    mua_seconds: list[float] = field(default_factory=list)
    mua_backbone: list[int] = field(default_factory=list)
    mua_head: list[int] = field(default_factory=list)
    peak_history: int = 0
    last_training_set: list[LabeledClip] = field(default_factory=list)

    def __post_init__(self):
        if self.R is None:
            self.R = new_accuracy_matrix(len(self.stream))


def init_engine(stream: TaskStream, strategy: Strategy, settings: TrainSettings, seed: int,
                input_dim: int, frontend: Frontend | None = None) -> EngineState:
    capacity = 0 if strategy.name == "finetune" else settings.capacity
    model = Classifier(ClassifierConfig(input_dim, tuple(settings.hidden_dims), settings.embedding_dim,
                                        len(stream.tasks[0].classes), seed=derive_seed(seed, 4)))
    return EngineState(stream, model, ReplayBuffer(capacity, strategy), settings, seed, frontend)


def run_task(state: EngineState, t: int) -> np.ndarray:
    """Train on ``buffer + D_t``, fill row ``t`` of R, then refill the buffer."""
    if t != state.next_task:
        raise ContractError(f"task {t} requested but task {state.next_task} is next")
    task = state.stream.tasks[t]
    model, s = state.model, state.settings

    n_classes = state.stream.classes_through(t)
    if n_classes > model.num_classes:
        model.expand_head(n_classes)

    training_set = union(state.buffer.entries, task.train)
    x, y = stack_inputs(training_set)
    adam = AdamState(model.params(), lr=s.lr)
    for epoch in range(s.epochs):
        train_epoch(model, x, y, adam, s.batch_size, np.random.default_rng(derive_seed(state.seed, 5, t, epoch)))

    for j in range(t + 1):
        ex, ey = stack_inputs(state.stream.tasks[j].eval)
        state.R[t, j] = evaluate(model, ex, ey)

    # the refill only matters if another task follows
    if t + 1 < len(state.stream):
        b0, h0 = model.backbone_count, model.head_count
        start = time.perf_counter()
        chosen, scores = select(state.buffer.strategy, training_set, state.buffer.capacity, model,
                                derive_seed(state.seed, 6, t), state.frontend)
        state.buffer.replace(chosen, scores)
        state.mua_seconds.append(time.perf_counter() - start)
        state.mua_backbone.append(model.backbone_count - b0)
        state.mua_head.append(model.head_count - h0)
        state.peak_history = max(state.peak_history, len(state.buffer))
    state.last_training_set = training_set
    state.next_task += 1
    log.debug("task %d: R row %s", t, state.R[t, : t + 1])
    return state.R[t]


@dataclass
class MethodRun:
    label: str
    seed: int
    R: np.ndarray
    acc: float
    bwt: float | None
    mua_seconds: list[float]
    backbone_passes: int
    head_passes: int
    peak_history: int

    @property
    def avg_mua_seconds(self) -> float:
        return float(np.mean(self.mua_seconds)) if self.mua_seconds else 0.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "acc": self.acc,
            "bwt": self.bwt,
            "avg_mua_seconds": self.avg_mua_seconds,
            "mua_seconds": list(self.mua_seconds),
            "backbone_passes": self.backbone_passes,
            "head_passes": self.head_passes,
            "peak_buffer": self.peak_history,
            "R": matrix_to_json(self.R),
        }


def run_method(dataset: Dataset, stream: TaskStream, strategy: Strategy, settings: TrainSettings,
               seed: int, label: str | None = None) -> MethodRun:
    input_dim = stream.tasks[0].train[0].x.size
    state = init_engine(stream, strategy, settings, seed, input_dim, dataset.frontend)
    for t in range(len(stream)):
        run_task(state, t)
    bwt = compute_bwt(state.R) if len(stream) > 1 else None
    return MethodRun(label or strategy.label, seed, state.R, compute_acc(state.R), bwt,
                     state.mua_seconds, int(sum(state.mua_backbone)), int(sum(state.mua_head)),
                     state.peak_history)


def joint_accuracy(dataset: Dataset, stream: TaskStream, settings: TrainSettings, seed: int) -> float:
    """Upper bound: one model trained on every task's data at once."""
    merged = Task([c for t in stream.tasks for c in t.classes],
                  [c for t in stream.tasks for c in t.train],
                  [c for t in stream.tasks for c in t.eval])
    joint = TaskStream([merged], stream.class_order)
    return run_method(dataset, joint, Strategy("finetune"), settings, seed).acc


# --- serialisation -----------------------------------------------------------

def matrix_to_json(R: np.ndarray) -> list[list[float | None]]:
    return [[None if np.isnan(v) else float(v) for v in row] for row in np.asarray(R)]


def matrix_from_json(rows) -> np.ndarray:
    return np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64)


def summarize(runs: Sequence[MethodRun], strategy: Strategy) -> dict:
    accs = np.array([r.acc for r in runs])
    bwts = np.array([np.nan if r.bwt is None else r.bwt for r in runs])
    mean_R = np.mean([r.R for r in runs], axis=0)
    uses_k = strategy.name in ("uncertainty", "uncertainty++")
    return {
        "method": strategy.name,
        "K": strategy.K if uses_k else None,
        "lambda": strategy.lam if strategy.name == "uncertainty++" else None,
        "family": strategy.family if strategy.name == "uncertainty" else None,
        "acc": float(accs.mean()),
        "acc_std": float(accs.std()),
        "bwt": None if np.isnan(bwts).all() else float(np.nanmean(bwts)),
        "bwt_std": None if np.isnan(bwts).all() else float(np.nanstd(bwts)),
        "avg_mua_seconds": float(np.mean([r.avg_mua_seconds for r in runs])),
        "backbone_passes": int(np.mean([r.backbone_passes for r in runs])),
        "head_passes": int(np.mean([r.head_passes for r in runs])),
        "R": matrix_to_json(mean_R),
        "runs": [r.to_dict() for r in runs],
    }


def strip_timing(obj):
    """Copy of a results document without wall-clock fields."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def dump_results(doc: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "results.json"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["method", "K", "seed", "acc", "bwt", "avg_mua_seconds", "backbone_passes", "head_passes"])
        for label, m in doc["methods"].items():
            for r in m["runs"]:
                w.writerow([label, "" if m["K"] is None else m["K"], r["seed"], repr(r["acc"]),
                            "" if r["bwt"] is None else repr(r["bwt"]), repr(r["avg_mua_seconds"]),
                            r["backbone_passes"], r["head_passes"]])
    return json_path, csv_path
