"""Replay buffer and the memory-update algorithms that refill it.

Every selector takes the candidate pool (the previous task's training set:
carried-over buffer plus that task's new data) and returns at most ``L``
clips. Model-dependent selectors read embeddings or class probabilities
from the current classifier; their forward-pass cost shows up in the
model's ``backbone_count`` / ``head_count``.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .audio import Frontend, PerturbationSpec, perturb
from .datasets import LabeledClip, featurize
from .errors import ConfigurationError, ContractError

STRATEGIES = ("finetune", "random", "reservoir", "prototype", "uncertainty", "uncertainty++")

PERTURBATION_FAMILIES = {
    "shift": ("time_shift", "pitch_shift"),
    "noise": ("colored_noise",),
}


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _group_by_class(clips: Sequence[LabeledClip]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for i, c in enumerate(clips):
        groups[c.label].append(i)
    return dict(sorted(groups.items()))


def class_quotas(counts: dict[int, int], capacity: int) -> dict[int, int]:
    """Split ``capacity`` slots across classes.

    Each class gets ``capacity // n_classes`` (capped at its size); leftover
    slots go one at a time to classes that still have unpicked candidates,
    largest class first, then lowest class id. The quotas sum to
    ``min(capacity, total candidates)``.
    """
    if not counts:
        return {}
    base = capacity // len(counts)
    quota = {c: min(base, n) for c, n in counts.items()}
    left = min(capacity, sum(counts.values())) - sum(quota.values())
    order = sorted(counts, key=lambda c: (-counts[c], c))
    while left > 0:
        for c in order:
            if left == 0:
                break
            if quota[c] < counts[c]:
                quota[c] += 1
                left -= 1
    return quota


# --- model-free selectors ----------------------------------------------------

def select_random(candidates: Sequence, L: int, seed: int) -> list:
    if L < 0:
        raise ConfigurationError("buffer size must be non-negative")
    if L >= len(candidates):
        return list(candidates)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.permutation(len(candidates))[:L])
    return [candidates[i] for i in idx]


def select_reservoir(candidates: Sequence, L: int, seed: int) -> list:
    """Vitter's Algorithm R over the candidates in order."""
    if L < 1:
        raise ConfigurationError("reservoir size must be >= 1")
    rng = np.random.default_rng(seed)
    reservoir = list(candidates[:L])
    for i in range(L, len(candidates)):
        m = int(rng.integers(0, i + 1))
        if m < L:
            reservoir[m] = candidates[i]
    return reservoir


# --- prototype (herding) -----------------------------------------------------

def herding(embeddings: np.ndarray, quota: int) -> list[int]:
    """Greedy herding: each step adds the point that brings the running mean
    closest (squared Euclidean) to the class mean. Ties go to the lower index."""
    emb = np.asarray(embeddings, dtype=np.float64)
    n = emb.shape[0]
    quota = min(quota, n)
    mu = emb.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros(emb.shape[1])
    available = np.ones(n, dtype=bool)
    for k in range(1, quota + 1):
        dist = np.sum((mu - (running + emb) / k) ** 2, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        available[i] = False
        running += emb[i]
    return chosen


def select_prototype(candidates: Sequence[LabeledClip], L: int, model) -> list[LabeledClip]:
    if model is None:
        raise ConfigurationError("prototype selection needs a model")
    if L <= 0 or not candidates:
        return []
    groups = _group_by_class(candidates)
    quotas = class_quotas({c: len(ix) for c, ix in groups.items()}, L)
    emb = model.forward_backbone(np.stack([c.x for c in candidates]))
    picked = []
    for c, ix in groups.items():
        for j in herding(emb[ix], quotas[c]):
            picked.append(ix[j])
    return [candidates[i] for i in sorted(picked)]


# --- uncertainty -------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingPerturbConfig:
    lam: float = 1.0
    K: int = 4
    seed: int = 0
    per_dimension_std: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.K < 1:
            raise ContractError("K must be >= 1")


@dataclass(frozen=True)
class WaveformPerturbConfig:
    family: str = "noise"
    K: int = 4
    seed: int = 0
    shift_range: tuple[float, float] = (-0.25, 0.25)
    semitone_range: tuple[float, float] = (-2.0, 2.0)
    alpha_range: tuple[float, float] = (0.0, 2.0)
    snr_db_range: tuple[float, float] = (10.0, 30.0)

    def __post_init__(self):
        if self.family not in PERTURBATION_FAMILIES:
            raise ConfigurationError(f"unknown perturbation family {self.family!r}")
        if self.K < 1:
            raise ContractError("K must be >= 1")

    def spec_for(self, clip_id: int, k: int) -> PerturbationSpec:
        kinds = PERTURBATION_FAMILIES[self.family]
        return PerturbationSpec(kinds[k % len(kinds)], derive_seed(self.seed, clip_id, k),
                                self.shift_range, self.semitone_range,
                                self.alpha_range, self.snr_db_range)


def uncertainty_from_probs(p_true) -> np.ndarray:
    """``1 - mean_k P(true class | k-th perturbed copy)``, rows are samples."""
    p = np.asarray(p_true, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    return np.clip(1.0 - p.mean(axis=1), 0.0, 1.0)


def score_uncertainty_waveform(clips: Sequence[LabeledClip], model, cfg: WaveformPerturbConfig,
                               frontend: Frontend | None = None,
                               perturb_fn: Callable[[np.ndarray, PerturbationSpec], np.ndarray] | None = None,
                               featurize_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Monte-Carlo uncertainty from K perturbed waveforms per clip.

    Every perturbed copy goes through the full model, so the backbone sees
    ``len(clips) * K`` rows.
    """
    frontend = frontend or Frontend()
    perturb_fn = perturb_fn or perturb
    featurize_fn = featurize_fn or (lambda s: featurize(s, frontend))
    if not clips:
        return np.zeros(0)
    rows = []
    for clip in clips:
        if clip.waveform is None:
            raise ConfigurationError(f"clip {clip.clip_id} has no waveform to perturb")
        for k in range(cfg.K):
            rows.append(featurize_fn(perturb_fn(clip.waveform, cfg.spec_for(clip.clip_id, k))))
    probs = model.predict_proba(np.stack(rows))
    labels = np.repeat([c.label for c in clips], cfg.K)
    p_true = probs[np.arange(len(labels)), labels].reshape(len(clips), cfg.K)
    return uncertainty_from_probs(p_true)


def perturb_embedding(e: np.ndarray, lam: float, K: int, rng: np.random.Generator,
                      std=None) -> np.ndarray:
    """K copies of ``e + U(-lam/2, lam/2) * std(e)``; returns shape ``(K, d)``.

    ``std`` defaults to the population standard deviation of ``e``'s
    components; pass a vector to scale per dimension instead.
    """
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    s = e.std() if std is None else np.asarray(std, dtype=np.float64)
    if lam == 0:
        return np.tile(e, (K, 1))
    noise = rng.uniform(-lam / 2.0, lam / 2.0, size=(K, e.size))
    return e + noise * s


def score_uncertainty_embedding(clips: Sequence[LabeledClip], model,
                                cfg: EmbeddingPerturbConfig) -> np.ndarray:
    """Uncertainty from K perturbed embeddings per clip.

    The backbone runs once per clip; only the head sees the ``K`` copies.
    """
    if not clips:
        return np.zeros(0)
    emb = model.forward_backbone(np.stack([c.x for c in clips]))
    dim_std = emb.std(axis=0) if cfg.per_dimension_std else None
    perturbed = np.concatenate([
        perturb_embedding(e, cfg.lam, cfg.K, np.random.default_rng([cfg.seed, clip.clip_id]), dim_std)
        for clip, e in zip(clips, emb)
    ])
    probs = model.head_proba(perturbed)
    labels = np.repeat([c.label for c in clips], cfg.K)
    p_true = probs[np.arange(len(labels)), labels].reshape(len(clips), cfg.K)
    return uncertainty_from_probs(p_true)


def stride_indices(n: int, q: int) -> list[int]:
    """Positions ``floor(j * n / q)`` for ``j < q`` through a list of length ``n``,
    topped up from the front if rounding ever collides."""
    q = min(q, n)
    picks = list(dict.fromkeys((j * n) // q for j in range(q)))
    for i in range(n):
        if len(picks) >= q:
            break
        if i not in picks:
            picks.append(i)
    return picks


def select_by_uncertainty(candidates: Sequence[LabeledClip], scores, L: int) -> list[LabeledClip]:
    """Per class, sort by descending uncertainty and take a uniform stride."""
    scores = np.asarray(scores, dtype=np.float64)
    groups = _group_by_class(candidates)
    if L < len(groups):
        raise ConfigurationError(f"buffer size {L} is smaller than the {len(groups)} classes to cover")
    quotas = class_quotas({c: len(ix) for c, ix in groups.items()}, L)
    picked = []
    for c, ix in groups.items():
        ranked = sorted(ix, key=lambda i: -scores[i])
        picked.extend(ranked[p] for p in stride_indices(len(ranked), quotas[c]))
    return [candidates[i] for i in sorted(picked)]


# --- buffer ------------------------------------------------------------------

@dataclass
class Strategy:
    """A memory-update algorithm and its parameters."""

    name: str
    K: int = 4
    lam: float = 1.0
    family: str = "noise"
    per_dimension_std: bool = False
    perturbation: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.name!r}; choose from {STRATEGIES}")

    @property
    def needs_model(self) -> bool:
        return self.name in ("prototype", "uncertainty", "uncertainty++")

    @property
    def label(self) -> str:
        if self.name == "uncertainty":
            return f"uncertainty-{self.family}"
        return self.name


def select(strategy: Strategy, candidates: Sequence[LabeledClip], L: int, model=None,
           seed: int = 0, frontend: Frontend | None = None) -> tuple[list[LabeledClip], np.ndarray | None]:
    """Run one memory-update step. Returns the selection and the scores, if any."""
    if strategy.needs_model and model is None:
        raise ConfigurationError(f"strategy {strategy.name!r} needs a model")
    if strategy.name == "finetune" or L <= 0:
        return [], None
    if len(candidates) <= L:
        return list(candidates), None
    if strategy.name == "random":
        return select_random(candidates, L, seed), None
    if strategy.name == "reservoir":
        return select_reservoir(candidates, L, seed), None
    if strategy.name == "prototype":
        return select_prototype(candidates, L, model), None
    if strategy.name == "uncertainty":
        cfg = WaveformPerturbConfig(strategy.family, strategy.K, seed, **strategy.perturbation)
        scores = score_uncertainty_waveform(candidates, model, cfg, frontend)
    else:
        cfg = EmbeddingPerturbConfig(strategy.lam, strategy.K, seed, strategy.per_dimension_std)
        scores = score_uncertainty_embedding(candidates, model, cfg)
    chosen = select_by_uncertainty(candidates, scores, L)
    by_id = {c.clip_id: s for c, s in zip(candidates, scores)}
    return chosen, np.array([by_id[c.clip_id] for c in chosen])


class ReplayBuffer:
    def __init__(self, capacity: int, strategy: Strategy):
        if capacity < 0:
            raise ConfigurationError("capacity must be >= 0")
        self.capacity = capacity
        self.strategy = strategy
        self.entries: list[LabeledClip] = []
        self.scores: np.ndarray | None = None
        self.peak = 0

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[int]:
        return [c.clip_id for c in self.entries]

    def replace(self, selection: Sequence[LabeledClip], scores=None) -> None:
        ids = [c.clip_id for c in selection]
        if len(ids) != len(set(ids)):
            raise ContractError("selection contains duplicate clip ids")
        if len(ids) > self.capacity:
            raise ContractError(f"selection of {len(ids)} exceeds capacity {self.capacity}")
        self.entries = list(selection)
        self.scores = None if scores is None else np.asarray(scores)
        self.peak = max(self.peak, len(self.entries))

    def export_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["clip_id", "class", "u"])
            for i, c in enumerate(self.entries):
                u = "" if self.scores is None else repr(float(self.scores[i]))
                w.writerow([c.clip_id, c.label, u])


def union(selection: Sequence[LabeledClip], new_data: Sequence[LabeledClip]) -> list[LabeledClip]:
    seen = set()
    out = []
    for c in (*selection, *new_data):
        if c.clip_id not in seen:
            seen.add(c.clip_id)
            out.append(c)
    return out


def update_buffer(buffer: ReplayBuffer, previous: Sequence[LabeledClip], new_data: Sequence[LabeledClip],
                  model=None, seed: int = 0, frontend: Frontend | None = None) -> list[LabeledClip]:
    """Refill ``buffer`` from ``previous`` and return the next training set,
    the buffer selection joined with ``new_data``."""
    if buffer.strategy.needs_model and model is None and len(previous) > buffer.capacity > 0:
        raise ConfigurationError(f"strategy {buffer.strategy.name!r} needs a model")
    chosen, scores = select(buffer.strategy, previous, buffer.capacity, model, seed, frontend)
    buffer.replace(chosen, scores)
    return union(buffer.entries, new_data)
