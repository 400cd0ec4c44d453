"""Clip containers, manifest loading, feature caching and synthetic audio."""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import Frontend, read_wav, resample_linear
from .errors import ConfigurationError, FormatError


@dataclass
class LabeledClip:
    """One example: the model input vector plus, when available, its waveform."""

    clip_id: int
    label: int
    x: np.ndarray
    waveform: np.ndarray | None = None
    sample_rate: int | None = None
    name: str = ""


@dataclass
class Dataset:
    train: list[LabeledClip]
    eval: list[LabeledClip]
    class_names: list[str]
    frontend: Frontend = field(default_factory=Frontend)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def standardize(v: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance across mel bins (per vector, no dataset statistics)."""
    v = np.asarray(v, dtype=np.float64)
    s = v.std()
    return (v - v.mean()) / s if s > 0 else v - v.mean()


def featurize(samples: np.ndarray, frontend: Frontend) -> np.ndarray:
    return standardize(frontend.pooled(samples))


def stack_inputs(clips: Sequence[LabeledClip]) -> tuple[np.ndarray, np.ndarray]:
    if not clips:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return np.stack([c.x for c in clips]), np.array([c.label for c in clips], dtype=np.int64)


# --- manifests ---------------------------------------------------------------

REQUIRED_COLUMNS = ("filename", "target", "category", "fold")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_id: int
    class_name: str
    fold: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def folds(self) -> list[int]:
        return sorted({e.fold for e in self.entries})


def load_manifest_csv(root, csv_path, check_files: bool = True) -> DatasetManifest:
    """Read an ESC-50 style CSV (filename, target, category, fold).

    Targets are remapped to contiguous ids in ascending target order; audio
    paths are resolved relative to ``root``.
    """
    root = Path(root)
    csv_path = Path(csv_path)
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise FormatError(f"{csv_path}: missing required column {col!r}")
        rows = list(reader)
    if not rows:
        raise ConfigurationError(f"{csv_path}: manifest has no entries")

    seen: set[str] = set()
    names: dict[int, str] = {}
    for lineno, row in enumerate(rows, start=2):
        fn = row["filename"]
        if fn in seen:
            raise FormatError(f"{csv_path}:{lineno}: duplicate filename {fn!r}")
        seen.add(fn)
        try:
            target = int(row["target"])
            int(row["fold"])
        except ValueError as exc:
            raise FormatError(f"{csv_path}:{lineno}: non-integer target or fold") from exc
        names.setdefault(target, row["category"])

    remap = {t: i for i, t in enumerate(sorted(names))}
    entries = [
        ManifestEntry(r["filename"], remap[int(r["target"])], r["category"], int(r["fold"]))
        for r in rows
    ]
    if check_files:
        missing = [str(root / e.path) for e in entries if not (root / e.path).exists()]
        if missing:
            shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
            raise FileNotFoundError(f"{len(missing)} manifest file(s) not found: {shown}")
    return DatasetManifest(root, entries, [names[t] for t in sorted(names)])


def train_eval_split(manifest: DatasetManifest, eval_fold: int):
    if eval_fold not in manifest.folds:
        raise ConfigurationError(f"eval fold {eval_fold} not in manifest folds {manifest.folds}")
    ev = [e for e in manifest.entries if e.fold == eval_fold]
    tr = [e for e in manifest.entries if e.fold != eval_fold]
    if not tr:
        raise ConfigurationError(f"eval fold {eval_fold} leaves no training entries")
    return tr, ev


# --- feature cache -----------------------------------------------------------
#
# File layout (little-endian): b"RCLF", uint16 version (1), uint16 ndim,
# ndim x uint32 shape, then prod(shape) float64 values in row-major order.

CACHE_MAGIC = b"RCLF"
CACHE_VERSION = 1


def write_feature_file(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = CACHE_MAGIC + struct.pack("<HH", CACHE_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + arr.tobytes())
    tmp.replace(path)


def read_feature_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    version, ndim = struct.unpack_from("<HH", data, 4)
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    arr = np.frombuffer(data, dtype="<f8", offset=offset)
    if arr.size != int(np.prod(shape)):
        raise FormatError(f"{path}: payload has {arr.size} values, header says {shape}")
    return arr.reshape(shape).astype(np.float64)


def cached_log_mel(samples: np.ndarray, frontend: Frontend, cache_dir=None) -> np.ndarray:
    if cache_dir is None:
        return frontend(samples)
    digest = hashlib.sha256(np.ascontiguousarray(samples, dtype="<f8").tobytes())
    digest.update(frontend.key().encode())
    path = Path(cache_dir) / f"{digest.hexdigest()}.rclf"
    if path.exists():
        return read_feature_file(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feats = frontend(samples)
    write_feature_file(path, feats)
    return feats


def load_dataset(manifest: DatasetManifest, eval_fold: int, frontend: Frontend,
                 cache_dir=None) -> Dataset:
    """Read and featurize every clip of a manifest, resampling to the frontend rate."""
    tr, ev = train_eval_split(manifest, eval_fold)

    def make(entries, start):
        clips = []
        for i, e in enumerate(entries):
            w = read_wav(manifest.root / e.path)
            samples = resample_linear(w.samples, w.sample_rate, frontend.sample_rate)
            feats = cached_log_mel(samples, frontend, cache_dir)
            clips.append(LabeledClip(start + i, e.class_id, standardize(feats.mean(axis=0)),
                                     samples, frontend.sample_rate, e.path))
        return clips

    train = make(tr, 0)
    return Dataset(train, make(ev, len(train)), list(manifest.class_names), frontend)


# --- synthetic audio ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_classes: int = 10
    clips_per_class: int = 40
    seconds: float = 1.0
    sample_rate: int = 16000
    seed: int = 0
    tones_per_class: int = 3
    fmin: float = 200.0
    fmax: float = 6000.0
    snr_db: float = -5.0
    jitter: float = 0.05
    eval_fraction: float = 0.2
    grid_size: int | None = None
    signatures: list[tuple[tuple[float, ...], float]] | None = None

    def class_signatures(self) -> list[tuple[tuple[float, ...], float]]:
        """Per class: (tone frequencies, amplitude-modulation rate in Hz)."""
        if self.signatures is not None:
            sigs = [(tuple(float(f) for f in fr), float(am)) for fr, am in self.signatures]
        else:
            rng = np.random.default_rng([self.seed, 0])
            grid = np.geomspace(self.fmin, self.fmax, self.grid_size or max(self.num_classes, 8))
            sigs = []
            while len(sigs) < self.num_classes:
                tones = tuple(sorted(float(f) for f in rng.choice(grid, self.tones_per_class, replace=False)))
                am = float(rng.uniform(0.5, 8.0))
                if all(tones != s[0] for s in sigs):
                    sigs.append((tones, am))
        if len({s[0] for s in sigs}) != len(sigs):
            raise ConfigurationError("synthetic class signatures must be pairwise distinct")
        if len(sigs) != self.num_classes:
            raise ConfigurationError(f"{len(sigs)} signatures for {self.num_classes} classes")
        return sigs


def synth_clip(tones: Sequence[float], am_rate: float, spec: SyntheticSpec,
               rng: np.random.Generator) -> np.ndarray:
    n = int(round(spec.seconds * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    x = np.zeros(n)
    for f in tones:
        f = f * (1.0 + rng.uniform(-spec.jitter, spec.jitter))
        x += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    x *= 1.0 + 0.5 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    power = np.mean(x ** 2)
    x += rng.standard_normal(n) * np.sqrt(power / 10.0 ** (spec.snr_db / 10.0))
    peak = np.max(np.abs(x))
    return 0.9 * x / peak if peak > 0 else x


def generate_synthetic_waveforms(spec: SyntheticSpec):
    """Yield ``(class_id, clip_index, samples)`` deterministically."""
    for c, (tones, am) in enumerate(spec.class_signatures()):
        for j in range(spec.clips_per_class):
            rng = np.random.default_rng([spec.seed, 1, c, j])
            yield c, j, synth_clip(tones, am, spec, rng)


def generate_synthetic(spec: SyntheticSpec, frontend: Frontend | None = None) -> Dataset:
    frontend = frontend or Frontend(sample_rate=spec.sample_rate)
    if frontend.sample_rate != spec.sample_rate:
        raise ConfigurationError("frontend and synthetic sample rates differ")
    per_class: dict[int, list[tuple[int, np.ndarray]]] = {}
    for c, j, samples in generate_synthetic_waveforms(spec):
        per_class.setdefault(c, []).append((j, samples))

    split_rng = np.random.default_rng([spec.seed, 2])
    train, ev = [], []
    n_eval = max(1, int(round(spec.eval_fraction * spec.clips_per_class)))
    for c in sorted(per_class):
        order = split_rng.permutation(len(per_class[c]))
        for rank, k in enumerate(order):
            j, samples = per_class[c][k]
            (ev if rank < n_eval else train).append((c, j, samples))

    def make(items, start):
        items = sorted(items, key=lambda it: (it[0], it[1]))
        return [
            LabeledClip(start + i, c, featurize(s, frontend), s, spec.sample_rate, f"class{c:02d}_{j:03d}")
            for i, (c, j, s) in enumerate(items)
        ]

    tr = make(train, 0)
    names = [f"class{c:02d}" for c in range(spec.num_classes)]
    return Dataset(tr, make(ev, len(tr)), names, frontend)


def write_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write synthetic clips as WAV files plus a manifest CSV; returns the CSV path.

    Folds 1..5 are assigned round-robin per class.
    """
    from .audio import Waveform, write_wav

    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rows = []
    for c, j, samples in generate_synthetic_waveforms(spec):
        fn = f"class{c:02d}_{j:03d}.wav"
        write_wav(out / "audio" / fn, Waveform(samples, spec.sample_rate))
        rows.append((fn, c, f"class{c:02d}", j % 5 + 1))
    csv_path = out / "manifest.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(REQUIRED_COLUMNS)
        w.writerows(rows)
    return csv_path
