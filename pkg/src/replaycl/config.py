"""Experiment configuration: a TOML file parsed strictly into dataclasses.

Unknown keys and wrongly typed values are rejected with the line they
appear on. See ``configs/synthetic.toml`` for the full schema with
defaults.
"""
from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .audio import Frontend
from .errors import ConfigurationError
from .replay import PERTURBATION_FAMILIES, STRATEGIES, Strategy, WaveformPerturbConfig

PRESETS = {
    # buffer capacity, classes per task
    "synthetic": (50, 2),
    "dcase": (500, 2),
    "esc50": (100, 10),
}


class ConfigError(ConfigurationError):
    def __init__(self, message: str, path=None, line: int | None = None, key: str | None = None):
        self.key = key
        self.line = line
        where = str(path) if path else "<config>"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    clips_per_class: int = 40
    seconds: float = 1.0
    snr_db: float = -5.0
    tones_per_class: int = 3
    seed: int = 0
    root: str = ""
    csv: str = ""
    eval_fold: int = 1
    cache_dir: str = ""


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    frame: int = 1024
    hop: int = 320
    mel_bins: int = 64
    fmin: float = 0.0
    fmax: float = 0.0  # 0 means sample_rate / 2

    def build(self) -> Frontend:
        return Frontend(self.sample_rate, self.frame, self.hop, self.mel_bins,
                        self.fmin, self.fmax or None)


@dataclass
class ModelConfig:
    hidden_dims: list[int] = field(default_factory=lambda: [128, 128])
    embedding_dim: int = 64


@dataclass
class StreamConfig:
    tasks: int = 5
    classes_per_task: int = 0  # 0 means take it from the preset


@dataclass
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class BufferConfig:
    capacity: int = -1  # -1 means take it from the preset


@dataclass
class MethodConfig:
    name: str = "random"
    label: str = ""
    K: int = 4
    # ``lambda`` in the file
    lam: float = 1.0
    family: str = "noise"
    per_dimension_std: bool = False
    shift_range: list[float] = field(default_factory=lambda: [-0.25, 0.25])
    semitone_range: list[float] = field(default_factory=lambda: [-2.0, 2.0])
    alpha_range: list[float] = field(default_factory=lambda: [0.0, 2.0])
    snr_db_range: list[float] = field(default_factory=lambda: [10.0, 30.0])

    def strategy(self) -> Strategy:
        pert = {k: tuple(getattr(self, k)) for k in ("shift_range", "semitone_range", "alpha_range", "snr_db_range")}
        return Strategy(self.name, self.K, self.lam, self.family, self.per_dimension_std, pert)

    def waveform_config(self, seed: int) -> WaveformPerturbConfig:
        return WaveformPerturbConfig(self.family, self.K, seed, **self.strategy().perturbation)

    @property
    def display(self) -> str:
        return self.label or self.strategy().label


DEFAULT_METHODS = [
    MethodConfig("finetune"),
    MethodConfig("random"),
    MethodConfig("reservoir"),
    MethodConfig("prototype"),
    MethodConfig("uncertainty", family="shift"),
    MethodConfig("uncertainty", family="noise"),
    MethodConfig("uncertainty++"),
]


@dataclass
class ExperimentConfig:
    preset: str = "synthetic"
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "results"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    methods: list[MethodConfig] = field(default_factory=lambda: [MethodConfig(**vars(m)) for m in DEFAULT_METHODS])
    source: str = ""

    @property
    def capacity(self) -> int:
        return self.buffer.capacity if self.buffer.capacity >= 0 else PRESETS[self.preset][0]

    @property
    def classes_per_task(self) -> int:
        return self.stream.classes_per_task or PRESETS[self.preset][1]

    def to_dict(self) -> dict:
        def conv(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {f.name: conv(getattr(obj, f.name)) for f in fields(obj)
                        if f.name not in ("source", "output_dir")}
            if isinstance(obj, list):
                return [conv(v) for v in obj]
            return obj

        d = conv(self)
        d["capacity_resolved"] = self.capacity
        d["classes_per_task_resolved"] = self.classes_per_task
        return d


SECTIONS = {
    "dataset": DatasetConfig,
    "frontend": FrontendConfig,
    "model": ModelConfig,
    "stream": StreamConfig,
    "training": TrainingConfig,
    "buffer": BufferConfig,
}
TOP_LEVEL = {"preset", "seeds", "output_dir", "methods", *SECTIONS}


def _line_of(text: str, key: str, section: str | None = None) -> int | None:
    """Best-effort line number of ``key = ...`` (inside ``[section]`` if given)."""
    lines = text.splitlines()
    in_section = section is None
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(lines, start=1):
        head = re.match(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?", line)
        if head:
            in_section = section is None or head.group(1) == section
            continue
        if in_section and pat.match(line):
            return i
    return None


def _check_type(value, default):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    return True


def _fill(cls, table: dict, text: str, path, section: str):
    obj = cls()
    names = {f.name for f in fields(cls)}
    for key, value in table.items():
        attr = "lam" if key == "lambda" and cls is MethodConfig else key
        if attr not in names or (cls is MethodConfig and key == "lam"):
            raise ConfigError(f"unknown key {key!r} in [{section}]", path, _line_of(text, key, section), key)
        default = getattr(obj, attr)
        if not _check_type(value, default):
            raise ConfigError(f"key {key!r} in [{section}] has the wrong type "
                              f"(expected {type(default).__name__}, got {type(value).__name__})",
                              path, _line_of(text, key, section), key)
        if isinstance(default, float):
            value = float(value)
        setattr(obj, attr, value)
    return obj


def parse_config(text: str, path=None) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}", path) from exc

    cfg = ExperimentConfig(source=str(path or ""))
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown top-level key {key!r}", path, _line_of(text, key) or _line_of(text, f"[{key}]"), key)
    if "preset" in raw:
        if raw["preset"] not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}", path, _line_of(text, "preset"), "preset")
        cfg.preset = raw["preset"]
    if "seeds" in raw:
        seeds = raw["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers", path, _line_of(text, "seeds"), "seeds")
        cfg.seeds = seeds
    if "output_dir" in raw:
        cfg.output_dir = str(raw["output_dir"])
    for section, cls in SECTIONS.items():
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"[{section}] must be a table", path, _line_of(text, section), section)
            setattr(cfg, section, _fill(cls, raw[section], text, path, section))
    if "methods" in raw:
        if not isinstance(raw["methods"], list) or not raw["methods"]:
            raise ConfigError("methods must be a non-empty array of tables ([[methods]])", path,
                              _line_of(text, "methods"), "methods")
        cfg.methods = [_fill(MethodConfig, m, text, path, "methods") for m in raw["methods"]]
    validate(cfg, text, path)
    return cfg


def validate(cfg: ExperimentConfig, text: str = "", path=None) -> None:
    def fail(msg, key, section=None):
        raise ConfigError(msg, path, _line_of(text, key, section) if text else None, key)

    d = cfg.dataset
    if d.kind not in ("synthetic", "manifest"):
        fail("dataset.kind must be 'synthetic' or 'manifest'", "kind", "dataset")
    if d.kind == "manifest":
        if not d.csv:
            fail("dataset.csv is required for manifest datasets", "csv", "dataset")
        if not Path(d.csv).exists():
            fail(f"dataset.csv: no such file {d.csv!r}", "csv", "dataset")
        if d.root and not Path(d.root).is_dir():
            fail(f"dataset.root: no such directory {d.root!r}", "root", "dataset")
    else:
        if d.num_classes < 1 or d.clips_per_class < 2:
            fail("synthetic datasets need >= 1 class and >= 2 clips per class", "num_classes", "dataset")
    f = cfg.frontend
    if min(f.sample_rate, f.frame, f.hop, f.mel_bins) < 1:
        fail("frontend values must be positive", "frame", "frontend")
    if min(cfg.model.hidden_dims + [cfg.model.embedding_dim], default=1) < 1:
        fail("model dimensions must be >= 1", "hidden_dims", "model")
    if cfg.stream.tasks < 1:
        fail("stream.tasks must be >= 1", "tasks", "stream")
    if cfg.stream.classes_per_task < 0:
        fail("stream.classes_per_task must be >= 0", "classes_per_task", "stream")
    t = cfg.training
    if t.epochs < 1 or t.batch_size < 1 or t.lr <= 0:
        fail("training needs epochs >= 1, batch_size >= 1, lr > 0", "epochs", "training")
    labels = set()
    for m in cfg.methods:
        if m.name not in STRATEGIES:
            fail(f"unknown method {m.name!r}; choose from {list(STRATEGIES)}", "name", "methods")
        if m.K < 1:
            fail("K must be >= 1", "K", "methods")
        if m.lam < 0:
            fail("lambda must be >= 0", "lambda", "methods")
        if m.family not in PERTURBATION_FAMILIES:
            fail(f"family must be one of {sorted(PERTURBATION_FAMILIES)}", "family", "methods")
        for rk in ("shift_range", "semitone_range", "alpha_range", "snr_db_range"):
            r = getattr(m, rk)
            if len(r) != 2 or r[0] > r[1]:
                fail(f"{rk} must be [low, high] with low <= high", rk, "methods")
        if m.name == "uncertainty":
            try:
                for k in range(len(PERTURBATION_FAMILIES[m.family])):
                    m.waveform_config(0).spec_for(0, k)
            except ValueError as exc:
                fail(str(exc), "name", "methods")
        if m.display in labels:
            fail(f"duplicate method label {m.display!r}; set 'label' to disambiguate", "label", "methods")
        labels.add(m.display)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file not found", path)
    return parse_config(path.read_text(encoding="utf-8"), path)


def default_config_path() -> Path:
    return Path(__file__).parent / "configs" / "synthetic.toml"
