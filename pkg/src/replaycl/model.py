"""Dense classifier with an explicit backbone / embedding / head split.

The backbone maps a pooled log-mel vector to the pre-classifier embedding;
the head is a single affine layer that grows as new classes arrive.
Forward-pass counters record how many rows went through each part so the
cost of the memory-update algorithms can be asserted exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, LabelError
from .numerics import AdamState, AffineLayer, ReLU, adam_step, as_matrix, cross_entropy_loss, softmax


@dataclass
class ClassifierConfig:
    input_dim: int = 64
    hidden_dims: tuple[int, ...] = (128, 128)
    embedding_dim: int = 64
    num_classes: int = 2
    seed: int = 0
    zero_head: bool = False

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        dims = (self.input_dim, *self.hidden_dims, self.embedding_dim)
        if min(dims) < 1 or self.num_classes < 1:
            raise DimensionError(f"all dimensions must be >= 1, got {dims} and {self.num_classes} classes")


def features_to_input(features) -> np.ndarray:
    """Temporal mean pooling of a ``(frames, mel_bins)`` log-mel matrix."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise DegenerateInputError(f"need a non-empty (frames, bins) matrix, got shape {f.shape}")
    return f.mean(axis=0)


class Classifier:
    def __init__(self, config: ClassifierConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dims = (config.input_dim, *config.hidden_dims, config.embedding_dim)
        self.backbone: list[AffineLayer] = [
            AffineLayer.init_he(a, b, rng) for a, b in zip(dims[:-1], dims[1:])
        ]
        self.activations = [ReLU() for _ in self.backbone]
        self.head = self._new_head_rows(config.num_classes, 0)
        self.backbone_count = 0
        self.head_count = 0

    def _new_head_rows(self, n_rows: int, offset: int) -> AffineLayer:
        d = self.config.embedding_dim
        if self.config.zero_head:
            return AffineLayer(np.zeros((n_rows, d)), np.zeros(n_rows))
        rng = np.random.default_rng([self.config.seed, 1, offset, n_rows])
        return AffineLayer.init_he(d, n_rows, rng)

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def params(self) -> list[np.ndarray]:
        return [p for layer in (*self.backbone, self.head) for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in (*self.backbone, self.head) for g in layer.grads()]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward_backbone(self, x, cache: bool = False) -> np.ndarray:
        h = as_matrix(x)
        if h.shape[1] != self.config.input_dim:
            raise DimensionError(f"input of shape {h.shape} but the backbone expects {self.config.input_dim} columns")
        self.backbone_count += h.shape[0]
        for layer, act in zip(self.backbone, self.activations):
            h = act.forward(layer.forward(h, cache=cache), cache=cache)
        return h

    def forward_head(self, e, cache: bool = False) -> np.ndarray:
        e = as_matrix(e)
        if e.shape[1] != self.embedding_dim:
            raise DimensionError(f"embedding of shape {e.shape} but the head expects {self.embedding_dim} columns")
        self.head_count += e.shape[0]
        return self.head.forward(e, cache=cache)

    def logits(self, x) -> np.ndarray:
        return self.forward_head(self.forward_backbone(x))

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def head_proba(self, e) -> np.ndarray:
        return softmax(self.forward_head(e))

    def backward(self, grad_logits) -> None:
        g = self.head.backward(grad_logits)
        for layer, act in zip(reversed(self.backbone), reversed(self.activations)):
            g = layer.backward(act.backward(g))

    def loss_and_grads(self, x, labels) -> tuple[float, list[np.ndarray]]:
        logits = self.forward_head(self.forward_backbone(x, cache=True), cache=True)
        loss, grad = cross_entropy_loss(logits, labels)
        self.backward(grad)
        return loss, self.grads()

    def expand_head(self, new_num_classes: int) -> "Classifier":
        """Grow the head in place; rows of existing classes are kept bit-exactly."""
        old = self.num_classes
        if new_num_classes <= old:
            raise ContractError(f"head can only grow: {old} -> {new_num_classes}")
        extra = self._new_head_rows(new_num_classes - old, old)
        self.head = AffineLayer(np.vstack([self.head.weights, extra.weights]),
                                np.concatenate([self.head.bias, extra.bias]))
        self.config.num_classes = new_num_classes
        return self

    def reset_counters(self) -> None:
        self.backbone_count = 0
        self.head_count = 0


def forward_backbone(m: Classifier, x) -> np.ndarray:
    return m.forward_backbone(x)


def forward_head(m: Classifier, e) -> np.ndarray:
    return m.forward_head(e)


def predict_proba(m: Classifier, x) -> np.ndarray:
    return m.predict_proba(x)


def expand_head(m: Classifier, new_num_classes: int) -> Classifier:
    return m.expand_head(new_num_classes)


def _check_labels(m: Classifier, labels: np.ndarray) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= m.num_classes):
        raise LabelError(f"labels span [{labels.min()}, {labels.max()}] but the head has {m.num_classes} classes")


def train_epoch(m: Classifier, x, labels: Sequence[int], adam: AdamState,
                batch_size: int = 32, rng: np.random.Generator | None = None) -> float:
    """One shuffled pass of minibatch Adam; returns the sample-weighted mean loss."""
    x = as_matrix(x)
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(m, labels)
    n = x.shape[0]
    order = rng.permutation(n) if rng is not None else np.arange(n)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        loss, grads = m.loss_and_grads(x[idx], labels[idx])
        adam_step(m.params(), grads, adam)
        total += loss * idx.size
    return total / n if n else 0.0


def evaluate(m: Classifier, x, labels: Sequence[int]) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DegenerateInputError("cannot evaluate on an empty set")
    # np.argmax breaks ties toward the lowest index
    pred = np.argmax(m.logits(x), axis=1)
    return float(np.mean(pred == labels))


def gradient_check(m: Classifier, x, labels, eps: float = 1e-5, seed: int = 0) -> float:
    from .numerics import grad_check

    return grad_check(lambda: m.loss_and_grads(x, labels), m.params(), eps=eps, seed=seed)


# --- checkpoints -------------------------------------------------------------
#
# A checkpoint is an uncompressed ``.npz`` archive: ``config`` holds the
# ClassifierConfig as UTF-8 JSON bytes, and ``param_000``, ``param_001``, ...
# hold the parameter tensors (backbone W, b per layer, then head W, b) as
# float64 arrays with their shapes in the ``.npy`` headers.

def save_checkpoint(m: Classifier, path) -> None:
    cfg = asdict(m.config)
    cfg["hidden_dims"] = list(cfg["hidden_dims"])
    arrays = {f"param_{i:03d}": p for i, p in enumerate(m.params())}
    arrays["config"] = np.frombuffer(json.dumps(cfg, sort_keys=True).encode(), dtype=np.uint8)
    with open(Path(path), "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> Classifier:
    with np.load(Path(path)) as z:
        cfg = json.loads(z["config"].tobytes().decode())
        m = Classifier(ClassifierConfig(**cfg))
        params = m.params()
        for i, p in enumerate(params):
            stored = z[f"param_{i:03d}"]
            if stored.shape != p.shape:
                raise DimensionError(f"param_{i:03d}: stored shape {stored.shape}, expected {p.shape}")
            p[...] = stored
    return m
