"""Dense float64 building blocks with hand-written backward passes.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; rows are
batch items.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, LabelError, NumericError


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


class AffineLayer:
    """``y = x W^T + b`` with the input cached for the backward pass."""

    def __init__(self, weights, bias=None):
        self.weights = np.array(weights, dtype=np.float64, ndmin=2)
        out_dim = self.weights.shape[0]
        if bias is None:
            bias = np.zeros(out_dim)
        self.bias = np.array(bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != out_dim:
            raise DimensionError(
                f"bias of length {self.bias.shape[0]} does not match weights {self.weights.shape}"
            )
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache: np.ndarray | None = None

    @classmethod
    def init_he(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "AffineLayer":
        w = rng.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim)
        return cls(w, np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def has_cache(self) -> bool:
        return self._cache is not None

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weights, self.grad_bias]

    def forward(self, x, cache: bool = True) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.in_dim:
            raise DimensionError(
                f"input of shape {x.shape} incompatible with weights of shape {self.weights.shape}"
            )
        if cache:
            self._cache = x
        return x @ self.weights.T + self.bias

    def backward(self, grad_out) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called without a preceding forward pass")
        grad_out = as_matrix(grad_out)
        x = self._cache
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise DimensionError(
                f"upstream gradient of shape {grad_out.shape} does not match output "
                f"shape {(x.shape[0], self.out_dim)}"
            )
        self.grad_weights = grad_out.T @ x
        self.grad_bias = grad_out.sum(axis=0)
        self._cache = None
        return grad_out @ self.weights


def affine_forward(layer: AffineLayer, x) -> np.ndarray:
    return layer.forward(x)


class ReLU:
    def __init__(self):
        self._mask: np.ndarray | None = None

    def forward(self, x, cache: bool = True) -> np.ndarray:
        x = as_matrix(x)
        if cache:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad_out) -> np.ndarray:
        if self._mask is None:
            raise RuntimeError("backward called without a preceding forward pass")
        grad = np.where(self._mask, as_matrix(grad_out), 0.0)
        self._mask = None
        return grad


def relu(x) -> np.ndarray:
    return np.maximum(as_matrix(x), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    return np.where(as_matrix(x) > 0, as_matrix(grad_out), 0.0)


def softmax(logits) -> np.ndarray:
    z = as_matrix(logits)
    if z.shape[1] < 1:
        raise DimensionError("softmax needs at least one column")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = as_matrix(logits)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    z = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = z.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {n} rows")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels[i])} at index {i} out of range for {c} classes")
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


class AdamState:
    """Per-parameter moment accumulators for Adam."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(
            f"{len(params)} params, {len(grads)} grads, {len(state.m)} accumulators"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(
                f"param {p.shape}, grad {g.shape}, accumulator {m.shape} disagree"
            )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(loss_and_grads: Callable[[], tuple[float, Sequence[np.ndarray]]],
               params: Sequence[np.ndarray], eps: float = 1e-5,
               max_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads`` must evaluate the loss at the current (in-place) values
    of ``params`` and return it with gradients aligned to ``params``. At most
    ``max_coords`` coordinates per tensor are checked, chosen uniformly.
    """
    rng = np.random.default_rng(seed)
    loss, grads = loss_and_grads()
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    analytic = [np.array(g, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = loss_and_grads()
            flat[i] = orig - eps
            lm, _ = loss_and_grads()
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError("non-finite loss during finite differencing")
            numeric = (lp - lm) / (2.0 * eps)
            worst = max(worst, relative_error(float(g.reshape(-1)[i]), numeric))
    return worst
