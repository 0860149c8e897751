"""Dense float64 primitives with hand-written backward passes.

Every array routine accepts leading "stack" axes and acts on the last one or
two axes, so the same code serves a single matrix and a batch of runs.
"""

from __future__ import annotations

import hashlib
import zlib
from typing import Callable

import numpy as np
from scipy.special import erf

L2_EPS = 1e-12
LN_EPS = 1e-5

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim < 2:
        raise ValueError(f"{name} must have at least 2 dimensions, got shape {m.shape}")
    return m


def check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")


def sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of the operand."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def row_softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("row_softmax got NaN logits")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax_backward(probs, upstream) -> np.ndarray:
    """Vector-Jacobian product of the row softmax: p * (g - <p, g>)."""
    p = np.asarray(probs, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: probs {p.shape} vs upstream {g.shape}")
    return p * (g - np.sum(p * g, axis=-1, keepdims=True))


def row_entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=-1)


def l2_normalize_rows(m, epsilon: float = L2_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Return ``m / (||m|| + epsilon)`` row-wise together with the raw norms."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.sum(m * m, axis=-1))
    return m / (norms[..., None] + epsilon), norms


def l2_normalize_rows_backward(m, norms, upstream, epsilon: float = L2_EPS) -> np.ndarray:
    # d(m/(r+eps)) = dm/(r+eps) - m (m.dm) / (r (r+eps)^2); the radial part vanishes for r -> 0
    m = np.asarray(m, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    r = norms[..., None]
    denom = r + epsilon
    safe_r = np.where(r > 0, r, 1.0)
    radial = np.sum(m * g, axis=-1, keepdims=True) / (safe_r * denom * denom)
    return g / denom - m * radial


def layer_norm(x, gain, bias, epsilon: float = LN_EPS) -> tuple[np.ndarray, tuple]:
    """Row-wise standardization followed by ``gain * . + bias``.

    Returns the output and a cache for :func:`layer_norm_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError("gain/bias length must equal the number of columns")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + epsilon)
    xhat = xc * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain, bias.shape)


def layer_norm_backward(cache: tuple, upstream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. (x, gain, bias); gain/bias grads are reduced to their own shapes."""
    xhat, inv_std, gain, bias_shape = cache
    g = np.asarray(upstream, dtype=np.float64)
    dgain = sum_to_shape(g * xhat, gain.shape)
    dbias = sum_to_shape(g, bias_shape)
    gx = g * gain
    dx = inv_std * (
        gx - gx.mean(axis=-1, keepdims=True) - xhat * np.mean(gx * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT_2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT_2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def cross_entropy(logits, label) -> tuple[float | np.ndarray, np.ndarray]:
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    ``logits`` may be a single vector with an int label, or a stack ``(..., C)``
    with an integer label array of shape ``(...)``; the loss is then per row.
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(label)
    n_classes = z.shape[-1]
    if labels.shape != z.shape[:-1]:
        raise ValueError(f"label shape {labels.shape} does not match logits {z.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    picked = np.take_along_axis(log_probs, labels[..., None].astype(np.intp), axis=-1)[..., 0]
    grad = np.exp(log_probs)
    np.put_along_axis(
        grad,
        labels[..., None].astype(np.intp),
        np.take_along_axis(grad, labels[..., None].astype(np.intp), axis=-1) - 1.0,
        axis=-1,
    )
    loss = -picked
    if loss.ndim == 0:
        loss = float(loss)
    return loss, grad


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, b) -> float:
    """Max-norm relative error, guarded against all-zero references."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer split labels must be non-negative")
        return int(label)
    # strings live above 2**32 so they never collide with small integer labels
    return (1 << 32) | zlib.crc32(str(label).encode())


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from an arbitrary tuple of printable parts."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Counter-based (Philox) generator that can be split into labelled children.

    Children are keyed by the label path, so ``rng.split("data")`` always
    yields the same stream no matter how many draws the parent has made.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, label) -> "Rng":
        return Rng(self.seed, self.path + (_label_key(label),))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
