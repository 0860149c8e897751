"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class NonFiniteGradient(FloatingPointError):
    """Raised when a gradient contains NaN/Inf; the caller should abort the run."""


@dataclass
class AdamWState:
    lr: float | np.ndarray
    weight_decay: float | np.ndarray = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _per_run(value, like: np.ndarray):
    # scalars broadcast as-is; a length-R vector lines up with the leading run axis
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        return a
    return a.reshape(a.shape + (1,) * (like.ndim - a.ndim))


def adamw_step(
    state: AdamWState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    active: Optional[np.ndarray] = None,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``

    ``lr``/``weight_decay`` may be per-run vectors over the leading axis;
    ``active`` (bool, per run) freezes params and moments of inactive runs.
    The state is updated in place and also returned.
    """
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match parameter keys")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k!r}")
        live = g if active is None else g[active]
        if not np.all(np.isfinite(live)):
            raise NonFiniteGradient(f"non-finite gradient for {k!r}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    new_params = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        # frozen runs may carry inf/nan gradients; their results are discarded below
        with np.errstate(invalid="ignore", over="ignore"):
            m_new = b1 * m + (1.0 - b1) * g
            v_new = b2 * v + (1.0 - b2) * g * g
            update = (m_new / bc1) / (np.sqrt(v_new / bc2) + state.eps) + _per_run(state.weight_decay, p) * p
            p_new = p - _per_run(state.lr, p) * update
        if active is not None:
            keep = _per_run(active, p).astype(bool)
            p_new = np.where(keep, p_new, p)
            m_new = np.where(keep, m_new, m)
            v_new = np.where(keep, v_new, v)
        new_params[k] = p_new
        state.m[k] = m_new
        state.v[k] = v_new
    return new_params, state
