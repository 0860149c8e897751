"""Single-head attention variants with analytic backward passes.

Seven logit formulations are supported; they differ only in how queries and
keys are (optionally) normalized and rescaled before the dot product::

    standard          (q k^T) / sqrt(d)
    quest             q  kbar^T
    qnorm             qbar k^T
    qknorm_hs         c * qbar kbar^T                     c: scalar
    qknorm_ds         (qbar * c_q)(kbar * c_k)^T          c_q, c_k: length-d vectors
    qknorm_full       same as ds, one pair of vectors per head
    elliptical_quest  ||q|| (qbar * m) kbar^T             m: fixed positive diagonal

All arrays may carry leading stack axes ``(..., n, d)``.  Learnable scales may
carry the same leading axes (padded with singleton axes so they broadcast
against the logits / query rows); their gradients come back in their own shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from questlab.numerics import (
    L2_EPS,
    row_entropy,
    row_softmax,
    row_softmax_backward,
    sum_to_shape,
)

KINDS = (
    "standard",
    "quest",
    "qnorm",
    "qknorm_hs",
    "qknorm_ds",
    "qknorm_full",
    "elliptical_quest",
)

_ALIASES = {
    "qknorm-hs": "qknorm_hs",
    "qknorm-ds": "qknorm_ds",
    "qknorm-full": "qknorm_full",
    "elliptical-quest": "elliptical_quest",
    "elliptical": "elliptical_quest",
}

_LEARNABLE = {
    "qknorm_hs": ("scale",),
    "qknorm_ds": ("scale_q", "scale_k"),
    "qknorm_full": ("scale_q", "scale_k"),
}


def canonical_kind(name: str) -> str:
    kind = _ALIASES.get(name.lower(), name.lower())
    if kind not in KINDS:
        raise ValueError(f"unknown attention variant {name!r}; choose from {KINDS}")
    return kind


@dataclass(frozen=True)
class AttentionVariant:
    """Tagged attention formulation plus the values of its scale parameters.

    ``scale`` is the head scalar of QKNorm-HS; ``scale_q``/``scale_k`` are the
    per-dimension vectors of QKNorm-DS/Full; ``metric`` is the externally
    supplied diagonal of Elliptical-QUEST.  Unused fields stay ``None``.
    """

    kind: str
    scale: Optional[np.ndarray] = None
    scale_q: Optional[np.ndarray] = None
    scale_k: Optional[np.ndarray] = None
    metric: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        for name in ("scale", "scale_q", "scale_k", "metric"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=np.float64))
        for name in _LEARNABLE.get(self.kind, ()):
            if getattr(self, name) is None:
                raise ValueError(f"{self.kind} requires {name!r}")
        if self.kind == "elliptical_quest":
            if self.metric is None:
                raise ValueError("elliptical_quest requires a metric diagonal")
            if np.any(self.metric <= 0):
                raise ValueError("metric diagonal entries must be positive")

    @classmethod
    def create(cls, kind: str, d_head: int, metric=None) -> "AttentionVariant":
        """Variant with default-initialized scales for a head of width ``d_head``."""
        kind = canonical_kind(kind)
        init = initial_scales(kind, d_head)
        if kind == "elliptical_quest":
            init["metric"] = np.ones(d_head) if metric is None else np.asarray(metric, float)
        return cls(kind, **init)

    @property
    def learnable(self) -> tuple[str, ...]:
        return _LEARNABLE.get(self.kind, ())

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.learnable}

    def with_params(self, **values) -> "AttentionVariant":
        unknown = set(values) - set(self.learnable)
        if unknown:
            raise ValueError(f"{self.kind} has no learnable {sorted(unknown)}")
        return replace(self, **values)


def initial_scales(kind: str, d_head: int) -> dict[str, np.ndarray]:
    """Default scale values; the effective logit multiplier starts at sqrt(d_head)."""
    kind = canonical_kind(kind)
    if kind == "qknorm_hs":
        return {"scale": np.asarray(np.sqrt(d_head))}
    if kind in ("qknorm_ds", "qknorm_full"):
        per_side = np.full(d_head, d_head**0.25)
        return {"scale_q": per_side, "scale_k": per_side.copy()}
    return {}


@dataclass
class AttentionDiagnostics:
    max_logit: np.ndarray | float
    row_entropy: np.ndarray
    query_norms: np.ndarray
    key_norms: np.ndarray


@dataclass
class AttentionOutput:
    z: np.ndarray
    attn: np.ndarray
    logits: np.ndarray
    diagnostics: AttentionDiagnostics
    kind: str = ""
    _saved: dict = field(default_factory=dict, repr=False)


@dataclass
class AttentionGrads:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scales: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ReverseAttention:
    r: np.ndarray


def _all_finite(a: np.ndarray) -> bool:
    # a finite sum proves every entry finite; only fall back to the full scan otherwise
    return bool(np.isfinite(np.sum(a)) or np.isfinite(a).all())


def _check_qkv(q, k, v):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ValueError("q, k, v must be at least 2-dimensional")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    for name, a in (("q", q), ("k", k), ("v", v)):
        if not _all_finite(a):
            raise ValueError(f"{name} contains non-finite values")
    return q, k, v


def _tmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``swapaxes(a) @ b``; a single contracted row becomes a broadcast outer product."""
    if a.shape[-2] == 1:
        return a[..., 0, :, None] * b[..., 0, None, :]
    return np.swapaxes(a, -1, -2) @ b


def _row_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", a, a))


# Every variant factors as  logits = coef * sq_i * (q' . k'_j) * sk_j  with
# q' = q * dim_q, k' = k * dim_k (optional per-dimension scales) and per-row
# scales sq, sk that encode the l2 normalizations.  Normalized rows are never
# materialized, which keeps the backward pass to a few small-matrix products.
_INV = "inv"  # s = 1 / max(r, eps)
_RATIO = "ratio"  # s = r / max(r, eps), i.e. ||q|| * qbar

# Inside attention the normalizer is clamped rather than shifted: for any row
# with r > eps the normalized direction is exactly scale-free, so rescaling a
# key cannot move the logits beyond rounding.  Zero rows still map to zero.


def _row_scale(mode, norms):
    if mode is None:
        return None
    if mode == _INV:
        return 1.0 / np.maximum(norms, L2_EPS)
    return norms / np.maximum(norms, L2_EPS)


def _row_scale_grad(mode, norms):
    live = norms > L2_EPS
    if mode == _INV:
        return np.where(live, -1.0 / np.where(live, norms, 1.0) ** 2, 0.0)
    return np.where(live, 0.0, 1.0 / L2_EPS)


def _layout(variant: AttentionVariant, d: int):
    """(coef, q row mode, k row mode, q dim scale, k dim scale) for a variant."""
    kind = variant.kind
    if kind == "standard":
        return 1.0 / np.sqrt(d), None, None, None, None
    if kind == "quest":
        return None, None, _INV, None, None
    if kind == "qnorm":
        return None, _INV, None, None, None
    if kind == "qknorm_hs":
        return variant.scale, _INV, _INV, None, None
    if kind in ("qknorm_ds", "qknorm_full"):
        return None, _INV, _INV, variant.scale_q, variant.scale_k
    return None, _RATIO, _INV, variant.metric, None


def attend(
    variant: AttentionVariant,
    q,
    k,
    v,
    dropout: float = 0.0,
    rng=None,
) -> AttentionOutput:
    """Attention output ``softmax(logits) @ v`` for the given variant."""
    q, k, v = _check_qkv(q, k, v)
    coef, q_mode, k_mode, dim_q, dim_k = _layout(variant, q.shape[-1])
    qnorms = _row_norms(q)
    knorms = _row_norms(k)
    qp = q if dim_q is None else q * dim_q
    kp = k if dim_k is None else k * dim_k
    sq = _row_scale(q_mode, qnorms)
    sk = _row_scale(k_mode, knorms)

    raw = qp @ np.swapaxes(kp, -1, -2)
    scaled = raw
    if sq is not None:
        scaled = scaled * sq[..., :, None]
    if sk is not None:
        scaled = scaled * sk[..., None, :]
    logits = scaled if coef is None else coef * scaled
    attn = row_softmax(logits)
    mask = None
    if dropout > 0.0:
        if rng is None:
            raise ValueError("attention dropout needs an rng")
        mask = (rng.uniform(size=attn.shape) >= dropout) / (1.0 - dropout)
    z = (attn if mask is None else attn * mask) @ v

    diag = AttentionDiagnostics(
        max_logit=logits.max(axis=(-2, -1)),
        row_entropy=row_entropy(attn),
        query_norms=qnorms,
        key_norms=knorms,
    )
    saved = dict(qp=qp, kp=kp, sq=sq, sk=sk, raw=raw, scaled=scaled, coef=coef, dropmask=mask)
    return AttentionOutput(z=z, attn=attn, logits=logits, diagnostics=diag, kind=variant.kind, _saved=saved)


def attend_backward(variant: AttentionVariant, q, k, v, cache: AttentionOutput, upstream_dz) -> AttentionGrads:
    """Gradients of a loss w.r.t. q, k, v and the variant's learnable scales."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dz = np.asarray(upstream_dz, dtype=np.float64)
    kind = variant.kind
    if cache.kind != kind:
        raise ValueError(f"cache was produced by {cache.kind!r}, not {kind!r}")
    if cache.attn.shape[-2:] != (q.shape[-2], k.shape[-2]) or cache.z.shape != dz.shape:
        raise ValueError("cache does not match the given q/k/v/upstream shapes")
    if cache.z.shape[-1] != v.shape[-1]:
        raise ValueError("cache does not match the value width")

    s = cache._saved
    attn = cache.attn
    dmask = s["dropmask"]
    mixed = attn if dmask is None else attn * dmask
    dv = _tmm(mixed, dz)
    dattn = dz @ np.swapaxes(v, -1, -2)
    if dmask is not None:
        dattn = dattn * dmask
    dlogits = row_softmax_backward(attn, dattn)

    coef, q_mode, k_mode, dim_q, dim_k = _layout(variant, q.shape[-1])
    scales: dict[str, np.ndarray] = {}
    if coef is None:
        dscaled = dlogits
    else:
        if kind == "qknorm_hs":
            scales["scale"] = sum_to_shape(dlogits * s["scaled"], np.shape(variant.scale))
        dscaled = coef * dlogits

    sq, sk, raw = s["sq"], s["sk"], s["raw"]
    draw = dscaled
    if sq is not None:
        draw = draw * sq[..., :, None]
    if sk is not None:
        draw = draw * sk[..., None, :]
    dqp = draw @ s["kp"]
    dkp = _tmm(draw, s["qp"])

    dq = dqp if dim_q is None else dqp * dim_q
    dk = dkp if dim_k is None else dkp * dim_k
    if kind in ("qknorm_ds", "qknorm_full"):
        scales["scale_q"] = sum_to_shape(dqp * q, variant.scale_q.shape)
        scales["scale_k"] = sum_to_shape(dkp * k, variant.scale_k.shape)

    qnorms = cache.diagnostics.query_norms
    knorms = cache.diagnostics.key_norms
    if q_mode is not None:
        t = dscaled * raw
        if sk is not None:
            t = t * sk[..., None, :]
        dnorm = t.sum(axis=-1) * _row_scale_grad(q_mode, qnorms)
        dq = dq + (dnorm / np.where(qnorms > 0, qnorms, 1.0))[..., None] * q
    if k_mode is not None:
        t = dscaled * raw
        if sq is not None:
            t = t * sq[..., :, None]
        dnorm = t.sum(axis=-2) * _row_scale_grad(k_mode, knorms)
        dk = dk + (dnorm / np.where(knorms > 0, knorms, 1.0))[..., None] * k

    return AttentionGrads(q=dq, k=dk, v=dv, scales=scales)


def reverse_attention(attn, delta, w_o, v, d_h: int) -> ReverseAttention:
    """Reverse-attention matrix for standard attention with output ``A V W_o``.

    ``delta`` is the upstream gradient at the out-projection output (N x D) and
    ``w_o`` maps head features to model features (D_H x D).
    """
    attn = np.asarray(attn, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = attn.shape[-1]
    if attn.shape[-2] != n:
        raise ValueError(f"attention must be square, got {attn.shape}")
    if delta.shape[-2] != n or v.shape[-2] != n:
        raise ValueError("delta and v must have one row per token")
    if w_o.shape[-1] != delta.shape[-1] or w_o.shape[-2] != v.shape[-1]:
        raise ValueError(f"w_o shape {w_o.shape} inconsistent with delta {delta.shape} and v {v.shape}")
    e_tilde = delta @ np.swapaxes(w_o, -1, -2) @ np.swapaxes(v, -1, -2)
    return ReverseAttention(r=row_softmax_backward(attn, e_tilde) * np.sqrt(1.0 / d_h))


def qk_vjp(r: ReverseAttention, q, k) -> tuple[np.ndarray, np.ndarray]:
    """Query and key VJPs as linear combinations of keys and queries."""
    rm = np.asarray(r.r if isinstance(r, ReverseAttention) else r, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n = rm.shape[-1]
    if rm.shape[-2] != n or q.shape[-2] != n or k.shape[-2] != n or q.shape[-1] != k.shape[-1]:
        raise ValueError(f"shape mismatch: R {rm.shape}, q {q.shape}, k {k.shape}")
    return rm @ k, np.swapaxes(rm, -1, -2) @ q


__all__ = [
    "KINDS",
    "L2_EPS",
    "AttentionDiagnostics",
    "AttentionGrads",
    "AttentionOutput",
    "AttentionVariant",
    "ReverseAttention",
    "attend",
    "attend_backward",
    "canonical_kind",
    "initial_scales",
    "qk_vjp",
    "reverse_attention",
]
