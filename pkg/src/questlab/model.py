"""One-layer, one-head Transformer classifier with an exact backward pass.

Forward pass (default ``wiring="printed"``), per sequence::

    X  = [cls; x] + P
    Y  = LayerNorm1(X)
    Q, K, V = X Wq, X Wk, X Wv
    Y  = Y + Attention(Q, K, V) Wo
    Y  = X + LayerNorm2(Y)
    Y  = X + MLP(Y)
    logits = Y_cls Wc + bc

``wiring="prenorm"`` switches to the conventional pre-norm block
(Q/K/V from LayerNorm1(X), running residuals).

Weights are stored as (in, out) matrices and applied as ``X @ W``.  Only the
CLS row reaches the classifier and every block after attention is row-wise,
so by default only the CLS query is attended and only the CLS row is pushed
through LayerNorm2/MLP.  ``full_attention=True`` computes every query row
(needed for whole-matrix telemetry such as the max logit); the loss and
gradients are identical either way.

The ``*_stack`` functions work on a stack of independent runs: every
parameter carries a leading run axis ``R`` and inputs are ``(R, B, N, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from questlab.attention import AttentionOutput, AttentionVariant, attend, attend_backward, canonical_kind
from questlab.numerics import (
    Rng,
    cross_entropy,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
)

Params = dict[str, np.ndarray]

_SCALE_KEYS = {"scale": "attn_scale", "scale_q": "attn_scale_q", "scale_k": "attn_scale_k"}


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 20
    d_model: int = 20
    d_mlp: int = 20
    n_classes: int = 10
    init_std: float = 0.02
    wiring: str = "printed"
    attn_dropout: float = 0.0
    out_dropout: float = 0.0

    def __post_init__(self):
        if self.wiring not in ("printed", "prenorm"):
            raise ValueError(f"wiring must be 'printed' or 'prenorm', got {self.wiring!r}")


def param_shapes(cfg: ModelConfig, kind: str) -> dict[str, tuple[int, ...]]:
    d, h, c, t = cfg.d_model, cfg.d_mlp, cfg.n_classes, cfg.seq_len + 1
    shapes = {
        "w_q": (d, d),
        "w_k": (d, d),
        "w_v": (d, d),
        "w_o": (d, d),
        "ln1_g": (d,),
        "ln1_b": (d,),
        "ln2_g": (d,),
        "ln2_b": (d,),
        "mlp_w1": (d, h),
        "mlp_b1": (h,),
        "mlp_w2": (h, d),
        "mlp_b2": (d,),
        "pos_emb": (t, d),
        "cls_token": (1, d),
        "cls_w": (d, c),
        "cls_b": (c,),
    }
    kind = canonical_kind(kind)
    if kind == "qknorm_hs":
        shapes["attn_scale"] = ()
    elif kind in ("qknorm_ds", "qknorm_full"):
        shapes["attn_scale_q"] = (d,)
        shapes["attn_scale_k"] = (d,)
    return shapes


def init_params(variant: AttentionVariant, rng: Rng, cfg: ModelConfig = ModelConfig()) -> Params:
    """Small-normal weights, zero biases, unit layer-norm gains, zero CLS token."""
    shapes = param_shapes(cfg, variant.kind)
    params: Params = {}
    for name in ("w_q", "w_k", "w_v", "w_o", "mlp_w1", "mlp_w2", "pos_emb", "cls_w"):
        params[name] = rng.normal(0.0, cfg.init_std, size=shapes[name])
    for name in ("ln1_b", "ln2_b", "mlp_b1", "mlp_b2", "cls_b", "cls_token"):
        params[name] = np.zeros(shapes[name])
    params["ln1_g"] = np.ones(shapes["ln1_g"])
    params["ln2_g"] = np.ones(shapes["ln2_g"])
    for attr, key in _SCALE_KEYS.items():
        if key in shapes:
            params[key] = np.array(getattr(variant, attr), dtype=np.float64).reshape(shapes[key])
    return {k: params[k] for k in shapes}


def stack_params(runs: list[Params]) -> Params:
    return {k: np.stack([p[k] for p in runs]) for k in runs[0]}


def unstack_params(params: Params, i: int) -> Params:
    return {k: v[i].copy() for k, v in params.items()}


@dataclass
class ForwardCache:
    kind: str
    cfg: ModelConfig
    full_attention: bool
    shape: tuple[int, ...]
    variant: AttentionVariant
    x_seq: np.ndarray
    qkv_src: np.ndarray
    q_src: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: AttentionOutput
    z_cls: np.ndarray
    out_mask: Optional[np.ndarray]
    ln1: tuple
    ln2: tuple
    y1: np.ndarray
    y3: np.ndarray
    m1: np.ndarray
    g: np.ndarray
    y4: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def diagnostics(self):
        return self.attn.diagnostics


def _mm(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-run ``a @ w`` for a (R, ..., I) and w (R, I, O), as one GEMM per run."""
    r, i = a.shape[0], a.shape[-1]
    return (a.reshape(r, -1, i) @ w).reshape(a.shape[:-1] + (w.shape[-1],))


def _mmt(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _mm(a, np.swapaxes(w, 1, 2))


def _gain(a: np.ndarray) -> np.ndarray:
    return a[:, None, None, :]


def _bind_variant(kind: str, params: Params, metric) -> AttentionVariant:
    values = {}
    for attr, key in _SCALE_KEYS.items():
        if key in params:
            p = params[key]
            values[attr] = p.reshape(p.shape[:1] + (1, 1) + p.shape[1:]) if p.ndim == 2 else p[:, None, None, None]
    if kind == "elliptical_quest":
        values["metric"] = np.ones(params["w_q"].shape[-1]) if metric is None else metric
    return AttentionVariant(kind, **values)


def _dropout_mask(p: float, shape, rng: Optional[Rng]):
    if p <= 0.0:
        return None
    if rng is None:
        raise ValueError("dropout > 0 requires an rng")
    return (rng.uniform(size=shape) >= p) / (1.0 - p)


def forward_stack(
    params: Params,
    x: np.ndarray,
    kind: str,
    cfg: ModelConfig = ModelConfig(),
    metric=None,
    full_attention: bool = False,
    rng: Optional[Rng] = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Class logits ``(R, B, C)`` for inputs ``(R, B, N, D)``."""
    kind = canonical_kind(kind)
    x = np.asarray(x, dtype=np.float64)
    r, b = x.shape[:2]
    n_runs = params["w_q"].shape[0]
    if x.ndim != 4 or r != n_runs or x.shape[2] != cfg.seq_len or x.shape[3] != cfg.d_model:
        raise ValueError(f"expected x of shape ({n_runs}, B, {cfg.seq_len}, {cfg.d_model}), got {x.shape}")
    d = cfg.d_model

    cls = np.broadcast_to(params["cls_token"][:, None], (r, b, 1, d))
    x_seq = np.concatenate([cls, x], axis=2) + params["pos_emb"][:, None]
    x0 = x_seq[:, :, :1]

    if cfg.wiring == "printed":
        y1, ln1 = layer_norm(x0, _gain(params["ln1_g"]), _gain(params["ln1_b"]))
        src = x_seq
    else:
        src, ln1 = layer_norm(x_seq, _gain(params["ln1_g"]), _gain(params["ln1_b"]))
        y1 = x0
    q_src = src if full_attention else src[:, :, :1]
    q = _mm(q_src, params["w_q"])
    k = _mm(src, params["w_k"])
    v = _mm(src, params["w_v"])

    variant = _bind_variant(kind, params, metric)
    att_rng = rng.split("attn_dropout") if (rng is not None and cfg.attn_dropout > 0) else None
    att = attend(variant, q, k, v, dropout=cfg.attn_dropout, rng=att_rng)
    z_cls = att.z[:, :, :1]
    o = _mm(z_cls, params["w_o"])
    out_mask = _dropout_mask(cfg.out_dropout, o.shape, rng.split("out_dropout") if rng is not None else None)
    if out_mask is not None:
        o = o * out_mask

    y2 = y1 + o
    h, ln2 = layer_norm(y2, _gain(params["ln2_g"]), _gain(params["ln2_b"]))
    y3 = x0 + h if cfg.wiring == "printed" else h
    m1 = _mm(y3, params["mlp_w1"]) + params["mlp_b1"][:, None, None]
    g = gelu(m1)
    m2 = _mm(g, params["mlp_w2"]) + params["mlp_b2"][:, None, None]
    y4 = (x0 if cfg.wiring == "printed" else y2) + m2
    logits = y4[:, :, 0] @ params["cls_w"] + params["cls_b"][:, None]

    cache = ForwardCache(
        kind=kind, cfg=cfg, full_attention=full_attention, shape=x.shape, variant=variant,
        x_seq=x_seq, qkv_src=src, q_src=q_src, q=q, k=k, v=v, attn=att, z_cls=z_cls,
        out_mask=out_mask, ln1=ln1, ln2=ln2, y1=y1, y3=y3, m1=m1, g=g, y4=y4,
    )
    return logits, cache


def _wgrad(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum over batch and rows of a^T g, per run: (R,B,T,I),(R,B,T,O) -> (R,I,O)."""
    r = a.shape[0]
    return np.swapaxes(a.reshape(r, -1, a.shape[-1]), 1, 2) @ g.reshape(r, -1, g.shape[-1])


def backward_stack(params: Params, cache: ForwardCache, grad_logits: np.ndarray) -> Params:
    """Exact gradients of ``sum(grad_logits * logits)`` w.r.t. every parameter."""
    dlog = np.asarray(grad_logits, dtype=np.float64)
    r, b = cache.shape[:2]
    if dlog.shape != (r, b, cache.cfg.n_classes) or params["w_q"].shape[0] != r:
        raise ValueError(f"grad_logits shape {dlog.shape} does not match the cached forward pass")
    if set(params) != set(param_shapes(cache.cfg, cache.kind)):
        raise ValueError("params do not match the cached attention variant")
    printed = cache.cfg.wiring == "printed"
    grads: Params = {}

    y4c = cache.y4[:, :, 0]
    grads["cls_w"] = np.swapaxes(y4c, 1, 2) @ dlog
    grads["cls_b"] = dlog.sum(axis=1)
    dy4 = (dlog @ np.swapaxes(params["cls_w"], 1, 2))[:, :, None]

    dm2 = dy4
    grads["mlp_w2"] = _wgrad(cache.g, dm2)
    grads["mlp_b2"] = dm2.sum(axis=(1, 2))
    dm1 = _mmt(dm2, params["mlp_w2"]) * gelu_grad(cache.m1)
    grads["mlp_w1"] = _wgrad(cache.y3, dm1)
    grads["mlp_b1"] = dm1.sum(axis=(1, 2))
    dy3 = _mmt(dm1, params["mlp_w1"])

    if printed:
        dx0 = dy4 + dy3
        dy2, dg2, db2 = layer_norm_backward(cache.ln2, dy3)
    else:
        dy2, dg2, db2 = layer_norm_backward(cache.ln2, dy3)
        dy2 = dy2 + dy4
        dx0 = dy2
    grads["ln2_g"] = dg2.reshape(r, -1)
    grads["ln2_b"] = db2.reshape(r, -1)

    do = dy2
    if cache.out_mask is not None:
        do = do * cache.out_mask
    grads["w_o"] = _wgrad(cache.z_cls, do)
    dz_cls = _mmt(do, params["w_o"])
    dz = np.zeros_like(cache.attn.z)
    dz[:, :, :1] = dz_cls

    ag = attend_backward(cache.variant, cache.q, cache.k, cache.v, cache.attn, dz)
    for attr, g in ag.scales.items():
        key = _SCALE_KEYS[attr]
        grads[key] = g.reshape(params[key].shape)

    grads["w_q"] = _wgrad(cache.q_src, ag.q)
    grads["w_k"] = _wgrad(cache.qkv_src, ag.k)
    grads["w_v"] = _wgrad(cache.qkv_src, ag.v)
    dsrc = _mmt(ag.k, params["w_k"])
    dsrc += _mmt(ag.v, params["w_v"])
    dq_src = _mmt(ag.q, params["w_q"])
    if cache.full_attention:
        dsrc += dq_src
    else:
        dsrc[:, :, :1] += dq_src

    if printed:
        dx_seq = dsrc
        dx1, dg1, db1 = layer_norm_backward(cache.ln1, dy2)
        dx_seq[:, :, :1] += dx0 + dx1
    else:
        dx_seq, dg1, db1 = layer_norm_backward(cache.ln1, dsrc)
        dx_seq[:, :, :1] += dx0
    grads["ln1_g"] = dg1.reshape(r, -1)
    grads["ln1_b"] = db1.reshape(r, -1)

    grads["pos_emb"] = dx_seq.sum(axis=1)
    grads["cls_token"] = dx_seq[:, :, :1].sum(axis=1)
    return {k: grads[k] for k in params}


def loss_and_grad_stack(
    params: Params,
    x: np.ndarray,
    labels: np.ndarray,
    kind: str,
    cfg: ModelConfig = ModelConfig(),
    metric=None,
    rng: Optional[Rng] = None,
) -> tuple[np.ndarray, Params, np.ndarray, ForwardCache]:
    """Per-run mean cross-entropy, averaged gradients, accuracy and the cache."""
    if x.shape[1] == 0:
        raise ValueError("empty batch")
    logits, cache = forward_stack(params, x, kind, cfg, metric=metric, rng=rng)
    loss, dlog = cross_entropy(logits, labels)
    b = x.shape[1]
    grads = backward_stack(params, cache, dlog / b)
    acc = np.mean(np.argmax(logits, axis=-1) == labels, axis=1)
    return loss.mean(axis=1), grads, acc, cache


# Single-run conveniences ---------------------------------------------------

def _lift(params: Params) -> Params:
    return {k: v[None] for k, v in params.items()}


def forward(
    params: Params,
    x,
    variant: AttentionVariant,
    cfg: ModelConfig = ModelConfig(),
    full_attention: bool = True,
) -> tuple[np.ndarray, ForwardCache]:
    """Class logits for one sequence ``(N, D)`` or a batch ``(B, N, D)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ValueError(f"x must be (N, D) or (B, N, D), got shape {x.shape}")
    xb = x[None, None] if single else x[None]
    logits, cache = forward_stack(_lift(params), xb, variant.kind, cfg, metric=variant.metric, full_attention=full_attention)
    cache.extra["single"] = single
    return (logits[0, 0] if single else logits[0]), cache


def backward(params: Params, cache: ForwardCache, grad_logits) -> Params:
    g = np.asarray(grad_logits, dtype=np.float64)
    g = g[None, None] if cache.extra.get("single") else g[None]
    grads = backward_stack(_lift(params), cache, g)
    return {k: v[0] for k, v in grads.items()}


def loss_and_grad(params: Params, batch, variant: AttentionVariant, cfg: ModelConfig = ModelConfig()):
    """Mean loss, mean gradients, accuracy and attention diagnostics over a batch.

    ``batch`` is a :class:`~questlab.toy_data.ToyDataset` or a sequence of samples.
    """
    from questlab.toy_data import ToyDataset

    ds = batch if isinstance(batch, ToyDataset) else ToyDataset.from_samples(batch)
    loss, grads, acc, cache = loss_and_grad_stack(_lift(params), ds.x[None], ds.labels[None], variant.kind, cfg, metric=variant.metric)
    return float(loss[0]), {k: v[0] for k, v in grads.items()}, float(acc[0]), cache.diagnostics


def params_to_json(params: Params) -> dict:
    """Lossless checkpoint payload: nested arrays of shortest-repr decimal strings."""

    def enc(a):
        return repr(float(a)) if a.ndim == 0 else [enc(r) for r in a]

    return {k: enc(np.asarray(v, dtype=np.float64)) for k, v in params.items()}


def params_from_json(d: dict) -> Params:
    def dec(e):
        return float(e) if isinstance(e, str) else [dec(r) for r in e]

    return {k: np.array(dec(e), dtype=np.float64) for k, e in d.items()}
