import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from questlab.attention import (
    KINDS,
    AttentionVariant,
    attend,
    attend_backward,
    canonical_kind,
    qk_vjp,
    reverse_attention,
)
from questlab.numerics import finite_diff_grad, rel_error, row_softmax, row_softmax_backward

seeds = st.integers(0, 2**32 - 1)


def random_variant(kind, d, gen):
    var = AttentionVariant.create(kind, d, metric=gen.uniform(0.5, 2.0, d) if kind == "elliptical_quest" else None)
    return var.with_params(**{k: v * gen.uniform(0.5, 1.5, np.shape(v)) for k, v in var.params().items()})


def qkv(gen, n, d):
    return gen.normal(size=(n, d)), gen.normal(size=(n, d)), gen.normal(size=(n, d))


# construction -------------------------------------------------------------------


def test_aliases_and_unknown_kind():
    assert canonical_kind("QUEST") == "quest"
    with pytest.raises(ValueError):
        canonical_kind("flash")


def test_learnable_scales_required_and_initialized():
    with pytest.raises(ValueError):
        AttentionVariant("qknorm_hs")
    hs = AttentionVariant.create("qknorm_hs", 16)
    assert float(hs.scale) == pytest.approx(4.0)
    ds = AttentionVariant.create("qknorm_ds", 16)
    # effective multiplier scale_q * scale_k starts at sqrt(d_head)
    np.testing.assert_allclose(ds.scale_q * ds.scale_k, 4.0)
    assert AttentionVariant.create("quest", 4).learnable == ()


def test_elliptical_metric_must_be_positive():
    with pytest.raises(ValueError):
        AttentionVariant("elliptical_quest", metric=np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        AttentionVariant("elliptical_quest")


def test_with_params_rejects_unknown():
    with pytest.raises(ValueError):
        AttentionVariant.create("quest", 4).with_params(scale=1.0)


# forward examples ----------------------------------------------------------------


def test_quest_ln3_example():
    q = math.log(3) * np.array([[1.0, 0.0], [1.0, 0.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = attend(AttentionVariant.create("quest", 2), q, k, np.eye(2))
    np.testing.assert_allclose(out.attn, [[0.75, 0.25]] * 2, atol=1e-12)


def test_quest_key_times_seven():
    gen = np.random.default_rng(0)
    q, k, v = qkv(gen, 5, 3)
    var = AttentionVariant.create("quest", 3)
    k7 = k.copy()
    k7[2] *= 7
    np.testing.assert_allclose(attend(var, q, k7, v).attn, attend(var, q, k, v).attn, atol=1e-12)


def test_standard_hand_computation():
    q = np.array([[1.0, 0.0, 2.0, -1.0], [0.0, 1.0, 1.0, 1.0]])
    k = np.array([[2.0, 1.0, 0.0, 1.0], [-1.0, 0.0, 1.0, 3.0]])
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = attend(AttentionVariant.create("standard", 4), q, k, v)
    expected = []
    for qi in q:
        s = [sum(a * b for a, b in zip(qi, kj)) / 2.0 for kj in k]
        e = [math.exp(x - max(s)) for x in s]
        expected.append([x / sum(e) for x in e])
    np.testing.assert_allclose(out.attn, expected, atol=1e-15)
    np.testing.assert_allclose(out.z, np.array(expected) @ v, atol=1e-14)


def test_shape_errors():
    var = AttentionVariant.create("standard", 3)
    with pytest.raises(ValueError):
        attend(var, np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        attend(var, np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(ValueError):
        attend(var, np.full((2, 3), np.nan), np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("kind", KINDS)
def test_rows_sum_to_one_and_diagnostics(kind):
    gen = np.random.default_rng(1)
    q, k, v = qkv(gen, 6, 4)
    out = attend(random_variant(kind, 4, gen), q, k, v)
    np.testing.assert_allclose(out.attn.sum(axis=-1), 1.0, atol=1e-12)
    d = out.diagnostics
    assert np.all(d.row_entropy >= 0) and np.all(d.row_entropy <= math.log(6) + 1e-12)
    np.testing.assert_allclose(d.key_norms, np.linalg.norm(k, axis=1))
    np.testing.assert_allclose(d.query_norms, np.linalg.norm(q, axis=1))
    assert d.max_logit == pytest.approx(out.logits.max())


def test_variant_formulas():
    gen = np.random.default_rng(2)
    q, k, v = qkv(gen, 4, 3)
    qb = q / np.linalg.norm(q, axis=1, keepdims=True)
    kb = k / np.linalg.norm(k, axis=1, keepdims=True)
    cases = {
        "quest": q @ kb.T,
        "qnorm": qb @ k.T,
        "qknorm_hs": 2.5 * qb @ kb.T,
    }
    for kind, logits in cases.items():
        var = AttentionVariant.create(kind, 3)
        if kind == "qknorm_hs":
            var = var.with_params(scale=2.5)
        np.testing.assert_allclose(attend(var, q, k, v).logits, logits, atol=1e-12)
    sq, sk = gen.uniform(0.5, 2, 3), gen.uniform(0.5, 2, 3)
    ds = AttentionVariant.create("qknorm_ds", 3).with_params(scale_q=sq, scale_k=sk)
    np.testing.assert_allclose(attend(ds, q, k, v).logits, (qb * sq) @ (kb * sk).T, atol=1e-12)
    m = gen.uniform(0.5, 2, 3)
    ell = AttentionVariant.create("elliptical_quest", 3, metric=m)
    np.testing.assert_allclose(attend(ell, q, k, v).logits, np.linalg.norm(q, axis=1, keepdims=True) * (qb * m) @ kb.T, atol=1e-12)


def test_zero_key_row_is_finite():
    gen = np.random.default_rng(3)
    q, k, v = qkv(gen, 3, 4)
    k[1] = 0.0
    for kind in KINDS:
        out = attend(random_variant(kind, 4, gen), q, k, v)
        assert np.all(np.isfinite(out.attn))


def test_dropout_needs_rng():
    with pytest.raises(ValueError):
        attend(AttentionVariant.create("quest", 2), np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), dropout=0.5)


# invariances (property tests) ---------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(seeds, st.sampled_from(["quest", "qknorm_hs", "qknorm_ds", "qknorm_full", "elliptical_quest"]))
def test_key_rescaling_invariance(seed, kind):
    gen = np.random.default_rng(seed)
    n, d = int(gen.integers(1, 8)), int(gen.integers(2, 8))
    var = random_variant(kind, d, gen)
    q, k, v = qkv(gen, n, d)
    s = gen.uniform(0.01, 100.0, size=(n, 1))
    np.testing.assert_allclose(attend(var, q, s * k, v).attn, attend(var, q, k, v).attn, atol=1e-12, rtol=0)


@settings(max_examples=200, deadline=None)
@given(seeds, st.sampled_from(["qnorm", "qknorm_hs", "qknorm_ds", "qknorm_full"]))
def test_query_rescaling_invariance(seed, kind):
    gen = np.random.default_rng(seed)
    n, d = int(gen.integers(1, 8)), int(gen.integers(2, 8))
    var = random_variant(kind, d, gen)
    q, k, v = qkv(gen, n, d)
    s = gen.uniform(0.01, 100.0, size=(n, 1))
    np.testing.assert_allclose(attend(var, s * q, k, v).attn, attend(var, q, k, v).attn, atol=1e-12, rtol=0)


def test_standard_is_not_key_rescaling_invariant():
    gen = np.random.default_rng(4)
    q, k, v = qkv(gen, 6, 4)
    var = AttentionVariant.create("standard", 4)
    s = np.ones((6, 1))
    s[0] = 10.0
    assert np.max(np.abs(attend(var, q, s * k, v).attn - attend(var, q, k, v).attn)) > 0.1


@settings(max_examples=200, deadline=None)
@given(seeds, st.sampled_from([2.0, 5.0, 10.0]))
def test_quest_entropy_strictly_decreases(seed, c):
    gen = np.random.default_rng(seed)
    n, d = int(gen.integers(2, 8)), int(gen.integers(2, 8))
    var = AttentionVariant.create("quest", d)
    q, k, v = qkv(gen, n, d)
    before = attend(var, q, k, v).diagnostics.row_entropy
    after = attend(var, c * q, k, v).diagnostics.row_entropy
    live = before > 1e-9
    assert np.all(after[live] < before[live])


@settings(max_examples=200, deadline=None)
@given(seeds, st.sampled_from(KINDS), st.floats(0.01, 100.0))
def test_argmax_stable_under_query_scaling(seed, kind, c):
    gen = np.random.default_rng(seed)
    n, d = int(gen.integers(1, 8)), int(gen.integers(2, 8))
    var = random_variant(kind, d, gen)
    q, k, v = qkv(gen, n, d)
    a = attend(var, q, k, v).attn
    b = attend(var, c * q, k, v).attn
    np.testing.assert_array_equal(np.argmax(a, axis=-1), np.argmax(b, axis=-1))


# backward ------------------------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_zero_upstream_gives_zero_grads(kind):
    gen = np.random.default_rng(5)
    q, k, v = qkv(gen, 4, 3)
    var = random_variant(kind, 3, gen)
    g = attend_backward(var, q, k, v, attend(var, q, k, v), np.zeros((4, 3)))
    for a in (g.q, g.k, g.v, *g.scales.values()):
        assert np.all(a == 0.0)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("n,d", [(1, 2), (3, 5), (6, 8)])
def test_backward_matches_finite_differences(kind, n, d):
    gen = np.random.default_rng([n, d, KINDS.index(kind)])
    var = random_variant(kind, d, gen)
    q, k, v = qkv(gen, n, d)
    up = gen.normal(size=(n, d))

    def loss(qq, kk, vv, vr=var):
        return np.sum(attend(vr, qq, kk, vv).z * up)

    g = attend_backward(var, q, k, v, attend(var, q, k, v), up)
    assert rel_error(g.q, finite_diff_grad(lambda a: loss(a, k, v), q)) < 1e-5
    assert rel_error(g.k, finite_diff_grad(lambda a: loss(q, a, v), k)) < 1e-5
    assert rel_error(g.v, finite_diff_grad(lambda a: loss(q, k, a), v)) < 1e-5
    for name, val in var.params().items():
        fd = finite_diff_grad(lambda a: loss(q, k, v, var.with_params(**{name: a})), val)
        assert rel_error(g.scales[name], fd) < 1e-5


def test_quest_key_grad_orthogonal_to_key():
    gen = np.random.default_rng(6)
    q, k, v = qkv(gen, 5, 4)
    var = AttentionVariant.create("quest", 4)
    g = attend_backward(var, q, k, v, attend(var, q, k, v), gen.normal(size=(5, 4)))
    np.testing.assert_allclose(np.sum(g.k * k, axis=1), 0.0, atol=1e-10)


def test_backward_rejects_foreign_cache():
    gen = np.random.default_rng(7)
    q, k, v = qkv(gen, 3, 2)
    cache = attend(AttentionVariant.create("standard", 2), q, k, v)
    with pytest.raises(ValueError):
        attend_backward(AttentionVariant.create("quest", 2), q, k, v, cache, np.ones((3, 2)))
    with pytest.raises(ValueError):
        attend_backward(AttentionVariant.create("standard", 2), q[:2], k[:2], v[:2], cache, np.ones((2, 2)))


# reverse attention ------------------------------------------------------------------


def test_reverse_attention_zero_delta():
    gen = np.random.default_rng(8)
    q, k, v = qkv(gen, 4, 3)
    a = attend(AttentionVariant.create("standard", 3), q, k, v).attn
    assert np.all(reverse_attention(a, np.zeros((4, 5)), gen.normal(size=(3, 5)), v, 3).r == 0.0)


def test_reverse_attention_single_token():
    r = reverse_attention(np.ones((1, 1)), np.ones((1, 2)), np.ones((3, 2)), np.ones((1, 3)), 3)
    np.testing.assert_array_equal(r.r, [[0.0]])
    dq, dk = qk_vjp(r, np.ones((1, 3)), np.ones((1, 3)))
    assert np.all(dq == 0) and np.all(dk == 0)


def test_qk_vjp_zero_r():
    dq, dk = qk_vjp(np.zeros((3, 3)), np.ones((3, 2)), np.ones((3, 2)))
    assert np.all(dq == 0) and np.all(dk == 0)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_reverse_attention_composition_and_rows(seed):
    gen = np.random.default_rng(seed)
    n, dh, dm = int(gen.integers(1, 7)), int(gen.integers(2, 6)), int(gen.integers(2, 6))
    q, k, v = qkv(gen, n, dh)
    w_o, delta = gen.normal(size=(dh, dm)), gen.normal(size=(n, dm))
    a = attend(AttentionVariant.create("standard", dh), q, k, v).attn
    r = reverse_attention(a, delta, w_o, v, dh).r
    np.testing.assert_allclose(r.sum(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(r, math.sqrt(1 / dh) * row_softmax_backward(a, delta @ w_o.T @ v.T), atol=1e-14)


def test_reverse_attention_matches_attend_backward():
    gen = np.random.default_rng(9)
    n, dh, dm = 5, 4, 3
    q, k, v = qkv(gen, n, dh)
    w_o, delta = gen.normal(size=(dh, dm)), gen.normal(size=(n, dm))
    var = AttentionVariant.create("standard", dh)
    out = attend(var, q, k, v)
    dq, dk = qk_vjp(reverse_attention(out.attn, delta, w_o, v, dh), q, k)
    g = attend_backward(var, q, k, v, out, delta @ w_o.T)
    assert rel_error(dq, g.q) < 1e-10
    assert rel_error(dk, g.k) < 1e-10
    surrogate = lambda qq, kk: np.sum(delta * (attend(var, qq, kk, v).z @ w_o))  # noqa: E731
    assert rel_error(dq, finite_diff_grad(lambda a: surrogate(a, k), q)) < 1e-5
    assert rel_error(dk, finite_diff_grad(lambda a: surrogate(q, a), k)) < 1e-5


def test_reverse_attention_shape_errors():
    with pytest.raises(ValueError):
        reverse_attention(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), 2)
    with pytest.raises(ValueError):
        reverse_attention(np.full((2, 2), 0.5), np.ones((2, 2)), np.ones((3, 2)), np.ones((2, 2)), 2)
