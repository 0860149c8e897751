"""Self-checks of every hand-written derivative and the headline invariances.

Each check draws random instances from a fixed seed, compares analytic
results against an independent oracle (central finite differences or a
closed-form identity) and reports the worst error seen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from questlab.attention import KINDS, AttentionVariant, attend, attend_backward, qk_vjp, reverse_attention
from questlab.model import ModelConfig, backward, forward, init_params
from questlab.numerics import Rng, cross_entropy, finite_diff_grad, rel_error, row_entropy

KEY_NORMALIZED = ("quest", "qknorm_hs", "qknorm_ds", "qknorm_full", "elliptical_quest")
FD_STEP = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    instances: int
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst={self.worst:.3g} tol={self.tolerance:g} n={self.instances} ({self.seconds:.2f}s)"


def _variant(kind: str, d: int, gen: np.random.Generator) -> AttentionVariant:
    var = AttentionVariant.create(kind, d, metric=gen.uniform(0.5, 2.0, d) if kind == "elliptical_quest" else None)
    # move learnable scales away from their defaults so their gradients are generic
    return var.with_params(**{k: v * gen.uniform(0.5, 1.5, np.shape(v)) for k, v in var.params().items()})


def attention_gradients(kind: str, instances: int = 20, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    t0 = time.perf_counter()
    gen = np.random.default_rng([seed, KINDS.index(kind)])
    worst = 0.0
    for _ in range(instances):
        n, d = int(gen.integers(2, 7)), int(gen.integers(2, 6))
        var = _variant(kind, d, gen)
        q, k, v, up = (gen.normal(size=(n, d)) for _ in range(4))

        def loss(qq, kk, vv, vr=var):
            return float(np.sum(attend(vr, qq, kk, vv).z * up))

        grads = attend_backward(var, q, k, v, attend(var, q, k, v), up)
        checks = [
            (grads.q, finite_diff_grad(lambda a: loss(a, k, v), q, FD_STEP)),
            (grads.k, finite_diff_grad(lambda a: loss(q, a, v), k, FD_STEP)),
            (grads.v, finite_diff_grad(lambda a: loss(q, k, a), v, FD_STEP)),
        ]
        for name, val in var.params().items():
            fd = finite_diff_grad(lambda a, nm=name: loss(q, k, v, var.with_params(**{nm: a})), val, FD_STEP)
            checks.append((grads.scales[name], fd))
        worst = max(worst, *(rel_error(a, b) for a, b in checks))
    return CheckResult(f"attention gradients [{kind}]", worst < tol, worst, tol, instances, time.perf_counter() - t0)


def model_gradients(kind: str, instances: int = 20, seed: int = 0, tol: float = 1e-4, coords: int = 3) -> CheckResult:
    """Full-model check on ``coords`` sampled entries of every parameter tensor."""
    t0 = time.perf_counter()
    gen = np.random.default_rng([seed, 100 + KINDS.index(kind)])
    cfg = ModelConfig(seq_len=4, init_std=0.5)
    worst = 0.0
    for i in range(instances):
        var = _variant(kind, cfg.d_model, gen)
        params = init_params(var, Rng(seed).split("gradcheck").split(kind).split(i), cfg)
        for key in ("ln1_b", "ln2_b", "mlp_b1", "mlp_b2", "cls_b", "cls_token"):
            params[key] = gen.normal(0.0, 0.3, params[key].shape)
        x = gen.normal(size=(3, cfg.seq_len, cfg.d_model))
        labels = gen.integers(0, cfg.n_classes, size=3)

        def loss(p):
            return float(np.sum(cross_entropy(forward(p, x, var, cfg)[0], labels)[0]))

        logits, cache = forward(params, x, var, cfg)
        grads = backward(params, cache, cross_entropy(logits, labels)[1])
        analytic, numeric = [], []
        for name, val in params.items():
            flat = val.reshape(-1)
            for j in gen.choice(flat.size, size=min(coords, flat.size), replace=False):
                def f(a, nm=name, jj=j):
                    p = dict(params)
                    arr = params[nm].copy().reshape(-1)
                    arr[jj] = a[0]
                    p[nm] = arr.reshape(params[nm].shape)
                    return loss(p)

                numeric.append(finite_diff_grad(f, flat[j : j + 1], FD_STEP)[0])
                analytic.append(grads[name].reshape(-1)[j])
        # one random direction through all parameters at once
        u = {k: gen.normal(size=v.shape) for k, v in params.items()}
        dir_fd = finite_diff_grad(lambda t: loss({k: params[k] + t[0] * u[k] for k in params}), np.zeros(1), FD_STEP)[0]
        dir_an = sum(float(np.sum(grads[k] * u[k])) for k in params)
        worst = max(worst, rel_error(analytic, numeric), rel_error(dir_an, dir_fd))
    return CheckResult(f"model gradients [{kind}]", worst < tol, worst, tol, instances, time.perf_counter() - t0)


def key_rescaling(instances: int = 500, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    t0 = time.perf_counter()
    gen = np.random.default_rng([seed, 7])
    worst = 0.0
    for i in range(instances):
        kind = KEY_NORMALIZED[i % len(KEY_NORMALIZED)]
        n, d = int(gen.integers(2, 9)), int(gen.integers(2, 9))
        var = _variant(kind, d, gen)
        q, k, v = (gen.normal(size=(n, d)) for _ in range(3))
        c = gen.uniform(0.1, 10.0, size=(n, 1))
        base = attend(var, q, k, v).attn
        worst = max(worst, float(np.max(np.abs(attend(var, q, k * c, v).attn - base))))
    return CheckResult("key-rescaling invariance", worst <= tol, worst, tol, instances, time.perf_counter() - t0)


def entropy_monotone(instances: int = 500, seed: int = 0, floor: float = 1e-9) -> CheckResult:
    """QUEST row entropy strictly drops as the query is scaled by 2, 5, 10.

    Rows whose entropy has already collapsed below ``floor`` are degenerate and
    skipped; ``worst`` is the largest entropy increase seen (must be negative).
    """
    t0 = time.perf_counter()
    gen = np.random.default_rng([seed, 8])
    var = AttentionVariant.create("quest", 4)
    worst = -np.inf
    for _ in range(instances):
        n, d = int(gen.integers(2, 9)), int(gen.integers(2, 9))
        var = AttentionVariant.create("quest", d)
        q, k, v = (gen.normal(size=(n, d)) for _ in range(3))
        ents = [row_entropy(attend(var, c * q, k, v).attn) for c in (1.0, 2.0, 5.0, 10.0)]
        for lo, hi in zip(ents, ents[1:]):
            live = lo > floor
            if np.any(live):
                worst = max(worst, float(np.max(hi[live] - lo[live])))
    return CheckResult("entropy decreases under query scaling", worst < 0.0, worst, 0.0, instances, time.perf_counter() - t0)


def argmax_stable(instances: int = 500, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    gen = np.random.default_rng([seed, 9])
    flips = 0
    for i in range(instances):
        kind = KINDS[i % len(KINDS)]
        n, d = int(gen.integers(2, 9)), int(gen.integers(2, 9))
        var = _variant(kind, d, gen)
        q, k, v = (gen.normal(size=(n, d)) for _ in range(3))
        base = np.argmax(attend(var, q, k, v).logits, axis=-1)
        for c in gen.uniform(0.05, 20.0, size=3):
            flips += int(np.sum(np.argmax(attend(var, c * q, k, v).logits, axis=-1) != base))
    return CheckResult("argmax invariance under query scaling", flips == 0, float(flips), 0.0, instances, time.perf_counter() - t0)


def reverse_attention_rows(instances: int = 50, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    t0 = time.perf_counter()
    gen = np.random.default_rng([seed, 10])
    worst = 0.0
    for _ in range(instances):
        n, dh, dm = int(gen.integers(1, 8)), int(gen.integers(2, 6)), int(gen.integers(2, 6))
        a = attend(AttentionVariant.create("standard", dh), *(gen.normal(size=(n, dh)) for _ in range(3))).attn
        r = reverse_attention(a, gen.normal(size=(n, dm)), gen.normal(size=(dh, dm)), gen.normal(size=(n, dh)), dh).r
        worst = max(worst, float(np.max(np.abs(r.sum(axis=-1)))))
    return CheckResult("reverse attention rows sum to zero", worst <= tol, worst, tol, instances, time.perf_counter() - t0)


def reverse_attention_vjp(instances: int = 50, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    """(R K, R^T Q) against finite differences of <delta, A V W_o>."""
    t0 = time.perf_counter()
    gen = np.random.default_rng([seed, 11])
    worst = 0.0
    for _ in range(instances):
        n, dh, dm = int(gen.integers(2, 8)), int(gen.integers(2, 6)), int(gen.integers(2, 6))
        var = AttentionVariant.create("standard", dh)
        q, k, v = (gen.normal(size=(n, dh)) for _ in range(3))
        w_o, delta = gen.normal(size=(dh, dm)), gen.normal(size=(n, dm))

        def surrogate(qq, kk):
            return float(np.sum(delta * (attend(var, qq, kk, v).z @ w_o)))

        r = reverse_attention(attend(var, q, k, v).attn, delta, w_o, v, dh)
        dq, dk = qk_vjp(r, q, k)
        worst = max(
            worst,
            rel_error(dq, finite_diff_grad(lambda a: surrogate(a, k), q, FD_STEP)),
            rel_error(dk, finite_diff_grad(lambda a: surrogate(q, a), k, FD_STEP)),
        )
    return CheckResult("reverse attention VJP vs finite differences", worst < tol, worst, tol, instances, time.perf_counter() - t0)


def gradient_suite(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    out = [attention_gradients(kind, instances, seed) for kind in KINDS]
    out += [model_gradients(kind, instances, seed) for kind in KINDS]
    return out


def invariance_suite(instances: int = 500, seed: int = 0) -> list[CheckResult]:
    return [key_rescaling(instances, seed), entropy_monotone(instances, seed), argmax_stable(instances, seed)]


def reverse_suite(instances: int = 50, seed: int = 0) -> list[CheckResult]:
    return [reverse_attention_rows(instances, seed), reverse_attention_vjp(instances, seed)]


def run_all(seed: int = 0) -> list[CheckResult]:
    return gradient_suite(seed=seed) + invariance_suite(seed=seed) + reverse_suite(seed=seed)
