"""Training loop, per-epoch telemetry and outcome classification.

Runs that share a variant and schedule are trained as one *stack*: every
parameter has a leading run axis and all runs step in lockstep.  Each run
still has its own data realization, initialization, batch order, learning
rate and weight decay, so a stack is just a faster way to execute independent
runs.  A run whose loss or gradients turn non-finite is frozen and recorded as
crashed; the rest of the stack carries on.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from questlab.attention import AttentionVariant, canonical_kind
from questlab.model import ModelConfig, Params, forward_stack, init_params, loss_and_grad_stack, stack_params
from questlab.numerics import Rng, derive_seed
from questlab.optim import AdamWState, adamw_step
from questlab.toy_data import ToyConfig, ToyDataset, make_splits

log = logging.getLogger(__name__)

TELEMETRY_HEADER = (
    "epoch",
    "train_loss",
    "train_acc",
    "test_acc",
    "knorm_biased_ans",
    "knorm_unbiased_ans",
    "knorm_non_ans",
    "cls_qnorm",
    "max_logit",
    "cls_attn_entropy",
)

CORRECT, BIASED, DEGENERATE, OTHER = "Correct", "Biased", "Degenerate", "Other"
OUTCOME_TAGS = (CORRECT, BIASED, DEGENERATE, OTHER)

PROBE_SIZE = 320
EVAL_CHUNK = 250


@dataclass(frozen=True)
class RunConfig:
    variant: str
    lr: float
    weight_decay: float
    seed_weights: int
    seed_data: int
    epochs: int = 50
    batch_size: int = 32
    toy: ToyConfig = ToyConfig()
    wiring: str = "printed"
    metric: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_kind(self.variant))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")

    @property
    def model_cfg(self) -> ModelConfig:
        return ModelConfig(
            seq_len=self.toy.seq_len,
            d_model=self.toy.d_model,
            d_mlp=self.toy.d_model,
            n_classes=self.toy.n_classes,
            wiring=self.wiring,
        )

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.toy.train_size / self.batch_size)

    @property
    def shuffle_seed(self) -> int:
        return derive_seed("shuffle", self.variant, self.lr, self.weight_decay, self.seed_weights, self.seed_data)

    def to_json(self) -> dict:
        d = asdict(self)
        d["toy"] = asdict(self.toy)
        d["metric"] = list(self.metric) if self.metric is not None else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "toy" in d:
            d["toy"] = ToyConfig.from_dict(d["toy"])
        if d.get("metric") is not None:
            d["metric"] = tuple(float(m) for m in d["metric"])
        return cls(**d)


@dataclass
class TelemetryRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    knorm_biased_ans: float
    knorm_unbiased_ans: float
    knorm_non_ans: float
    cls_qnorm: float
    max_logit: float
    cls_attn_entropy: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in TELEMETRY_HEADER[1:]]


@dataclass(frozen=True)
class Outcome:
    tag: str
    train_acc: float
    test_acc: float


@dataclass
class RunResult:
    config: RunConfig
    outcome: Outcome
    telemetry: list[TelemetryRecord] = field(default_factory=list)
    crashed: bool = False
    steps: int = 0


def classify_outcome(train_acc: float, test_acc: float) -> Outcome:
    """Correct / Biased / Degenerate / Other from final accuracies."""
    for name, a in (("train_acc", train_acc), ("test_acc", test_acc)):
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"{name}={a} outside [0, 1]")
    if train_acc > 0.90 and test_acc > 0.90:
        tag = CORRECT
    elif 0.50 <= train_acc <= 0.90 and 0.15 <= test_acc <= 0.45:
        tag = BIASED
    elif test_acc <= 0.15:
        tag = DEGENERATE
    else:
        tag = OTHER
    return Outcome(tag, float(train_acc), float(test_acc))


def telemetry_csv(records: Sequence[TelemetryRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TELEMETRY_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_telemetry_csv(path) -> list[TelemetryRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TELEMETRY_HEADER:
        raise ValueError(f"{path}: unexpected telemetry header")
    return [TelemetryRecord(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]


class _Stack:
    """Shared data layout for a group of runs (one dataset per distinct data seed)."""

    def __init__(self, cfgs: Sequence[RunConfig]):
        first = cfgs[0]
        for c in cfgs:
            same = (c.variant, c.epochs, c.batch_size, c.toy, c.wiring, c.metric)
            if same != (first.variant, first.epochs, first.batch_size, first.toy, first.wiring, first.metric):
                raise ValueError("runs in one stack must share variant, schedule, toy config and wiring")
        self.cfgs = list(cfgs)
        self.n = len(cfgs)
        seeds = sorted({c.seed_data for c in cfgs})
        splits = {s: make_splits(first.toy, s) for s in seeds}
        self.train_x = np.stack([splits[s][1].x for s in seeds])
        self.train_y = np.stack([splits[s][1].labels for s in seeds])
        self.test_x = np.stack([splits[s][2].x for s in seeds])
        self.test_y = np.stack([splits[s][2].labels for s in seeds])
        self.train_sets: list[ToyDataset] = [splits[s][1] for s in seeds]
        self.which = np.array([seeds.index(c.seed_data) for c in cfgs])

    def probe(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = min(PROBE_SIZE, self.cfgs[0].toy.train_size)
        x = self.train_x[self.which, :p]
        pos = np.stack([self.train_sets[u].answer_pos[:p] for u in self.which])
        biased = np.stack([self.train_sets[u].biased[:p] for u in self.which])
        return x, pos, biased


def _finite_per_run(a: np.ndarray) -> np.ndarray:
    return np.isfinite(a.reshape(a.shape[0], -1)).all(axis=1)


def _category_means(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    cnt = mask.sum(axis=(1, 2))
    tot = np.where(mask, values, 0.0).sum(axis=(1, 2))
    return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def _evaluate(params: Params, stack: _Stack, kind: str, mcfg: ModelConfig, metric) -> np.ndarray:
    correct = np.zeros(stack.n)
    n_test = stack.test_x.shape[1]
    for s in range(0, n_test, EVAL_CHUNK):
        xb = stack.test_x[stack.which, s : s + EVAL_CHUNK]
        yb = stack.test_y[stack.which, s : s + EVAL_CHUNK]
        logits, _ = forward_stack(params, xb, kind, mcfg, metric=metric)
        correct += np.sum(np.argmax(logits, axis=-1) == yb, axis=1)
    return correct / n_test


def _probe_telemetry(params: Params, probe, kind: str, mcfg: ModelConfig, metric) -> dict[str, np.ndarray]:
    x, pos, biased = probe
    _, cache = forward_stack(params, x, kind, mcfg, metric=metric, full_attention=True)
    diag = cache.diagnostics
    knorm = diag.key_norms[:, :, 1:]  # drop CLS; token j+1 holds sequence position j
    is_ans = np.arange(knorm.shape[-1])[None, None, :] == pos[..., None]
    return {
        "knorm_biased_ans": _category_means(knorm, is_ans & biased[..., None]),
        "knorm_unbiased_ans": _category_means(knorm, is_ans & ~biased[..., None]),
        "knorm_non_ans": _category_means(knorm, ~is_ans),
        "cls_qnorm": diag.query_norms[:, :, 0].mean(axis=1),
        "max_logit": diag.max_logit.max(axis=1),
        "cls_attn_entropy": diag.row_entropy[:, :, 0].mean(axis=1),
    }


def train_stack(cfgs: Sequence[RunConfig]) -> list[RunResult]:
    """Train several compatible runs in lockstep; results come back in input order."""
    stack = _Stack(cfgs)
    first = stack.cfgs[0]
    kind = first.variant
    mcfg = first.model_cfg
    metric = np.asarray(first.metric) if first.metric is not None else None
    variant = AttentionVariant.create(kind, mcfg.d_model, metric=metric)

    init = stack_params([init_params(variant, Rng(c.seed_weights).split("init"), mcfg) for c in cfgs])
    params = {k: v.copy() for k, v in init.items()}
    lrs = np.array([c.lr for c in cfgs])
    wds = np.array([c.weight_decay for c in cfgs])
    opt = AdamWState(lr=lrs, weight_decay=wds)
    shufflers = [Rng(c.shuffle_seed) for c in cfgs]
    probe = stack.probe()

    n_train = first.toy.train_size
    bs = first.batch_size
    crashed = np.zeros(stack.n, dtype=bool)
    history: list[list[TelemetryRecord]] = [[] for _ in cfgs]
    steps = 0
    rows = np.arange(stack.n)[:, None]

    for epoch in range(1, first.epochs + 1):
        order = np.stack([sh.split(epoch).permutation(n_train) for sh in shufflers])
        loss_sum = np.zeros(stack.n)
        n_correct = np.zeros(stack.n)
        for s in range(0, n_train, bs):
            idx = order[:, s : s + bs]
            xb = stack.train_x[stack.which[:, None], idx]
            yb = stack.train_y[stack.which[:, None], idx]
            with np.errstate(all="ignore"):
                loss, grads, acc, _ = loss_and_grad_stack(params, xb, yb, kind, mcfg, metric=metric)
            ok = np.isfinite(loss)
            for g in grads.values():
                ok &= _finite_per_run(g)
            newly = ~ok & ~crashed
            if newly.any():
                log.warning("runs %s crashed at epoch %d", np.flatnonzero(newly).tolist(), epoch)
                crashed |= newly
                for k in params:
                    params[k][newly] = init[k][newly]
                    grads[k][newly] = 0.0
            params, opt = adamw_step(opt, params, grads, active=~crashed)
            steps += 1
            bad = np.zeros(stack.n, dtype=bool)
            for p in params.values():
                bad |= ~_finite_per_run(p)
            if bad.any():
                crashed |= bad
                for k in params:
                    params[k][bad] = init[k][bad]
            loss_sum += np.where(crashed, 0.0, loss) * idx.shape[1]
            n_correct += np.where(crashed, 0.0, acc) * idx.shape[1]

        test_acc = _evaluate(params, stack, kind, mcfg, metric)
        tel = _probe_telemetry(params, probe, kind, mcfg, metric)
        for r in range(stack.n):
            if crashed[r]:
                rec = TelemetryRecord(epoch, float("nan"), 0.0, 0.0, *([float("nan")] * 6))
            else:
                rec = TelemetryRecord(
                    epoch,
                    float(loss_sum[r] / n_train),
                    float(n_correct[r] / n_train),
                    float(test_acc[r]),
                    *(float(tel[k][r]) for k in TELEMETRY_HEADER[4:]),
                )
            history[r].append(rec)

    results = []
    for r, c in enumerate(cfgs):
        last = history[r][-1]
        if crashed[r]:
            outcome = Outcome(DEGENERATE, last.train_acc, last.test_acc)
        else:
            outcome = classify_outcome(last.train_acc, last.test_acc)
        results.append(RunResult(config=c, outcome=outcome, telemetry=history[r], crashed=bool(crashed[r]), steps=steps))
    return results


def train_run(cfg: RunConfig) -> RunResult:
    """Train a single run; see :func:`train_stack`."""
    return train_stack([cfg])[0]


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
