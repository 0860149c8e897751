"""Synthetic retrieval task with a spurious shortcut.

Each sequence holds ``seq_len`` tokens.  A token is a real-valued key part
(``d_key`` dims) followed by a one-hot value part (``d_val`` classes).  The
label is the value one-hot at a hidden answer position ``L``.  Non-answer keys
are standard normal; the answer key is drawn from ``N(0, Sigma)`` (unbiased)
or from a tight cloud around a shared bias vector ``b`` (biased), so a model
can either learn the robust "atypical key" rule or the ``b`` lookup shortcut.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from questlab.numerics import Rng


@dataclass(frozen=True)
class ToyConfig:
    seq_len: int = 20
    d_key: int = 10
    d_val: int = 10
    mu_l: float = 10.0
    sigma_l: float = 2.0
    p_bias: float = 0.5
    biased_cov_scale: float = 0.1
    train_size: int = 1600
    test_size: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.p_bias <= 1.0:
            raise ValueError("p_bias must lie in [0, 1]")
        if self.seq_len <= self.mu_l:
            raise ValueError("seq_len must exceed mu_l")
        if self.sigma_l < 0 or self.biased_cov_scale < 0:
            raise ValueError("sigma_l and biased_cov_scale must be non-negative")
        if min(self.d_key, self.d_val, self.train_size, self.test_size) < 1:
            raise ValueError("dimensions and dataset sizes must be positive")

    @property
    def d_model(self) -> int:
        return self.d_key + self.d_val

    @property
    def n_classes(self) -> int:
        return self.d_val

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        d = dict(d)
        if "N" in d:
            d["seq_len"] = d.pop("N")
        return cls(**d)


@dataclass(frozen=True)
class DataRealization:
    sigma: np.ndarray
    s_factor: np.ndarray
    bias_vec: np.ndarray
    seed: int

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "sigma": self.sigma.tolist(),
            "s_factor": self.s_factor.tolist(),
            "bias_vec": self.bias_vec.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DataRealization":
        return cls(
            sigma=np.asarray(d["sigma"], dtype=np.float64),
            s_factor=np.asarray(d["s_factor"], dtype=np.float64),
            bias_vec=np.asarray(d["bias_vec"], dtype=np.float64),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    answer_pos: int
    biased: bool
    label: int


@dataclass(frozen=True)
class ToyDataset:
    """Column-oriented store of samples: ``x`` is (n, seq_len, d_key + d_val)."""

    x: np.ndarray
    answer_pos: np.ndarray
    biased: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.answer_pos[i]), bool(self.biased[i]), int(self.labels[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "ToyDataset":
        return ToyDataset(self.x[idx], self.answer_pos[idx], self.biased[idx], self.labels[idx])

    @classmethod
    def from_samples(cls, samples) -> "ToyDataset":
        samples = list(samples)
        if not samples:
            raise ValueError("empty sample list")
        return cls(
            x=np.stack([s.x for s in samples]),
            answer_pos=np.array([s.answer_pos for s in samples], dtype=np.int64),
            biased=np.array([s.biased for s in samples], dtype=bool),
            labels=np.array([s.label for s in samples], dtype=np.int64),
        )


def make_realization(cfg: ToyConfig, seed: int) -> DataRealization:
    rng = Rng(seed).split("realization")
    s = rng.normal(size=(cfg.d_key, cfg.d_key))
    z = rng.normal(size=cfg.d_key)
    return DataRealization(sigma=s @ s.T, s_factor=s, bias_vec=s @ z, seed=int(seed))


def sample_position(cfg: ToyConfig, rng: Rng, size=None):
    """Answer index: a rounded ``N(mu_l, sigma_l)`` draw clamped into the sequence."""
    pos = np.clip(np.rint(rng.normal(cfg.mu_l, cfg.sigma_l, size)), 0, cfg.seq_len - 1)
    return pos.astype(np.int64) if size is not None else int(pos)


def sample_dataset(
    real: DataRealization, cfg: ToyConfig, n: int, allow_bias: bool, rng: Rng
) -> ToyDataset:
    if n <= 0:
        raise ValueError("n must be positive")
    pos = sample_position(cfg, rng, size=n)
    if allow_bias:
        biased = rng.uniform(size=n) < cfg.p_bias
    else:
        biased = np.zeros(n, dtype=bool)
    keys = rng.normal(size=(n, cfg.seq_len, cfg.d_key))
    z = rng.normal(size=(n, cfg.d_key))
    noise = rng.normal(size=(n, cfg.d_key))
    unbiased_ans = z @ real.s_factor.T
    biased_ans = real.bias_vec + np.sqrt(cfg.biased_cov_scale) * noise
    rows = np.arange(n)
    keys[rows, pos] = np.where(biased[:, None], biased_ans, unbiased_ans)

    classes = rng.integers(0, cfg.d_val, size=(n, cfg.seq_len))
    onehot = np.zeros((n, cfg.seq_len, cfg.d_val))
    np.put_along_axis(onehot, classes[..., None], 1.0, axis=-1)
    x = np.concatenate([keys, onehot], axis=-1)
    return ToyDataset(x=x, answer_pos=pos, biased=biased, labels=classes[rows, pos].astype(np.int64))


def make_splits(cfg: ToyConfig, data_seed: int) -> tuple[DataRealization, ToyDataset, ToyDataset]:
    """Realization plus a biased training set and a bias-free test set."""
    real = make_realization(cfg, data_seed)
    root = Rng(data_seed)
    train = sample_dataset(real, cfg, cfg.train_size, True, root.split("train"))
    test = sample_dataset(real, cfg, cfg.test_size, False, root.split("test"))
    return real, train, test


def write_dataset(path, ds: ToyDataset) -> None:
    with open(path, "w") as fh:
        for s in ds:
            rec = {"x": s.x.tolist(), "answer_pos": s.answer_pos, "biased": s.biased, "label": s.label}
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> ToyDataset:
    samples = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                samples.append(Sample(np.asarray(d["x"], dtype=np.float64), int(d["answer_pos"]), bool(d["biased"]), int(d["label"])))
    return ToyDataset.from_samples(samples)


def dump_splits(out_dir, cfg: ToyConfig, data_seed: int) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    real, train, test = make_splits(cfg, data_seed)
    paths = [out / f"realization_{data_seed}.json", out / f"train_{data_seed}.jsonl", out / f"test_{data_seed}.jsonl"]
    sidecar = real.to_json()
    sidecar["config"] = asdict(cfg)
    paths[0].write_text(json.dumps(sidecar, indent=1))
    write_dataset(paths[1], train)
    write_dataset(paths[2], test)
    return paths
