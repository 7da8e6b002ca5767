"""Irregular series containers, the synthetic benchmark, preprocessing and IO."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import as_generator, stream


class DataError(ValueError):
    """Malformed or inconsistent data."""


@dataclass
class Channel:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return self.times.size


@dataclass
class IrregularSeries:
    """One data case: per-dimension observation times and values."""

    id: str
    channels: list[Channel]

    @property
    def n_dims(self) -> int:
        return len(self.channels)

    @property
    def n_obs(self) -> int:
        return sum(len(c) for c in self.channels)

    def validate(self) -> None:
        for d, ch in enumerate(self.channels):
            if ch.times.shape != ch.values.shape:
                raise DataError(
                    f"series {self.id!r} channel {d}: {ch.times.size} times but {ch.values.size} values"
                )
            if not (np.all(np.isfinite(ch.times)) and np.all(np.isfinite(ch.values))):
                raise DataError(f"series {self.id!r} channel {d}: non-finite entries")
            if ch.times.size > 1 and not np.all(np.diff(ch.times) > 0):
                raise DataError(f"series {self.id!r} channel {d}: times not strictly ascending")

    def sorted(self) -> "IrregularSeries":
        chans = []
        for ch in self.channels:
            order = np.argsort(ch.times, kind="stable")
            chans.append(Channel(ch.times[order], ch.values[order]))
        return IrregularSeries(self.id, chans)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "channels": [
                {"t": [float(t) for t in ch.times], "x": [float(x) for x in ch.values]}
                for ch in self.channels
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "IrregularSeries":
        try:
            chans = [Channel(c["t"], c["x"]) for c in obj["channels"]]
            return cls(str(obj["id"]), chans)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed series record: {exc}") from exc

    @classmethod
    def univariate(cls, id: str, times, values) -> "IrregularSeries":
        return cls(id, [Channel(times, values)])


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SyntheticConfig:
    n_trajectories: int = 2000
    n_points: int = 50
    n_anchors: int = 10
    bandwidth: float = 120.0
    noise_std: float = 0.1
    min_obs: int = 3
    max_obs: int = 10
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_trajectories, self.n_points, self.n_anchors, self.min_obs) <= 0:
            raise DataError("synthetic counts must be positive")
        if self.bandwidth <= 0 or self.noise_std < 0:
            raise DataError("bandwidth must be positive and noise_std non-negative")
        if not self.min_obs <= self.max_obs <= self.n_points:
            raise DataError(
                f"need min_obs <= max_obs <= n_points, got {self.min_obs}, {self.max_obs}, {self.n_points}"
            )


@dataclass
class SyntheticData:
    times: np.ndarray  # [n_points]
    anchors: np.ndarray  # [n_anchors] anchor times
    z: np.ndarray  # [n_trajectories, n_anchors]
    clean: np.ndarray  # [n_trajectories, n_points] before noise
    values: np.ndarray  # [n_trajectories, n_points]

    def dense_series(self, i: int, prefix: str = "syn") -> IrregularSeries:
        return IrregularSeries.univariate(f"{prefix}-{i:05d}", self.times, self.values[i])


def kernel_smoother_weights(times: np.ndarray, anchors: np.ndarray, bandwidth: float) -> np.ndarray:
    """Row-normalized RBF weights, shape [len(times), len(anchors)]."""
    logits = -bandwidth * (times[:, None] - anchors[None, :]) ** 2
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticData:
    """Dense univariate trajectories from a normalized RBF kernel smoother.

    Anchor k sits at 0.1*k (k = 1..n_anchors) and grid point i at 0.02*i
    (i = 1..n_points); indices start at 1. Each trajectory draws its anchor
    values and noise from its own stream.
    """
    cfg.validate()
    anchors = 0.1 * np.arange(1, cfg.n_anchors + 1)
    times = 0.02 * np.arange(1, cfg.n_points + 1)
    weights = kernel_smoother_weights(times, anchors, cfg.bandwidth)
    z = np.empty((cfg.n_trajectories, cfg.n_anchors))
    noise = np.empty((cfg.n_trajectories, cfg.n_points))
    for i in range(cfg.n_trajectories):
        rng = stream(cfg.seed, 0, i)
        z[i] = rng.standard_normal(cfg.n_anchors)
        noise[i] = rng.standard_normal(cfg.n_points)
    clean = z @ weights.T
    values = clean + cfg.noise_std * noise
    return SyntheticData(times, anchors, z, clean, values)


def subsample(series: IrregularSeries, min_obs: int, max_obs: int, seed) -> IrregularSeries:
    """Keep a uniformly sized, uniformly chosen subset of a dense univariate series."""
    rng = as_generator(seed)
    ch = series.channels[0]
    n = len(ch)
    if max_obs > n:
        raise DataError(f"max_obs={max_obs} exceeds the {n} available points")
    m = int(rng.integers(min_obs, max_obs + 1))
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return IrregularSeries(series.id, [Channel(ch.times[idx], ch.values[idx])])


def make_synthetic_dataset(cfg: SyntheticConfig) -> tuple[list[IrregularSeries], list[IrregularSeries]]:
    """Sparse cases plus the dense trajectories they were cut from."""
    data = generate_synthetic(cfg)
    dense = [data.dense_series(i) for i in range(cfg.n_trajectories)]
    sparse = [subsample(s, cfg.min_obs, cfg.max_obs, stream(cfg.seed, 1, i)) for i, s in enumerate(dense)]
    return sparse, dense


def split_counts(n: int, test_frac: float = 0.2, val_frac: float = 0.2) -> tuple[int, int, int]:
    """(train, val, test) sizes; both fractions round half up."""
    n_test = int(math.floor(test_frac * n + 0.5))
    n_val = int(math.floor(val_frac * (n - n_test) + 0.5))
    return n - n_test - n_val, n_val, n_test


def split_indices(n: int, seed: int, test_frac: float = 0.2, val_frac: float = 0.2) -> dict[str, list[int]]:
    n_train, n_val, _ = split_counts(n, test_frac, val_frac)
    perm = stream(seed, 2).permutation(n)
    return {
        "train": sorted(int(i) for i in perm[:n_train]),
        "val": sorted(int(i) for i in perm[n_train : n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val :]),
    }


# ---------------------------------------------------------------------------
# normalization


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    trim: float = 0.001
    t_min: float = 0.0
    t_max: float = 1.0

    def to_json(self) -> dict:
        return {
            "mean": [float(x) for x in self.mean],
            "std": [float(x) for x in self.std],
            "trim": self.trim,
            "t_min": self.t_min,
            "t_max": self.t_max,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Normalizer":
        return cls(
            np.asarray(obj["mean"], dtype=np.float64),
            np.asarray(obj["std"], dtype=np.float64),
            float(obj.get("trim", 0.001)),
            float(obj["t_min"]),
            float(obj["t_max"]),
        )

    @property
    def t_span(self) -> float:
        span = self.t_max - self.t_min
        return span if span > 0 else 1.0


def trimmed_moments(values: np.ndarray, trim: float) -> tuple[float, float]:
    """Mean and population std after dropping both tails at nearest-rank percentiles."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.size
    lo = x[max(1, math.ceil(trim * n)) - 1]
    hi = x[max(1, math.ceil((1.0 - trim) * n)) - 1]
    kept = x[(x >= lo) & (x <= hi)]
    return float(kept.mean()), float(kept.std())


def fit_normalizer(series: Sequence[IrregularSeries], trim: float = 0.001, std_floor: float = 1e-6) -> Normalizer:
    if not series:
        raise DataError("cannot fit a normalizer on an empty split")
    n_dims = series[0].n_dims
    means, stds = np.empty(n_dims), np.empty(n_dims)
    for d in range(n_dims):
        vals = np.concatenate([s.channels[d].values for s in series])
        if vals.size == 0:
            raise DataError(f"dimension {d} has no observations in the training split")
        means[d], stds[d] = trimmed_moments(vals, trim)
    stds = np.maximum(stds, std_floor)
    all_t = np.concatenate([c.times for s in series for c in s.channels])
    return Normalizer(means, stds, trim, float(all_t.min()), float(all_t.max()))


def apply_normalizer(series: Iterable[IrregularSeries], norm: Normalizer) -> list[IrregularSeries]:
    out = []
    for s in series:
        chans = [
            Channel((c.times - norm.t_min) / norm.t_span, (c.values - norm.mean[d]) / norm.std[d])
            for d, c in enumerate(s.channels)
        ]
        out.append(IrregularSeries(s.id, chans))
    return out


def invert_normalizer(series: Iterable[IrregularSeries], norm: Normalizer) -> list[IrregularSeries]:
    out = []
    for s in series:
        chans = [
            Channel(c.times * norm.t_span + norm.t_min, c.values * norm.std[d] + norm.mean[d])
            for d, c in enumerate(s.channels)
        ]
        out.append(IrregularSeries(s.id, chans))
    return out


def union_times(series: Sequence[IrregularSeries]) -> list[np.ndarray]:
    """Sorted distinct observation times per dimension over a split."""
    n_dims = series[0].n_dims
    return [np.unique(np.concatenate([s.channels[d].times for s in series])) for d in range(n_dims)]


# ---------------------------------------------------------------------------
# conditioning / target protocol


def split_condition_target(series: IrregularSeries, fraction: float, seed) -> tuple[IrregularSeries, IrregularSeries]:
    """Pool all observations, send ceil(fraction * total) (>= 1) to conditioning."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must lie in (0, 1), got {fraction}")
    total = series.n_obs
    if total == 0:
        raise DataError(f"series {series.id!r} has no observations to split")
    rng = as_generator(seed)
    n_cond = max(1, math.ceil(fraction * total))
    chosen = np.zeros(total, dtype=bool)
    chosen[rng.choice(total, size=n_cond, replace=False)] = True
    cond, targ = [], []
    start = 0
    for ch in series.channels:
        sel = chosen[start : start + len(ch)]
        start += len(ch)
        cond.append(Channel(ch.times[sel], ch.values[sel]))
        targ.append(Channel(ch.times[~sel], ch.values[~sel]))
    return IrregularSeries(series.id, cond), IrregularSeries(series.id, targ)


def take_subset(series: IrregularSeries, n_keep: int, seed) -> IrregularSeries:
    """Uniformly chosen ``n_keep`` observations out of the pooled set."""
    total = series.n_obs
    if not 1 <= n_keep <= total:
        raise DataError(f"series {series.id!r}: cannot keep {n_keep} of {total} observations")
    rng = as_generator(seed)
    chosen = np.zeros(total, dtype=bool)
    chosen[rng.choice(total, size=n_keep, replace=False)] = True
    chans, start = [], 0
    for ch in series.channels:
        sel = chosen[start : start + len(ch)]
        start += len(ch)
        chans.append(Channel(ch.times[sel], ch.values[sel]))
    return IrregularSeries(series.id, chans)


# ---------------------------------------------------------------------------
# persistence


def write_dataset(series: Iterable[IrregularSeries], path) -> None:
    with open(path, "w") as fh:
        for s in series:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path) -> list[IrregularSeries]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    out = []
    n_dims = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                s = IrregularSeries.from_json(json.loads(line))
                s.validate()
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if n_dims is None:
                n_dims = s.n_dims
            elif s.n_dims != n_dims:
                raise DataError(f"{path}:{lineno}: {s.n_dims} channels, expected {n_dims}")
            out.append(s)
    return out
