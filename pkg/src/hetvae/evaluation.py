"""Probabilistic interpolation metrics and trace export."""

from __future__ import annotations

import csv
import hashlib
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import DataError, IrregularSeries, split_condition_target
from .model import HeTVAE
from .objective import LOG_2PI, make_batch
from .rng import stream


@dataclass
class EvalReport:
    nll: float
    mae: float
    mse: float
    n_targets: int
    nll_std: float = 0.0
    mae_std: float = 0.0
    mse_std: float = 0.0
    n_skipped: int = 0
    fraction: float = 0.5
    n_samples: int = 100
    seeds: tuple[int, ...] = (0,)

    def to_json(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        return out


@dataclass
class InterpolationTrace:
    times: np.ndarray  # [G]
    mean: np.ndarray  # [G, D]
    std: np.ndarray  # [G, D]

    def rows(self):
        for g, t in enumerate(self.times):
            for d in range(self.mean.shape[1]):
                yield float(t), d, float(self.mean[g, d]), float(self.std[g, d])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "dim", "mean", "std"])
        for t, d, m, s in self.rows():
            w.writerow([repr(t), d, repr(m), repr(s)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# scoring


def mixture_logpdf(x, mu, sigma2) -> np.ndarray:
    """log of the equal-weight Gaussian mixture density, per target.

    ``mu`` and ``sigma2`` carry the sample axis first: [S, N]; ``x`` is [N].
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("mixture components need strictly positive variance")
    comp = -0.5 * (LOG_2PI + np.log(sigma2) + (x - mu) ** 2 / sigma2)
    top = comp.max(axis=0)
    return top + np.log(np.mean(np.exp(comp - top), axis=0))


def mixture_nll(x, mu, sigma2) -> float:
    """Negative mean over targets of the log mixture density."""
    return float(-np.mean(mixture_logpdf(x, mu, sigma2)))


def point_metrics(pred, target) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    resid = target - pred
    return float(np.mean(np.abs(resid))), float(np.mean(resid**2))


def mixture_moments(mu, sigma2) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the equal-weight mixture over the leading axis."""
    mu = np.asarray(mu, dtype=np.float64)
    mbar = mu.mean(axis=0)
    var = np.mean(sigma2, axis=0) + np.mean((mu - mbar) ** 2, axis=0)
    return mbar, var


# ---------------------------------------------------------------------------
# prediction


def case_key(case_id: str) -> int:
    """Stable integer key for a case id, used to address its random streams."""
    return int.from_bytes(hashlib.sha256(case_id.encode()).digest()[:8], "little")


def latent_noise(model: HeTVAE, n_samples: int, seed: int, case: int) -> np.ndarray | None:
    cfg = model.config
    if not cfg.prob_path:
        return None
    return stream(seed, 201, case).standard_normal((n_samples, cfg.K, cfg.latent_dim))


def predict(model: HeTVAE, contexts: Sequence[IrregularSeries], query_times: np.ndarray, noise) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample output moments [S, B, Q, D] for a chunk of cases.

    ``noise`` is [S, B, K, latent_dim] (None without the probabilistic path).
    Without it only one sample exists, since the model is deterministic.
    """
    p = model.params.arrays()
    h = model.encode_batch(p, model.keys_for(contexts))
    z_cat, _, _ = model.latent_batch(p, h, noise)
    mu, s2 = model.decode_batch(p, z_cat, np.asarray(query_times, dtype=np.float64))
    return mu.value, s2.value


@dataclass
class _CaseScore:
    logp: np.ndarray  # per target observation
    abs_err: np.ndarray
    sq_err: np.ndarray


def _score_chunk(model: HeTVAE, conds, targets, n_samples: int, seed: int, case_ids: Sequence[int]) -> list[_CaseScore]:
    batch = make_batch(targets, conds)
    noise = None
    if model.config.prob_path:
        noise = np.stack([latent_noise(model, n_samples, seed, c) for c in case_ids], axis=1)
    mu, s2 = predict(model, batch.context, batch.query_times, noise)
    out = []
    for b in range(batch.size):
        m = batch.mask[b]
        x = batch.values[b][m]
        mu_b = mu[:, b][:, m]
        s2_b = s2[:, b][:, m]
        mbar = mu_b.mean(axis=0)
        out.append(_CaseScore(mixture_logpdf(x, mu_b, s2_b), np.abs(x - mbar), (x - mbar) ** 2))
    return out


def evaluate(
    model: HeTVAE,
    series: Sequence[IrregularSeries],
    fraction: float = 0.5,
    n_samples: int = 100,
    seed: int = 0,
    chunk: int = 16,
    jobs: int = 1,
) -> EvalReport:
    """Condition on a random ``fraction`` of each case and score the rest.

    Metrics weight every target observation equally across the split. Each
    case draws its split and latent noise from streams keyed by its id, so
    results depend neither on case order, ``chunk`` nor ``jobs``.
    """
    conds, targets, case_ids = [], [], []
    skipped = 0
    for s in series:
        if s.n_obs == 0:
            skipped += 1
            continue
        key = case_key(s.id)
        c, t = split_condition_target(s, fraction, stream(seed, 200, key))
        if t.n_obs == 0:
            skipped += 1
            continue
        conds.append(c)
        targets.append(t)
        case_ids.append(key)
    if not case_ids:
        raise DataError("no case has both conditioning and target observations")

    starts = range(0, len(case_ids), chunk)

    def run(a: int):
        sl = slice(a, a + chunk)
        return _score_chunk(model, conds[sl], targets[sl], n_samples, seed, case_ids[sl])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(a) for a in starts]
    scores = [s for part in parts for s in part]
    logp = np.concatenate([s.logp for s in scores])
    abs_err = np.concatenate([s.abs_err for s in scores])
    sq_err = np.concatenate([s.sq_err for s in scores])
    return EvalReport(
        nll=float(-np.mean(logp)),
        mae=float(np.mean(abs_err)),
        mse=float(np.mean(sq_err)),
        n_targets=int(logp.size),
        n_skipped=skipped,
        fraction=fraction,
        n_samples=n_samples,
        seeds=(seed,),
    )


def combine_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean and population standard deviation of each metric over seeds."""
    if not reports:
        raise ValueError("no reports to combine")
    arr = {k: np.array([getattr(r, k) for r in reports]) for k in ("nll", "mae", "mse")}
    first = reports[0]
    return EvalReport(
        nll=float(arr["nll"].mean()),
        mae=float(arr["mae"].mean()),
        mse=float(arr["mse"].mean()),
        n_targets=first.n_targets,
        nll_std=float(arr["nll"].std()),
        mae_std=float(arr["mae"].std()),
        mse_std=float(arr["mse"].std()),
        n_skipped=first.n_skipped,
        fraction=first.fraction,
        n_samples=first.n_samples,
        seeds=tuple(s for r in reports for s in r.seeds),
    )


def evaluate_seeds(model: HeTVAE, series, seeds: Sequence[int], **kw) -> EvalReport:
    return combine_reports([evaluate(model, series, seed=s, **kw) for s in seeds])


def interpolation_trace(
    model: HeTVAE,
    conditioning: IrregularSeries,
    grid,
    n_samples: int = 100,
    seed: int = 0,
) -> InterpolationTrace:
    """Mixture mean and standard deviation on ``grid`` given ``conditioning``."""
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(grid)):
        raise ValueError("query grid must be finite")
    if grid.size > 1 and np.any(np.diff(grid) < 0):
        raise ValueError("query grid must be sorted")
    if conditioning.n_obs == 0:
        raise DataError(f"series {conditioning.id!r} has no conditioning observations")
    noise = latent_noise(model, n_samples, seed, case_key(conditioning.id))
    mu, s2 = predict(model, [conditioning], grid[None, :], None if noise is None else noise[:, None])
    mbar, var = mixture_moments(mu[:, 0], s2[:, 0])
    return InterpolationTrace(grid.copy(), mbar, np.sqrt(var))


def sparsity_response(traces: Sequence[InterpolationTrace], conds: Sequence[IrregularSeries], far: float = 0.1, near: float = 0.02) -> tuple[float, float]:
    """Mean trace std at grid points far from / near to conditioning times.

    Distances use the pooled conditioning times of each case (all channels).
    Returns (far_mean, near_mean); either is NaN when no point qualifies.
    """
    far_vals, near_vals = [], []
    for tr, c in zip(traces, conds):
        obs = np.concatenate([ch.times for ch in c.channels])
        dist = np.min(np.abs(tr.times[:, None] - obs[None, :]), axis=1)
        far_vals.append(tr.std[dist > far].reshape(-1))
        near_vals.append(tr.std[dist <= near].reshape(-1))
    f = np.concatenate(far_vals) if far_vals else np.zeros(0)
    n = np.concatenate(near_vals) if near_vals else np.zeros(0)
    return (float(f.mean()) if f.size else float("nan"), float(n.mean()) if n.size else float("nan"))
