"""Normalized, augmented VAE objective and the training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numgrad as ng
from .data import IrregularSeries, take_subset
from .model import ConfigError, HeTVAE
from .numgrad import AdamState, GradTape, Tensor
from .rng import stream

LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(RuntimeError):
    """A loss term or gradient became non-finite."""

    def __init__(self, term: str, iteration: int | None = None):
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"non-finite value in {term}{where}")
        self.term = term
        self.iteration = iteration


@dataclass
class TrainConfig:
    lam: float = 1.0
    alo: bool = True
    s_train: int = 1
    batch_size: int = 128
    iterations: int = 2000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # share of each case the encoder sees during training; every point is scored
    context_fraction: float = 0.5
    checkpoint_every: int = 0
    lambda_grid: tuple[float, ...] = (1.0, 5.0, 10.0)

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.s_train < 1 or self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("s_train and batch_size must be >= 1, iterations >= 0")
        if not 0.0 < self.context_fraction <= 1.0:
            raise ConfigError(f"context_fraction must lie in (0, 1], got {self.context_fraction}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.alo else 0.0

    def to_json(self) -> dict:
        out = asdict(self)
        out["lambda_grid"] = list(self.lambda_grid)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        obj = dict(obj)
        if "lambda_grid" in obj:
            obj["lambda_grid"] = tuple(float(x) for x in obj["lambda_grid"])
        return cls(**obj)


@dataclass
class LossReport:
    total: float
    nll_term: float
    kl_term: float
    mse_term: float
    normalizers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_skipped: int = 0
    iteration: int = 0


# ---------------------------------------------------------------------------
# closed forms


def _check_positive(sigma2, what: str) -> None:
    if np.any(ng._v(sigma2) <= 0):
        raise ValueError(f"{what}: variance must be strictly positive")


def gaussian_logpdf_t(x, mu, sigma2) -> Tensor:
    """Elementwise Gaussian log density as a differentiable expression."""
    resid = ng.sub(x, mu)
    return ng.neg(ng.mul(0.5, ng.add(ng.add(LOG_2PI, ng.log(sigma2)), ng.div(ng.square(resid), sigma2))))


def gaussian_logpdf(x, mu, sigma2):
    _check_positive(sigma2, "gaussian_logpdf")
    out = gaussian_logpdf_t(x, mu, sigma2).value
    return float(out) if out.ndim == 0 else out


def kl_terms_t(mu, sigma2) -> Tensor:
    """Elementwise KL(N(mu, sigma2) || N(0, 1))."""
    return ng.mul(0.5, ng.sub(ng.sub(ng.add(ng.square(mu), sigma2), ng.log(sigma2)), 1.0))


def kl_diag_standard(mu, sigma2) -> float:
    _check_positive(sigma2, "kl_diag_standard")
    return float(np.sum(kl_terms_t(mu, sigma2).value))


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Encoder context plus every scored observation, one row per observation.

    Targets are laid out observation-major: row ``q`` of case ``b`` holds one
    (time, channel) pair, so repeated times and repeated observations are
    represented faithfully.
    """

    ids: list[str]
    context: list[IrregularSeries]
    query_times: np.ndarray  # [B, Q]
    values: np.ndarray  # [B, Q, D]
    mask: np.ndarray  # [B, Q, D] bool
    n_obs: np.ndarray  # [B]
    n_skipped: int = 0

    @property
    def size(self) -> int:
        return len(self.ids)


def make_batch(targets: Sequence[IrregularSeries], contexts: Sequence[IrregularSeries] | None = None) -> Batch:
    """Cases with no observations are dropped and counted in ``n_skipped``."""
    contexts = targets if contexts is None else contexts
    if len(contexts) != len(targets):
        raise ValueError("need one context per target case")
    keep = [i for i, s in enumerate(targets) if s.n_obs > 0 and contexts[i].n_obs > 0]
    n_dims = targets[0].n_dims if targets else 0
    width = max((targets[i].n_obs for i in keep), default=1)
    b = len(keep)
    qt = np.zeros((b, width))
    vals = np.zeros((b, width, n_dims))
    mask = np.zeros((b, width, n_dims), dtype=bool)
    n_obs = np.zeros(b)
    for row, i in enumerate(keep):
        q = 0
        for d, ch in enumerate(targets[i].channels):
            n = len(ch)
            qt[row, q : q + n] = ch.times
            vals[row, q : q + n, d] = ch.values
            mask[row, q : q + n, d] = True
            q += n
        n_obs[row] = q
    return Batch(
        ids=[targets[i].id for i in keep],
        context=[contexts[i] for i in keep],
        query_times=qt,
        values=vals,
        mask=mask,
        n_obs=n_obs,
        n_skipped=len(targets) - b,
    )


# ---------------------------------------------------------------------------
# objective


@dataclass
class LossTensors:
    total: Tensor
    nll: Tensor
    kl: Tensor
    mse: Tensor


def nvae_terms(model: HeTVAE, p, batch: Batch, noise, lam: float) -> LossTensors:
    """Per-batch sums of the per-case normalized terms.

    ``noise`` has shape [S, B, K, latent_dim]; it is ignored (and may be None)
    when the probabilistic path is disabled.
    """
    cfg = model.config
    if batch.size == 0:
        raise ValueError("batch has no case with observations")
    keys = model.keys_for(batch.context)
    h = model.encode_batch(p, keys)
    if cfg.prob_path:
        noise = np.asarray(noise, dtype=np.float64)
        want = (batch.size, cfg.K, cfg.latent_dim)
        if noise.ndim != 4 or noise.shape[1:] != want:
            raise ValueError(f"noise shape {noise.shape} does not match [S, {want[0]}, {want[1]}, {want[2]}]")
    z_cat, mu_z, s2_z = model.latent_batch(p, h, noise)
    mu, s2 = model.decode_batch(p, z_cat, batch.query_times)  # [S, B, Q, D]
    n_samples = mu.shape[0]

    mask = batch.mask[None]
    inv_n = 1.0 / batch.n_obs
    scale = inv_n / n_samples  # per-case normalizer and sample average in one factor

    logp = ng.where(mask, gaussian_logpdf_t(batch.values[None], mu, s2), 0.0)
    per_case_nll = ng.neg(ng.sum_(ng.sum_(ng.sum_(logp, axis=-1), axis=-1), axis=0))
    nll = ng.sum_(ng.mul(per_case_nll, scale))

    sq = ng.where(mask, ng.square(ng.sub(batch.values[None], mu)), 0.0)
    per_case_sq = ng.sum_(ng.sum_(ng.sum_(sq, axis=-1), axis=-1), axis=0)
    mse = ng.sum_(ng.mul(per_case_sq, scale))

    if cfg.prob_path:
        per_case_kl = ng.sum_(ng.sum_(kl_terms_t(mu_z, s2_z), axis=-1), axis=-1)
        kl = ng.sum_(ng.mul(per_case_kl, inv_n))
    else:
        kl = Tensor(np.zeros(()))
    total = ng.add(ng.add(nll, kl), ng.mul(lam, mse))
    return LossTensors(total, nll, kl, mse)


def nvae_loss(model: HeTVAE, batch: Batch, noise, cfg: TrainConfig, params=None) -> LossReport:
    """Loss report without gradients, using ``params`` or the model's own weights."""
    store = model.params if params is None else params
    p = store.arrays() if isinstance(store, ng.ParamStore) else store
    t = nvae_terms(model, p, batch, noise, cfg.effective_lambda)
    return _report(t, batch)


def _report(t: LossTensors, batch: Batch, iteration: int = 0) -> LossReport:
    return LossReport(
        total=float(t.total.value),
        nll_term=float(t.nll.value),
        kl_term=float(t.kl.value),
        mse_term=float(t.mse.value),
        normalizers=batch.n_obs.copy(),
        n_skipped=batch.n_skipped,
        iteration=iteration,
    )


# ---------------------------------------------------------------------------
# training


def batch_members(n_cases: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Case indices of mini-batch ``step``; each epoch is a fresh permutation."""
    per_epoch = max(1, math.ceil(n_cases / batch_size))
    epoch, slot = divmod(step, per_epoch)
    perm = stream(seed, 100, epoch).permutation(n_cases)
    return perm[slot * batch_size : (slot + 1) * batch_size]


def step_inputs(model: HeTVAE, series: Sequence[IrregularSeries], cfg: TrainConfig, step: int) -> tuple[Batch, np.ndarray | None]:
    """Mini-batch, encoder contexts and latent noise for one step.

    Everything is drawn from streams addressed by (seed, step), so a resumed
    run sees exactly the inputs an uninterrupted run would have.
    """
    idx = batch_members(len(series), cfg.batch_size, cfg.seed, step)
    rng = stream(cfg.seed, 101, step)
    cases = [series[i] for i in idx]
    contexts = []
    for s in cases:
        sub_seed = int(rng.integers(2**63))
        if cfg.context_fraction >= 1.0 or s.n_obs <= 1:
            contexts.append(s)
        else:
            n_keep = max(1, math.ceil(cfg.context_fraction * s.n_obs))
            contexts.append(take_subset(s, n_keep, sub_seed))
    batch = make_batch(cases, contexts)
    noise = None
    if model.config.prob_path:
        noise = rng.standard_normal((cfg.s_train, batch.size, model.config.K, model.config.latent_dim))
    return batch, noise


def _check_finite(t: LossTensors, grads: Mapping[str, np.ndarray], iteration: int) -> None:
    for name, term in (("nll term", t.nll), ("kl term", t.kl), ("mse term", t.mse), ("total loss", t.total)):
        if not np.isfinite(term.value):
            raise NumericalError(name, iteration)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"gradient of {name}", iteration)


def train(
    model: HeTVAE,
    series: Sequence[IrregularSeries],
    cfg: TrainConfig,
    state: AdamState | None = None,
    on_checkpoint: Callable[[HeTVAE, AdamState, list[LossReport]], None] | None = None,
    on_step: Callable[[LossReport], None] | None = None,
) -> tuple[AdamState, list[LossReport]]:
    """Adam on the normalized objective until ``cfg.iterations`` total steps.

    Passing a restored ``state`` resumes from its step counter. ``model.params``
    is updated in place. Returns the optimizer state and the reports of the
    steps run by this call.
    """
    cfg.validate()
    if not series:
        raise ValueError("training set is empty")
    if state is None:
        state = AdamState.fresh(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    history: list[LossReport] = []
    lam = cfg.effective_lambda
    while state.step < cfg.iterations:
        step = state.step
        batch, noise = step_inputs(model, series, cfg, step)
        try:
            with GradTape() as tape:
                p = tape.watch(model.params)
                terms = nvae_terms(model, p, batch, noise, lam)
        except ValueError as exc:
            # diverged parameters can underflow a variance to zero
            raise NumericalError(f"forward pass ({exc})", step + 1) from exc
        grads = ng.backward(tape, terms.total)
        _check_finite(terms, grads, step + 1)
        ng.adam_step(state, model.params, grads)
        report = _report(terms, batch, iteration=state.step)
        history.append(report)
        if on_step is not None:
            on_step(report)
        if on_checkpoint is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            on_checkpoint(model, state, history)
    return state, history


HISTORY_HEADER = ("iter", "total", "nll", "kl", "mse")


def write_history(path, history: Sequence[LossReport], append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([r.iteration, repr(r.total), repr(r.nll_term), repr(r.kl_term), repr(r.mse_term)])


def read_history(path) -> list[LossReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LossReport(float(r["total"]), float(r["nll"]), float(r["kl"]), float(r["mse"]), iteration=int(r["iter"]))
        for r in rows
    ]
