"""HeTVAE encoder/decoder assembly.

Parameter layout (all names are ParamStore paths)::

    untan.enc.*   encoder UnTAND (time embeddings, projections, mixing)
    enc.mu.*      two-layer network for the latent means
    enc.sigma.*   two-layer network for the latent log-variances
    det.*         one linear layer of the deterministic path
    untan.dec.*   decoder UnTAND over the concatenated latent channels
    dec.mu.*      two-layer network for the output means
    dec.sigma.*   two-layer network for the output variances (het mode only)
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import numgrad as ng
from . import untan as ut
from .numgrad import ParamStore, Tensor
from .rng import stream

VARIANCE_FLOOR = 0.01


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class HetvaeConfig:
    D: int = 1
    K: int = 16
    d_e: int = 128
    H: int = 1
    J: int = 32
    latent_dim: int = 16
    mlp_width: int = 128
    het: bool = True
    int_path: bool = True
    det_path: bool = True
    prob_path: bool = True
    sigma_c2: float = 1.0
    pooling: str = "max"
    # spread of the initial time-embedding frequencies; 1.0 is a plain standard normal
    omega_std: float = 10.0

    def validate(self) -> None:
        if not (self.prob_path or self.det_path):
            raise ConfigError("at least one of prob_path / det_path must be enabled")
        if self.d_e % self.H:
            raise ConfigError(f"d_e={self.d_e} is not divisible by H={self.H}")
        if self.omega_std <= 0:
            raise ConfigError(f"omega_std must be positive, got {self.omega_std}")
        if self.sigma_c2 <= 0:
            raise ConfigError(f"sigma_c2 must be positive, got {self.sigma_c2}")
        if min(self.D, self.K, self.d_e, self.H, self.J, self.latent_dim, self.mlp_width) <= 0:
            raise ConfigError("all model sizes must be positive")
        if self.pooling not in ut.POOLINGS:
            raise ConfigError(f"pooling must be one of {ut.POOLINGS}, got {self.pooling!r}")

    @property
    def latent_channels(self) -> int:
        return self.latent_dim * (int(self.prob_path) + int(self.det_path))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "HetvaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LatentState:
    mu: np.ndarray | None  # [K, latent_dim]
    sigma2: np.ndarray | None
    z: np.ndarray | None  # [S, K, latent_dim]
    det: np.ndarray | None  # [K, latent_dim]
    z_cat: np.ndarray  # [S, K, C]


@dataclass
class OutputDistribution:
    times: np.ndarray  # [Q]
    mu: np.ndarray  # [Q, D]
    sigma2: np.ndarray  # [Q, D]
    mode: str  # "heteroscedastic" | "homoscedastic"


def reference_points(k: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, k)


def _init_linear(store: ParamStore, prefix: str, rng, n_in: int, n_out: int) -> None:
    bound = n_in**-0.5
    store.add(f"{prefix}.weight", rng.uniform(-bound, bound, (n_in, n_out)))
    store.add(f"{prefix}.bias", np.zeros(n_out))


def _init_mlp(store: ParamStore, prefix: str, rng, n_in: int, width: int, n_out: int) -> None:
    _init_linear(store, f"{prefix}.l1", rng, n_in, width)
    _init_linear(store, f"{prefix}.l2", rng, width, n_out)


def init_params(cfg: HetvaeConfig, seed: int) -> ParamStore:
    cfg.validate()
    rng = stream(seed, 10)
    store = ParamStore()
    ut.init_params(store, "untan.enc", rng, cfg.D, cfg.d_e, cfg.H, cfg.J, cfg.omega_std)
    if cfg.prob_path:
        _init_mlp(store, "enc.mu", rng, cfg.J, cfg.mlp_width, cfg.latent_dim)
        _init_mlp(store, "enc.sigma", rng, cfg.J, cfg.mlp_width, cfg.latent_dim)
    if cfg.det_path:
        _init_linear(store, "det", rng, cfg.J, cfg.latent_dim)
    ut.init_params(store, "untan.dec", rng, cfg.latent_channels, cfg.d_e, cfg.H, cfg.J, cfg.omega_std)
    _init_mlp(store, "dec.mu", rng, cfg.J, cfg.mlp_width, cfg.D)
    if cfg.het:
        _init_mlp(store, "dec.sigma", rng, cfg.J, cfg.mlp_width, cfg.D)
    return store


def _linear(p, prefix, x) -> Tensor:
    return ng.linear(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def _mlp(p, prefix, x) -> Tensor:
    return _linear(p, f"{prefix}.l2", ng.relu(_linear(p, f"{prefix}.l1", x)))


def reparameterize(mu, sigma2, noise) -> Tensor:
    """mu + sqrt(sigma2) * noise, broadcasting a leading sample axis on ``noise``."""
    if np.any(ng._v(sigma2) <= 0):
        raise ValueError("reparameterize: sigma2 must be strictly positive")
    return ng.add(mu, ng.mul(ng.sqrt(sigma2), noise))


def sample_output(dist: OutputDistribution, noise) -> np.ndarray:
    return dist.mu + np.sqrt(dist.sigma2) * np.asarray(noise, dtype=np.float64)


class HeTVAE:
    """Model configuration, parameters, reference grid and encoder union times.

    The ``*_batch`` methods take a parameter mapping ``p`` (plain arrays, or
    tensors from :meth:`GradTape.watch`) so the same code serves training and
    inference. The remaining methods are single-case conveniences over
    ``self.params``.
    """

    def __init__(self, config: HetvaeConfig, union_times: Sequence[np.ndarray], params: ParamStore | None = None, seed: int = 0):
        config.validate()
        if len(union_times) != config.D:
            raise ConfigError(f"got union times for {len(union_times)} channels, config has D={config.D}")
        self.config = config
        self.union_times = [np.asarray(t, dtype=np.float64) for t in union_times]
        self.union = ut.UnionSet.from_lists(self.union_times)
        self.refs = reference_points(config.K)
        self.params = params if params is not None else init_params(config, seed)

    # -- batched, differentiable ------------------------------------------------

    def keys_for(self, cases: Sequence) -> ut.KeySet:
        chans = [[(c.times, c.values) for c in s.channels] for s in cases]
        for s in cases:
            if s.n_dims != self.config.D:
                raise ConfigError(f"series {s.id!r} has {s.n_dims} channels, model expects D={self.config.D}")
        return ut.pad_channels(chans, self.union)

    def encoder_weights(self, p) -> ut.UnTANWeights:
        return ut.weights_from_params(p, "untan.enc", self.config.H, self.config.pooling)

    def decoder_weights(self, p) -> ut.UnTANWeights:
        return ut.weights_from_params(p, "untan.dec", self.config.H, self.config.pooling)

    def encode_batch(self, p, keys: ut.KeySet) -> Tensor:
        """[B, K, J]; intensity features become constant 1 when INT is ablated."""
        return ut.untan_batch(self.encoder_weights(p), self.refs[None, :], keys, self.union, self.config.int_path)

    def latent_params_batch(self, p, h) -> tuple[Tensor, Tensor]:
        mu = _mlp(p, "enc.mu", h)
        sigma2 = ng.exp(_mlp(p, "enc.sigma", h))
        return mu, sigma2

    def det_batch(self, p, h) -> Tensor:
        if not self.config.det_path:
            raise ConfigError("deterministic path is disabled in this configuration")
        return _linear(p, "det", h)

    def latent_batch(self, p, h, noise):
        """Returns (z_cat [S, B, K, C], mu, sigma2); mu/sigma2 are None without PROB."""
        cfg = self.config
        mu = sigma2 = z = det = None
        if cfg.prob_path:
            mu, sigma2 = self.latent_params_batch(p, h)
            z = reparameterize(mu, sigma2, noise)
        if cfg.det_path:
            det = self.det_batch(p, h)
        return concat_latent(z, det), mu, sigma2

    def decode_batch(self, p, z_cat, query_times: np.ndarray, refs: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Output mean and variance ``[S, B, Q, D]`` at per-case query times ``[B, Q]``."""
        cfg = self.config
        refs = self.refs if refs is None else np.asarray(refs, dtype=np.float64)
        s, b, k, c = z_cat.shape
        q = query_times.shape[-1]
        values = ng.reshape(ng.transpose(z_cat, (0, 1, 3, 2)), (s * b, c, k))
        keys = ut.KeySet(
            times=np.broadcast_to(refs, (s * b, 1, k)),
            values=values,
            mask=np.ones((s * b, 1, k), dtype=bool),
            novel=np.zeros((s * b, 1, k), dtype=bool),
        )
        union = ut.UnionSet(refs[None, :], np.ones((1, k), dtype=bool))
        qt = np.broadcast_to(query_times, (s, b, q)).reshape(s * b, q)
        h = ut.untan_batch(self.decoder_weights(p), qt, keys, union)
        mu = ng.reshape(_mlp(p, "dec.mu", h), (s, b, q, cfg.D))
        if cfg.het:
            raw = ng.reshape(_mlp(p, "dec.sigma", h), (s, b, q, cfg.D))
            sigma2 = ng.add(VARIANCE_FLOOR, ng.softplus(raw))
        else:
            sigma2 = Tensor(np.full((s, b, q, cfg.D), cfg.sigma_c2))
        return mu, sigma2

    # -- single-case conveniences ----------------------------------------------

    def encode(self, series, refs: np.ndarray | None = None) -> np.ndarray:
        """UnTAND encoder output [K, J] for one series."""
        keys = self.keys_for([series])
        refs = self.refs if refs is None else np.asarray(refs, dtype=np.float64)
        w = self.encoder_weights(self.params.arrays())
        return ut.untan_batch(w, refs[None, :], keys, self.union, self.config.int_path).value[0]

    def latent_params(self, h_enc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if not self.config.prob_path:
            raise ConfigError("probabilistic path is disabled in this configuration")
        mu, sigma2 = self.latent_params_batch(self.params.arrays(), h_enc)
        return mu.value, sigma2.value

    def det_path(self, h_enc: np.ndarray) -> np.ndarray:
        return self.det_batch(self.params.arrays(), h_enc).value

    def concat_latent(self, z, det) -> np.ndarray:
        if not self.config.prob_path:
            z = None
        if not self.config.det_path:
            det = None
        return concat_latent(z, det).value

    def infer(self, series, noise: np.ndarray) -> LatentState:
        """Encoder pass for one series with latent noise ``[S, K, latent_dim]``."""
        p = self.params.arrays()
        h = self.encode_batch(p, self.keys_for([series]))
        z_cat, mu, sigma2 = self.latent_batch(p, h, np.asarray(noise)[:, None])
        cfg = self.config
        det = self.det_batch(p, h).value[0] if cfg.det_path else None
        z = None
        if cfg.prob_path:
            z = reparameterize(mu, sigma2, np.asarray(noise)[:, None]).value[:, 0]
        return LatentState(
            mu=None if mu is None else mu.value[0],
            sigma2=None if sigma2 is None else sigma2.value[0],
            z=z,
            det=det,
            z_cat=z_cat.value[:, 0],
        )

    def decode(self, z_cat: np.ndarray, refs: np.ndarray | None, query_times) -> list[OutputDistribution]:
        """One output distribution per latent sample of ``z_cat [S, K, C]``."""
        qt = np.asarray(query_times, dtype=np.float64).reshape(1, -1)
        z = np.asarray(z_cat, dtype=np.float64)[:, None]
        mu, sigma2 = self.decode_batch(self.params.arrays(), z, qt, refs)
        mode = "heteroscedastic" if self.config.het else "homoscedastic"
        return [OutputDistribution(qt[0].copy(), mu.value[s, 0], sigma2.value[s, 0], mode) for s in range(z.shape[0])]


def concat_latent(z, det) -> Tensor:
    """[z | det] along the channel axis; ``det`` is replicated over samples.

    Without the probabilistic path the result has a single sample.
    """
    if z is None and det is None:
        raise ConfigError("both latent pathways are disabled")
    if z is None:
        return ng.expand_dims(det, 0)
    if det is None:
        return z if isinstance(z, Tensor) else Tensor(z)
    zs = ng._v(z).shape
    return ng.concat([z, ng.broadcast_to(ng.expand_dims(det, 0), zs[:-1] + ng._v(det).shape[-1:])], axis=-1)


def log_2pi() -> float:
    return math.log(2.0 * math.pi)
