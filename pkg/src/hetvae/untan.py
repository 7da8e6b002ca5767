"""Uncertainty-aware multi-time attention (UnTAN) and its discretized form.

The batched core works on padded key sets:

* query times ``[B|1, Q]``
* key times / masks ``[B, D|1, L]`` (a channel axis of 1 means every channel
  shares the same observation times, as on the decoder side)
* key values ``[B, D, L]``, zero where masked
* union times ``[D|1, U]`` with a validity mask

Per head it produces an intensity and a value feature for every
(case, channel, query), concatenates them (head-major, channel-minor,
``[int, val]`` innermost) and mixes them linearly to ``J`` outputs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numgrad as ng
from .numgrad import NEG_LARGE, Tensor

POOLINGS = ("max", "sum")


class UnobservedChannelWarning(UserWarning):
    """A channel with no observations was pooled; its features are zero."""


@dataclass
class TimeEmbeddingHead:
    omega: object  # [d_e] angular frequencies
    beta: object  # [d_e] phases


@dataclass
class AttentionHead:
    embedding: TimeEmbeddingHead
    w: object  # [d_e, d_e // H] query projection
    v: object  # [d_e, d_e // H] key projection

    @property
    def d_e(self) -> int:
        return int(np.shape(ng._v(self.w))[0])


@dataclass
class UnTANWeights:
    heads: list[AttentionHead]
    mixing: object  # [2 * D_in * H, J]
    pooling_intensity: str = "max"
    pooling_value: str = "sum"

    @property
    def n_inputs(self) -> int:
        return np.shape(ng._v(self.mixing))[0] // (2 * len(self.heads))

    @property
    def out_dim(self) -> int:
        return int(np.shape(ng._v(self.mixing))[1])


def weights_from_params(params: Mapping[str, object], prefix: str, n_heads: int, pooling: str = "max") -> UnTANWeights:
    heads = [
        AttentionHead(
            TimeEmbeddingHead(params[f"{prefix}.head{h}.omega"], params[f"{prefix}.head{h}.beta"]),
            params[f"{prefix}.head{h}.w"],
            params[f"{prefix}.head{h}.v"],
        )
        for h in range(n_heads)
    ]
    return UnTANWeights(heads, params[f"{prefix}.mixing"], pooling)


def init_params(
    store: ng.ParamStore,
    prefix: str,
    rng: np.random.Generator,
    d_in: int,
    d_e: int,
    n_heads: int,
    out_dim: int,
    omega_std: float = 1.0,
) -> None:
    """Normal(0, omega_std^2) frequencies, standard-normal phases, uniform(+-fan_in^-1/2) projections."""
    if d_e % n_heads:
        raise ValueError(f"embedding dim {d_e} is not divisible by {n_heads} heads")
    d_k = d_e // n_heads
    for h in range(n_heads):
        store.add(f"{prefix}.head{h}.omega", omega_std * rng.standard_normal(d_e))
        store.add(f"{prefix}.head{h}.beta", rng.standard_normal(d_e))
        bound = d_e**-0.5
        store.add(f"{prefix}.head{h}.w", rng.uniform(-bound, bound, (d_e, d_k)))
        store.add(f"{prefix}.head{h}.v", rng.uniform(-bound, bound, (d_e, d_k)))
    fan_in = 2 * d_in * n_heads
    store.add(f"{prefix}.mixing", rng.uniform(-(fan_in**-0.5), fan_in**-0.5, (fan_in, out_dim)))


# ---------------------------------------------------------------------------
# padded inputs


@dataclass
class KeySet:
    times: np.ndarray  # [B, D|1, L]
    values: object  # [B, D, L] array or Tensor
    mask: np.ndarray  # [B, D|1, L] bool
    novel: np.ndarray  # [B, D|1, L] bool, observed but absent from the union set


@dataclass
class UnionSet:
    times: np.ndarray  # [D|1, U]
    mask: np.ndarray  # [D|1, U] bool

    @classmethod
    def from_lists(cls, per_dim: Sequence[np.ndarray]) -> "UnionSet":
        if any(len(t) == 0 for t in per_dim):
            raise ValueError("union time set must be non-empty for every channel")
        width = max(len(t) for t in per_dim)
        times = np.zeros((len(per_dim), width))
        mask = np.zeros((len(per_dim), width), dtype=bool)
        for d, t in enumerate(per_dim):
            times[d, : len(t)] = t
            mask[d, : len(t)] = True
        return cls(times, mask)


def pad_channels(cases: Sequence[Sequence[tuple[np.ndarray, np.ndarray]]], union: UnionSet | None = None) -> KeySet:
    """Pad per-case, per-channel (times, values) pairs, sorting each by time."""
    n_cases = len(cases)
    n_dims = len(cases[0])
    width = max(1, max((len(t) for case in cases for t, _ in case), default=1))
    times = np.zeros((n_cases, n_dims, width))
    values = np.zeros((n_cases, n_dims, width))
    mask = np.zeros((n_cases, n_dims, width), dtype=bool)
    novel = np.zeros((n_cases, n_dims, width), dtype=bool)
    for b, case in enumerate(cases):
        if len(case) != n_dims:
            raise ValueError(f"case {b} has {len(case)} channels, expected {n_dims}")
        for d, (t, x) in enumerate(case):
            t = np.asarray(t, dtype=np.float64)
            x = np.asarray(x, dtype=np.float64)
            order = np.lexsort((x, t))  # canonical order, ties broken by value
            n = t.size
            times[b, d, :n] = t[order]
            values[b, d, :n] = x[order]
            mask[b, d, :n] = True
            if union is not None:
                ut = union.times[d if union.times.shape[0] > 1 else 0][union.mask[d if union.mask.shape[0] > 1 else 0]]
                novel[b, d, :n] = ~np.isin(t[order], ut)
    return KeySet(times, values, mask, novel)


# ---------------------------------------------------------------------------
# differentiable pieces


def embed(times, head: TimeEmbeddingHead) -> Tensor:
    """sin(omega * t + beta) with a trailing embedding axis."""
    emb = head.embedding if isinstance(head, AttentionHead) else head
    t = np.asarray(times, dtype=np.float64)[..., None]
    return ng.sin(ng.add(ng.mul(t, emb.omega), emb.beta))


def scores(query_emb, key_emb, d_e: int) -> Tensor:
    """Scaled dot products between projected queries [.., Q, k] and keys [.., L, k]."""
    return ng.div(ng.matmul(query_emb, ng.swap_last(key_emb)), math.sqrt(d_e))


def pool_value(score, values, mask=None) -> Tensor:
    """Softmax-weighted (max-shifted) sum of ``values`` over the last axis."""
    if mask is not None:
        score = ng.where(mask, score, NEG_LARGE)
    weights = ng.softmax(score, axis=-1)
    return ng.sum_(ng.mul(weights, values), axis=-1)


def pool_intensity(score_d, score_u, pooling: str = "max", mask_d=None, mask_u=None) -> Tensor:
    """pool(exp score_d) / pool(exp score_u), evaluated as exp of a log-domain difference."""
    if pooling not in POOLINGS:
        raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
    if mask_d is not None:
        score_d = ng.where(mask_d, score_d, NEG_LARGE)
    if mask_u is not None:
        score_u = ng.where(mask_u, score_u, NEG_LARGE)
    kind = "max" if pooling == "max" else "logsumexp"
    num = ng.reduce(kind, score_d, axis=-1)
    den = ng.reduce(kind, score_u, axis=-1)
    return ng.exp(ng.sub(num, den))


def head_pathways(
    head: AttentionHead,
    query_times: np.ndarray,
    keys: KeySet,
    union: UnionSet,
    pooling: str = "max",
    int_path: bool = True,
) -> tuple[Tensor, Tensor]:
    """Intensity and value features for one head, each ``[B, D, Q]``."""
    d_e = head.d_e
    q = ng.matmul(embed(query_times, head), head.w)  # [B|1, Q, k]
    k = ng.matmul(embed(keys.times, head), head.v)  # [B, D|1, L, k]
    q4 = ng.expand_dims(q, 1)  # [B|1, 1, Q, k]
    s = scores(q4, k, d_e)  # [B, D|1, Q, L]
    mask = keys.mask[:, :, None, :]
    val = pool_value(s, ng.expand_dims(keys.values, 2), mask)  # [B, D, Q]

    if not int_path:
        return Tensor(np.ones(val.shape)), val

    u = ng.matmul(embed(union.times, head), head.v)  # [D|1, U, k]
    su = scores(q4, ng.expand_dims(u, 0), d_e)  # [B|1, D|1, Q, U]
    su = ng.where(union.mask[None, :, None, :], su, NEG_LARGE)
    if keys.novel.any():
        # times outside the union set join the denominator so intensity stays <= 1
        lead = np.broadcast_shapes(s.shape[:-1], su.shape[:-1])
        su = ng.concat(
            [
                ng.broadcast_to(su, lead + su.shape[-1:]),
                ng.broadcast_to(ng.where(keys.novel[:, :, None, :], s, NEG_LARGE), lead + s.shape[-1:]),
            ],
            axis=-1,
        )
    inten = pool_intensity(s, su, pooling, mask_d=mask)
    if inten.shape != val.shape:
        inten = ng.broadcast_to(inten, val.shape)
    return inten, val


def untan_batch(
    weights: UnTANWeights,
    query_times: np.ndarray,
    keys: KeySet,
    union: UnionSet,
    int_path: bool = True,
) -> Tensor:
    """Mixed UnTAN output ``[B, Q, J]``."""
    n_in = weights.n_inputs
    n_dims = ng._v(keys.values).shape[1]
    if n_dims != n_in:
        raise ValueError(f"UnTAN expects {n_in} input channels, got {n_dims}")
    per_head = []
    for head in weights.heads:
        inten, val = head_pathways(head, query_times, keys, union, weights.pooling_intensity, int_path)
        per_head.append(ng.stack([inten, val], axis=-1))  # [B, D, Q, 2]
    feats = ng.stack(per_head, axis=1)  # [B, H, D, Q, 2]
    feats = ng.transpose(feats, (0, 3, 1, 2, 4))  # [B, Q, H, D, 2]
    b, q = feats.shape[0], feats.shape[1]
    feats = ng.reshape(feats, (b, q, -1))
    return ng.linear(feats, weights.mixing)


# ---------------------------------------------------------------------------
# single-case API


def _as_channels(series) -> list[tuple[np.ndarray, np.ndarray]]:
    chans = getattr(series, "channels", series)
    out = []
    for ch in chans:
        if hasattr(ch, "times"):
            out.append((np.asarray(ch.times, dtype=np.float64), np.asarray(ch.values, dtype=np.float64)))
        else:
            t, x = ch
            out.append((np.asarray(t, dtype=np.float64), np.asarray(x, dtype=np.float64)))
    return out


def _warn_empty(channels) -> None:
    if any(t.size == 0 for t, _ in channels):
        warnings.warn("channel without observations: intensity and value are 0", UnobservedChannelWarning, stacklevel=3)


def embed_time(t: float, head: TimeEmbeddingHead) -> np.ndarray:
    return embed(np.asarray(float(t)), head).value


def attention_score(t_q: float, t_k, head: AttentionHead):
    """Score between one query and one key time (or a vector of key times)."""
    tk = np.atleast_1d(np.asarray(t_k, dtype=np.float64))
    q = ng.matmul(embed(np.array([float(t_q)]), head), head.w)
    k = ng.matmul(embed(tk, head), head.v)
    out = scores(q, k, head.d_e).value[0]
    return float(out[0]) if np.ndim(t_k) == 0 else out


def intensity(t_q: float, t_d, t_u, head: AttentionHead, pooling: str = "max") -> float:
    t_u = np.asarray(t_u, dtype=np.float64)
    if t_u.size == 0:
        raise ValueError("union time set is empty")
    chans = [(np.asarray(t_d, dtype=np.float64), np.zeros(np.size(t_d)))]
    _warn_empty(chans)
    union = UnionSet.from_lists([np.sort(t_u)])
    keys = pad_channels([chans], union)
    inten, _ = head_pathways(head, np.array([[float(t_q)]]), keys, union, pooling)
    return float(inten.value[0, 0, 0])


def value(t_q: float, t_d, x_d, head: AttentionHead) -> float:
    chans = [(np.asarray(t_d, dtype=np.float64), np.asarray(x_d, dtype=np.float64))]
    if chans[0][0].size != chans[0][1].size:
        raise ValueError("times and values differ in length")
    _warn_empty(chans)
    keys = pad_channels([chans])
    union = UnionSet(np.zeros((1, 1)), np.ones((1, 1), dtype=bool))
    _, val = head_pathways(head, np.array([[float(t_q)]]), keys, union, int_path=False)
    return float(val.value[0, 0, 0])


def untand(refs, series, weights: UnTANWeights, t_u: Sequence[np.ndarray], int_path: bool = True) -> np.ndarray:
    """UnTAN output at every reference time, shape [K, J]."""
    refs = np.asarray(refs, dtype=np.float64).reshape(-1)
    if refs.size == 0:
        raise ValueError("need at least one reference time")
    chans = _as_channels(series)
    if len(chans) != weights.n_inputs:
        raise ValueError(f"UnTAN expects {weights.n_inputs} input channels, got {len(chans)}")
    _warn_empty(chans)
    union = UnionSet.from_lists([np.asarray(t, dtype=np.float64) for t in t_u])
    keys = pad_channels([chans], union)
    return untan_batch(weights, refs[None, :], keys, union, int_path).value[0]


def untan(t_q: float, series, weights: UnTANWeights, t_u: Sequence[np.ndarray], int_path: bool = True) -> np.ndarray:
    return untand(np.array([float(t_q)]), series, weights, t_u, int_path)[0]
