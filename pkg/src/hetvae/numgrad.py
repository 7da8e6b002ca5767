"""Small reverse-mode differentiation core over float64 numpy arrays.

Only the operations the model needs are provided. Every op accepts either a
:class:`Tensor` or anything ``np.asarray`` understands and returns a
:class:`Tensor`. When a :class:`GradTape` is active and at least one input is
tracked, the op is recorded together with its vector-Jacobian product.

    >>> params = ParamStore()
    >>> params.add("x", np.array(2.0))
    >>> with GradTape() as tape:
    ...     p = tape.watch(params)
    ...     loss = mul(p["x"], p["x"])
    >>> backward(tape, loss)["x"]
    array(4.)
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

# Stand-in for -inf inside masked pooling; exp() of it relative to any real
# score underflows to exactly 0 without producing NaN gradients.
NEG_LARGE = -1.0e30


class NumgradError(ValueError):
    """Contract violation inside the differentiation core."""


class EmptyReductionError(NumgradError):
    pass


class Tensor:
    __slots__ = ("value", "tracked", "name")

    def __init__(self, value, tracked: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tracked = tracked
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __float__(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


class GradTape:
    """Records differentiable operations in evaluation order."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self.leaves: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def watch(self, params: "ParamStore") -> dict[str, Tensor]:
        """Return tensors for every parameter; trainable ones are tracked."""
        view = {}
        for name, arr in params.items():
            trainable = params.is_trainable(name)
            t = Tensor(arr, tracked=trainable, name=name)
            if trainable:
                self.leaves[name] = t
            else:
                self._frozen.add(name)
            view[name] = t
        return view


_local = threading.local()


def _tape_stack() -> list[GradTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _v(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tracked(x) -> bool:
    return isinstance(x, Tensor) and x.tracked


def _emit(value: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    """Wrap a forward value; record ``vjp`` when any input needs a gradient."""
    tape = _active_tape()
    if tape is not None and any(_tracked(i) for i in inputs):
        out = Tensor(value, tracked=True)
        tape.records.append((out, inputs, vjp))
        return out
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def constant(x) -> Tensor:
    return Tensor(_v(x))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    av, bv = _v(a), _v(b)
    return _emit(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = _v(a), _v(b)
    return _emit(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    av, bv = _v(a), _v(b)
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    av, bv = _v(a), _v(b)
    if np.any(bv == 0):
        raise NumgradError("division by zero")
    out = av / bv
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Tensor:
    return _emit(-_v(a), (a,), lambda g: (-g,))


def square(a) -> Tensor:
    av = _v(a)
    return _emit(av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a) -> Tensor:
    av = _v(a)
    if np.any(av < 0):
        raise NumgradError("sqrt of a negative entry")
    out = np.sqrt(av)
    return _emit(out, (a,), lambda g: (g / (2.0 * out),))


def log(a) -> Tensor:
    av = _v(a)
    if np.any(av <= 0):
        raise NumgradError("log of a non-positive entry")
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def _softplus(x: np.ndarray) -> np.ndarray:
    # x > 30: log1p(exp(x)) == x to double precision
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def primitive(kind: str, a) -> Tensor:
    """Elementwise ``sin``, ``exp``, ``softplus`` or ``relu``."""
    av = _v(a)
    if kind == "sin":
        return _emit(np.sin(av), (a,), lambda g: (g * np.cos(av),))
    if kind == "exp":
        out = np.exp(av)
        return _emit(out, (a,), lambda g: (g * out,))
    if kind == "softplus":
        return _emit(_softplus(av), (a,), lambda g: (g * _sigmoid(av),))
    if kind == "relu":
        return _emit(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))
    raise NumgradError(f"unknown primitive {kind!r}")


def sin(a) -> Tensor:
    return primitive("sin", a)


def exp(a) -> Tensor:
    return primitive("exp", a)


def softplus(a) -> Tensor:
    return primitive("softplus", a)


def relu(a) -> Tensor:
    return primitive("relu", a)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; the mask is not differentiated."""
    m = np.asarray(mask, dtype=bool)
    av, bv = _v(a), _v(b)
    out = np.where(m, av, bv)
    return _emit(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(m, g, 0.0), av.shape),
            _unbroadcast(np.where(m, 0.0, g), bv.shape),
        ),
    )


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    av = _v(a)
    return _emit(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(_v(a), axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a) -> Tensor:
    n = _v(a).ndim
    axes = list(range(n))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def expand_dims(a, axis: int) -> Tensor:
    av = _v(a)
    return _emit(np.expand_dims(av, axis), (a,), lambda g: (g.reshape(av.shape),))


def broadcast_to(a, shape) -> Tensor:
    av = _v(a)
    return _emit(np.broadcast_to(av, shape).copy(), (a,), lambda g: (_unbroadcast(g, av.shape),))


def getitem(a, index) -> Tensor:
    av = _v(a)

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(av[index]), (a,), vjp)


def concat(items, axis: int = -1) -> Tensor:
    vals = [_v(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit(out, tuple(items), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(items, axis: int = 0) -> Tensor:
    vals = [_v(x) for x in items]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _emit(out, tuple(items), vjp)


# ---------------------------------------------------------------------------
# contractions


def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` accumulated in a fixed order over the inner index.

    Every output entry is summed sequentially over the contracted index, so a
    row's value never depends on how many other rows share the call. BLAS
    kernels do not guarantee that.
    """
    n = a.shape[-1]
    if b.shape[-2] != n:
        raise NumgradError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if n == 0:
        shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
        return np.zeros(shape)
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for k in range(1, n):
        out += a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting over leading axes."""
    av, bv = _v(a), _v(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise NumgradError(f"matmul needs ndim >= 2, got {av.shape} and {bv.shape}")
    out = _rowwise_matmul(av, bv)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit(out, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` over the last axis of ``x``."""
    xv, wv = _v(x), _v(weight)
    if wv.ndim != 2 or xv.ndim < 1 or xv.shape[-1] != wv.shape[0]:
        raise NumgradError(f"linear: input shape {xv.shape} does not match weight shape {wv.shape}")
    if bias is not None and _v(bias).shape != (wv.shape[1],):
        raise NumgradError(f"linear: bias shape {_v(bias).shape} does not match weight shape {wv.shape}")
    lead = xv.shape[:-1]
    flat = xv.reshape(-1, wv.shape[0])
    out = _rowwise_matmul(flat, wv)
    if bias is not None:
        out = out + _v(bias)
    out = out.reshape(lead + (wv.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, wv.shape[1])
        gx = (g2 @ wv.T).reshape(xv.shape)
        gw = flat.T @ g2
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, vjp)


# ---------------------------------------------------------------------------
# reductions


def reduce(kind: str, a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """``sum``, ``max`` or ``logsumexp`` along ``axis`` (all axes if None)."""
    av = _v(a)
    axes = tuple(range(av.ndim)) if axis is None else (axis % max(av.ndim, 1),)
    if av.ndim and any(av.shape[ax] == 0 for ax in axes):
        raise EmptyReductionError(f"{kind} over an empty axis of shape {av.shape}")

    def expand(g):
        return g if keepdims else np.expand_dims(g, axes)

    if kind == "sum":
        out = av.sum(axis=axis, keepdims=keepdims)
        return _emit(out, (a,), lambda g: (np.broadcast_to(expand(g), av.shape).copy(),))

    if kind == "max":
        if axis is None:
            flat_idx = int(np.argmax(av))
            out = av.reshape(-1)[flat_idx]
            if keepdims:
                out = np.reshape(out, (1,) * av.ndim)

            def vjp_all(g):
                full = np.zeros(av.size)
                full[flat_idx] = float(np.sum(g))
                return (full.reshape(av.shape),)

            return _emit(np.asarray(out), (a,), vjp_all)
        ax = axes[0]
        idx = np.expand_dims(np.argmax(av, axis=ax), ax)  # argmax picks the lowest index on ties
        out = np.take_along_axis(av, idx, axis=ax)
        if not keepdims:
            out = np.squeeze(out, axis=ax)

        def vjp_max(g):
            full = np.zeros_like(av)
            np.put_along_axis(full, idx, expand(g), axis=ax)
            return (full,)

        return _emit(out, (a,), vjp_max)

    if kind == "logsumexp":
        m = np.max(av, axis=axis, keepdims=True)
        e = np.exp(av - m)
        s = e.sum(axis=axis, keepdims=True)
        out_k = m + np.log(s)
        out = out_k if keepdims else np.squeeze(out_k, axis=axes)
        weights = e / s
        return _emit(out, (a,), lambda g: (expand(g) * weights,))

    raise NumgradError(f"unknown reduction {kind!r}")


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return reduce("sum", a, axis, keepdims)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax as a single differentiable node."""
    av = _v(a)
    e = np.exp(av - np.max(av, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), vjp)


# ---------------------------------------------------------------------------
# gradients


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for every trainable parameter on ``tape``.

    Parameters the loss does not depend on receive zero gradients.
    """
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise NumgradError(f"backward needs a scalar loss, got {shape}")
    adj: dict[int, np.ndarray] = {}
    if loss.tracked:
        adj[id(loss)] = np.ones_like(loss.value)
    for out, inputs, vjp in reversed(tape.records):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not _tracked(inp):
                continue
            key = id(inp)
            prev = adj.get(key)
            adj[key] = gi if prev is None else prev + gi
    grads = {}
    for name in sorted(tape.leaves):
        leaf = tape.leaves[name]
        g = adj.get(id(leaf))
        grads[name] = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return grads


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints


class ParamStore:
    """Named float64 arrays; iteration is lexicographic by name."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.array(value, dtype=np.float64)
        self._trainable[name] = trainable

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        value = np.array(value, dtype=np.float64)
        if value.shape != self._arrays[name].shape:
            raise NumgradError(f"parameter {name!r}: shape {value.shape} != {self._arrays[name].shape}")
        self._arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._arrays))

    def names(self) -> list[str]:
        return sorted(self._arrays)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in sorted(self._arrays):
            yield name, self._arrays[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, trainable: bool) -> None:
        self._trainable[name] = trainable

    def trainable_names(self) -> list[str]:
        return [n for n in sorted(self._arrays) if self._trainable[n]]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self._arrays[n] for n in sorted(self._arrays)}

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, arr in self.items():
            other.add(name, arr.copy(), self._trainable[name])
        return other

    def size(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: ParamStore, **hyper) -> "AdamState":
        state = cls(**hyper)
        for name in params.trainable_names():
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        return state

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": {k: _array_json(a) for k, a in sorted(self.m.items())},
            "v": {k: _array_json(a) for k, a in sorted(self.v.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AdamState":
        return cls(
            lr=obj["lr"],
            beta1=obj["beta1"],
            beta2=obj["beta2"],
            eps=obj["eps"],
            step=obj["step"],
            m={k: _array_from_json(a) for k, a in obj["m"].items()},
            v={k: _array_from_json(a) for k, a in obj["v"].items()},
        )


def adam_step(state: AdamState, params: ParamStore, grads: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    names = params.trainable_names()
    for name in names:
        if name not in grads:
            raise NumgradError(f"adam_step: no gradient for parameter {name!r}")
        if np.shape(grads[name]) != params[name].shape:
            raise NumgradError(
                f"adam_step: gradient for {name!r} has shape {np.shape(grads[name])}, "
                f"parameter has {params[name].shape}"
            )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in names:
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        params[name] = params[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def value_and_grad(objective: Callable[[Mapping[str, Tensor]], Tensor], params: ParamStore):
    with GradTape() as tape:
        view = tape.watch(params)
        loss = objective(view)
    return float(loss.value), backward(tape, loss)


def finite_diff_check(
    objective: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParamStore,
    step: float = 1e-5,
) -> float:
    """Max over trainable entries of |analytic - central difference| / max(1, |a|, |n|)."""
    value, grads = value_and_grad(objective, params)
    if not math.isfinite(value):
        raise NumgradError(f"objective is not finite: {value}")
    probe = {name: arr.copy() for name, arr in params.items()}

    def evaluate() -> float:
        out = float(_v(objective(probe)))
        if not math.isfinite(out):
            raise NumgradError(f"objective is not finite: {out}")
        return out

    worst = 0.0
    for name in params.trainable_names():
        arr = probe[name]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate()
            flat[i] = orig - step
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = float(grads[name].reshape(-1)[i])
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst


def _array_json(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]}


def _array_from_json(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def save_checkpoint(path, params: ParamStore, meta: dict) -> None:
    """Write parameters and ``meta`` as one JSON document."""
    doc = {}
    for name, arr in params.items():
        entry = _array_json(arr)
        if not params.is_trainable(name):
            entry["trainable"] = False
        doc[name] = entry
    doc["meta"] = meta
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    meta = doc.pop("meta", {})
    params = ParamStore()
    for name in sorted(doc):
        entry = doc[name]
        params.add(name, _array_from_json(entry), entry.get("trainable", True))
    return params, meta
