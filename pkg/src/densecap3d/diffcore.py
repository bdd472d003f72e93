"""Minimal reverse-mode differentiation over dense numpy arrays.

Every op is a plain function taking and returning :class:`Tensor` values.
When at least one input requires a gradient and a :class:`GradientTape` is
active, the op appends a record to the tape; ``tape.backward(loss)`` then
replays those records in exact reverse order.

    with GradientTape() as tape:
        loss = cross_entropy(linear(x, w, b), 3)
    grads = tape.backward(loss, [w, b])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from densecap3d.errors import ArgumentError, DimensionError, NumericalError

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    previous = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """An n-d array value, optionally tracked for gradients.

    Tensors created directly by the user are *leaves*; tensors returned by
    ops are intermediate values.  Op results are never mutated in place.
    """

    __slots__ = ("data", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=default_dtype())
        if arr.size == 0 and arr.ndim > 0:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t):
    raise ArgumentError(f"expected a single-element tensor, got shape {t.shape}")


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values produced by {where}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


@dataclass
class _Outer:
    """Deferred ``a.T @ g`` for a weight gradient.

    Leaf weights used at many decode steps collect these and are reduced with
    one stacked product at the end of the backward pass.
    """

    a: np.ndarray
    g: np.ndarray

    def materialize(self) -> np.ndarray:
        return self.a.T @ self.g


class GradientTape:
    """Ordered record of executed ops; use as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def _record(self, out, inputs, backward):
        self.records.append(_Record(out, inputs, backward))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Reverse-mode gradients of scalar ``loss``.

        Returns a map from tensor to gradient array.  With ``params`` given,
        exactly those tensors are returned and the ones the loss does not
        depend on get zeros; otherwise every reached leaf is returned.
        """
        if loss.data.size != 1:
            raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._leaf:
            leaves[id(loss)] = loss
        elif not any(r.out is loss for r in reversed(self.records)):
            raise ArgumentError("loss was not produced by an op recorded on this tape")
        deferred: dict[int, list[_Outer]] = {}

        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if isinstance(gi, _Outer):
                    if inp._leaf:
                        deferred.setdefault(key, []).append(gi)
                        leaves[key] = inp
                        continue
                    gi = gi.materialize()
                if inp._leaf:
                    leaves[key] = inp
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi

        for key, outers in deferred.items():
            a = np.concatenate([o.a for o in outers], axis=0)
            g = np.concatenate([o.g for o in outers], axis=0)
            total = a.T @ g
            prev = grads.get(key)
            grads[key] = total if prev is None else prev + total

        if params is None:
            return {t: grads[k] for k, t in leaves.items()}
        out = {}
        for p in params:
            g = grads.get(id(p))
            out[p] = np.zeros_like(p.data) if g is None else g.astype(p.data.dtype, copy=False)
        return out


def backward(loss: Tensor, tape: GradientTape, params: Iterable[Tensor] | None = None):
    return tape.backward(loss, params)


def _active_tape() -> GradientTape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _result(data: np.ndarray, inputs: tuple, backward: Callable, where: str) -> Tensor:
    _check_finite(data, where)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._leaf = False
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape._record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of shape (m, k) or (k,) and b of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.data, b.data

    def back(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if av.ndim == 1:
                gb = _Outer(av[None, :], g[None, :])
            else:
                gb = _Outer(av, g)
        return ga, gb

    return _result(av @ bv, (a, b), back, "matmul")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[-1]).sum(axis=0)


def _check_binary(a: Tensor, b: Tensor, kind: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sb) == 1 and sa[-1:] == sb:
        return
    if len(sa) == 1 and sb[-1:] == sa:
        return
    raise DimensionError(f"{kind}: shapes {sa} and {sb} are not broadcastable")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    av, bv = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bv, a.shape) if a.requires_grad else None,
                _unbroadcast(g * av, b.shape) if b.requires_grad else None)

    return _result(av * bv, (a, b), back, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    v = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype)
    return _result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, sigmoid or tanh."""
    if kind in _UNARY:
        if b is not None:
            raise ArgumentError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ArgumentError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    raise ArgumentError(f"unknown elementwise kind {kind!r}")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ArgumentError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def back(g):
        pieces = np.split(g, bounds, axis=ax)
        return tuple(piece if p.requires_grad else None for p, piece in zip(parts, pieces))

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), back, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Slice ``x`` into consecutive chunks of the given sizes along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[ax]}")
    outs = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[ax] = slice(start, start + size)
        index = tuple(index)

        def back(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        outs.append(_result(x.data[index], (x,), back, "split"))
        start += size
    return outs


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(y, (x,), lambda g: (g.reshape(old),), "reshape")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _result(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),), "mean")


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` along axis 0."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ArgumentError(f"row index out of range for {x.shape[0]} rows")

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), back, "take_rows")


def index_add(x: Tensor, index, num_rows: int) -> Tensor:
    """Scatter-sum rows of ``x`` into ``num_rows`` output rows.

    Output row ``r`` is the sum of ``x[i]`` over all ``i`` with
    ``index[i] == r``; rows that receive nothing are zero.
    """
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise DimensionError("index_add: one target row per input row required")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ArgumentError("index_add: target row out of range")
    out = np.zeros((num_rows,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, idx, x.data)
    return _result(out, (x,), lambda g: (g[idx],), "index_add")


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Contract ``weights[..., m]`` with ``values[..., m, d]`` over ``m``."""
    weights, values = as_tensor(weights), as_tensor(values)
    if values.shape[:-1] != weights.shape:
        raise DimensionError(f"weighted_sum: {weights.shape} vs {values.shape}")
    w, v = weights.data, values.data

    def back(g):
        gw = np.einsum("...md,...d->...m", v, g) if weights.requires_grad else None
        gv = w[..., None] * g[..., None, :] if values.requires_grad else None
        return gw, gv

    return _result(np.einsum("...m,...md->...d", w, v), (weights, values), back, "weighted_sum")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), back, "softmax")


def log_softmax_array(v: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, target, mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over unmasked rows.

    ``logits`` is (V,) with an integer target, or (B, V) with B targets.
    ``mask`` (B booleans) drops rows; with every row dropped the loss is 0.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    lv = logits.data[None, :] if single else logits.data
    if lv.ndim != 2:
        raise DimensionError(f"cross_entropy expects (V,) or (B, V) logits, got {logits.shape}")
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if tgt.shape != (lv.shape[0],):
        raise DimensionError("cross_entropy: one target per row required")
    n_cls = lv.shape[1]
    keep = np.ones(len(tgt), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != tgt.shape:
        raise DimensionError("cross_entropy: mask length must match targets")
    bad = keep & ((tgt < 0) | (tgt >= n_cls))
    if bad.any():
        raise ArgumentError(f"target out of range for {n_cls} classes")
    count = int(keep.sum())
    safe = np.where(keep, tgt, 0)
    logp = log_softmax_array(lv, axis=1)
    rows = np.arange(len(tgt))
    picked = logp[rows, safe]
    loss = -(picked * keep).sum() / max(count, 1)

    def back(g):
        if count == 0:
            grad = np.zeros_like(lv)
        else:
            grad = np.exp(logp)
            grad[rows, safe] -= 1
            grad *= (keep / count)[:, None]
            grad *= g
        return (grad[0] if single else grad,)

    return _result(np.asarray(loss, dtype=lv.dtype), (logits,), back, "cross_entropy")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def gru_cell(x: Tensor, h_prev: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Standard gated recurrent update.

    ``params`` holds ``w_x`` (d_in, 3H), ``w_h`` (H, 3H), ``b_x`` and ``b_h``
    (3H,), with gate blocks ordered reset, update, candidate.  The reset gate
    scales the recurrent candidate term; ``h' = z*h + (1 - z)*h~``.
    """
    w_x, w_h = params["w_x"], params["w_h"]
    hidden = w_h.shape[0]
    if w_h.shape != (hidden, 3 * hidden) or w_x.shape[1] != 3 * hidden or h_prev.shape[-1] != hidden:
        raise DimensionError(
            f"gru_cell: w_x {w_x.shape}, w_h {w_h.shape}, h_prev {h_prev.shape} are inconsistent")
    gx = linear(x, w_x, params["b_x"])
    gh = linear(h_prev, w_h, params["b_h"])
    xr, xz, xn = split(gx, [hidden] * 3)
    hr, hz, hn = split(gh, [hidden] * 3)
    r = sigmoid(add(xr, hr))
    z = sigmoid(add(xz, hz))
    cand = tanh(add(xn, mul(r, hn)))
    return add(mul(z, h_prev), mul(sub(1.0, z), cand))


# ---------------------------------------------------------------------------
# initialization, gradient checking, optimizer


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(*shape: int, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
                   max_coords: int | None = 20, seed: int = 0, oracle_dtype=np.float64) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` recomputes a scalar from the current values of ``params``.  The
    reverse-mode gradients are taken at the parameters' own precision; the
    central differences are evaluated with the parameters and every tensor
    ``f`` creates promoted to ``oracle_dtype`` (``None`` keeps the working
    precision).  In float32 the rounding of ``f`` itself, divided by ``2 *
    eps``, would otherwise swamp small gradient coordinates.

    At most ``max_coords`` randomly chosen coordinates per parameter are
    probed (all of them when ``None``).  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    with GradientTape() as tape:
        loss = f()
    analytic = tape.backward(loss, params)
    rng = np.random.default_rng(seed)
    originals = [p.data for p in params]
    dtype = default_dtype() if oracle_dtype is None else np.dtype(oracle_dtype).type
    worst = 0.0
    try:
        with precision(dtype):
            for p in params:
                p.data = p.data.astype(np.result_type(p.data.dtype, dtype))
            for p in params:
                flat = p.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = rng.choice(flat.size, size=max_coords, replace=False)
                ga = analytic[p].reshape(-1)
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = float(f().data)
                    flat[i] = orig - eps
                    down = float(f().data)
                    flat[i] = orig
                    numeric = (up - down) / (2 * eps)
                    a = float(ga[i])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                    worst = max(worst, err)
    finally:
        for p, data in zip(params, originals):
            p.data = data
    return worst


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, weight_decay: float = 1e-5) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    Returns a new parameter dict; moment arrays in ``state`` are updated in place.
    Parameters missing from ``grads`` are left untouched.
    """
    if lr <= 0:
        raise ArgumentError(f"learning rate must be positive, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    new = dict(params)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        dt = p.data.dtype
        if weight_decay:
            g = g + dt.type(weight_decay) * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt.type(b1)
        m += dt.type(1 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1 - b2) * (g * g)
        denom = np.sqrt(v / dt.type(c2))
        denom += dt.type(state.eps)
        step = (m / dt.type(c1)) / denom
        step *= dt.type(lr)
        t = Tensor.__new__(Tensor)
        t.data = p.data - step
        t.requires_grad = p.requires_grad
        t.name = p.name
        t._leaf = True
        new[name] = t
    return new, state
