"""Define-by-run reverse-mode autodiff over numpy arrays.

Ops executed while a :class:`Tape` is active, on at least one tensor with
``requires_grad``, are appended to that tape together with a closure that
maps the output cotangent to input cotangents. ``Tape.backward`` walks the
records once in reverse insertion order.

Values are float32 by default; :func:`default_dtype` switches to float64 for
the finite-difference shadow evaluation used by :func:`gradcheck`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

_local = threading.local()


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _dtype():
    return getattr(_local, "dtype", np.float32)


def _debug() -> bool:
    return getattr(_local, "debug", False)


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Raise FloatingPointError as soon as any op produces a NaN/Inf."""
    prev = _debug()
    _local.debug = enabled
    try:
        yield
    finally:
        _local.debug = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype():
            arr = arr.astype(_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.grad: np.ndarray | None = None
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered op records; confined to the thread that created it."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        out.node = len(self.records)
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor, retain: bool = False) -> dict:
        """Return ``{leaf_tensor: gradient}`` for every requires_grad leaf reached from ``loss``.

        Also stores the result on each leaf's ``.grad``.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or loss.node is None or loss.node >= len(self.records) \
                or self.records[loss.node][0] is not loss:
            raise ValueError("loss was not produced on this tape")
        if self._consumed:
            raise RuntimeError("tape already consumed; pass retain=True to reuse")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.records[: loss.node + 1]):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    leaves.setdefault(key, inp)
        result = {}
        for key, g in grads.items():
            if key in produced or key not in leaves:
                continue
            t = leaves[key]
            t.grad = g.astype(t.data.dtype, copy=False)
            result[t] = t.grad
        if not retain:
            self._consumed = True
        return result


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _debug() and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by an autodiff op")
    needs = any(t.requires_grad for t in inputs)
    tapes = _tapes()
    out = Tensor(out_data, requires_grad=needs and bool(tapes))
    if out.requires_grad:
        tapes[-1].record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


OPS: dict[str, Callable] = {}


def _register(name):
    def deco(fn):
        OPS[name] = fn
        return fn
    return deco


def op_set() -> tuple[str, ...]:
    """Names of every differentiable op the substrate provides."""
    return tuple(sorted(OPS))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

@_register("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


@_register("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


@_register("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


@_register("div")
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


@_register("scale")
def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,))


@_register("square")
def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


@_register("abs")
def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


@_register("sqrt")
def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


@_register("exp")
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


@_register("log")
def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0, -x)).astype(x.dtype, copy=False)


@_register("sigmoid")
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1 - out),))


@_register("tanh")
def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1 - out * out),))


@_register("silu")
def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _record(a.data * s, (a,), lambda g: (g * (s * (1 + a.data * (1 - s))),))


@_register("clamp")
def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero wherever the clip is active."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    return _record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

@_register("reshape")
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


@_register("transpose")
def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


@_register("getitem")
def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(out, copy=True), (a,), back)


@_register("concat")
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


@_register("stack")
def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    n = len(tensors)
    return _record(out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


@_register("sum")
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), back)


@_register("mean")
def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.data.dtype),)

    return _record(np.asarray(out, dtype=a.data.dtype), (a,), back)


# ---------------------------------------------------------------------------
# linear algebra and network layers
# ---------------------------------------------------------------------------

@_register("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, (a, b), back)


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    return as_strided(xp, shape=(b, c, ho, wo, k, k),
                      strides=(sb, sc, sh * stride, sw * stride, sh, sw), writeable=False)


@_register("conv2d")
def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over NCHW input with an (O, C, k, k) kernel and zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(np.ascontiguousarray(xp), k, stride, ho, wo)
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * k * k)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        out += b.data
    out = out.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        gy = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gy.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gy @ wmat).reshape(bsz, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, gy.sum(axis=0)

    return _record(np.ascontiguousarray(out), inputs, back)


@_register("upsample_nearest")
def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    b, c, h, w = x.shape
    return _record(out, (x,),
                   lambda g: (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),))


@_register("group_norm")
def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    b, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat
    inputs = [x]
    if weight is not None:
        weight = as_tensor(weight)
        out = out * weight.data.reshape(bshape)
        inputs.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(bshape)
        inputs.append(bias)
    red = (0,) + tuple(range(2, x.ndim))

    def back(g):
        grads = []
        gxhat = g * weight.data.reshape(bshape) if weight is not None else g
        gh = gxhat.reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
        grads.append(gx.reshape(x.shape))
        if weight is not None:
            grads.append((g * xhat).sum(axis=red))
        if bias is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _record(out.astype(x.data.dtype, copy=False), tuple(inputs), back)


@_register("custom")
def custom(forward: Callable, backward: Callable, *inputs) -> Tensor:
    """Inject an externally differentiated function.

    ``forward(*arrays) -> (out_array, ctx)``; ``backward(ctx, g) -> tuple`` of
    input gradients (``None`` for inputs that get no gradient).
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    out, ctx = forward(*(t.data for t in inputs))
    return _record(np.asarray(out, dtype=_dtype()), inputs, lambda g: tuple(backward(ctx, g)))


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------

def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], wrt: int,
                   eps: float = 1e-3, coords: Iterable[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. ``arrays[wrt]``, evaluated in float64."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[wrt]
    grad = np.zeros_like(target)
    it = coords if coords is not None else np.ndindex(*target.shape)
    with default_dtype(np.float64):
        for idx in it:
            old = target[idx]
            target[idx] = old + eps
            fp = float(fn(*[Tensor(a) for a in base]).data)
            target[idx] = old - eps
            fm = float(fn(*[Tensor(a) for a in base]).data)
            target[idx] = old
            grad[idx] = (fp - fm) / (2 * eps)
    return grad


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    with default_dtype(np.float64):
        ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = fn(*ts)
        grads = tape.backward(loss)
    return [grads.get(t, np.zeros_like(t.data)) for t in ts]


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-3,
              atol: float = 1e-4, rtol: float = 1e-2) -> tuple[bool, float]:
    """Compare analytic and central-difference gradients for every input coordinate.

    Passes when ``|a - n| <= max(atol, rtol * |n|)`` everywhere. Returns
    ``(ok, worst_violation_ratio)``.
    """
    analytic = analytic_grad(fn, arrays)
    worst = 0.0
    for i, ga in enumerate(analytic):
        gn = numerical_grad(fn, arrays, i, eps)
        tol = np.maximum(atol, rtol * np.abs(gn))
        worst = max(worst, float(np.max(np.abs(ga - gn) / tol)) if ga.size else 0.0)
    return worst <= 1.0, worst
