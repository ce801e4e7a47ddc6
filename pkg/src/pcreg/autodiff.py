"""Minimal reverse-mode differentiation over dense float64 arrays.

Operations are recorded only while a :class:`Tape` is active on the current
thread, so inference code pays no bookkeeping cost::

    with Tape() as tape:
        loss = mean(square(x))
    tape.backward(loss)
    x.grad

Broadcasting is limited to Python scalars; per-channel affine maps go
through the fused :func:`linear` and :func:`batch_norm` ops instead.
"""

from __future__ import annotations

import threading
from numbers import Number
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import ParameterError, ShapeError

EPS = 1e-12
MAX_RANK = 3

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array with an optional gradient slot."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._vjp: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not isinstance(other, Number):
            raise ShapeError("only division by a Python scalar is supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed operations for one backward pass.

    Nodes are appended as operations run, which is already a topological
    order.  A tape is single use: :meth:`backward` frees it.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Tensor) -> None:
        if self._closed:
            raise RuntimeError("tape already consumed by backward()")
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.data.size != 1:
            raise ParameterError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ParameterError("loss does not depend on any requires_grad tensor")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.is_leaf:
            _accumulate_leaf(loss, grads.pop(id(loss)))
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
        self.free()

    def free(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._vjp = None
        self.nodes = []
        self._closed = True


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        tape.record(out)
    return out


# kink bookkeeping for gradient checks ---------------------------------------


class KinkMonitor:
    """Tracks the smallest distance to a non-smooth point (ReLU 0, max ties).

    Used by gradient checks to confirm a finite-difference step cannot cross
    a kink.
    """

    def __init__(self):
        self.min_margin = np.inf

    def __enter__(self) -> "KinkMonitor":
        _local.monitor = self
        return self

    def __exit__(self, *exc) -> None:
        _local.monitor = None

    def note(self, margin: float) -> None:
        self.min_margin = min(self.min_margin, float(margin))


def _monitor() -> KinkMonitor | None:
    return getattr(_local, "monitor", None)


# element-wise ---------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        return _make(a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        return _make(a.data - b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,))
    b = as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    mon = _monitor()
    if mon is not None and a.data.size:
        mon.note(np.min(np.abs(a.data)))
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(ad)
    return _make(y, (a,), lambda g: (g / ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; the gradient is zero outside the interval."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# linear algebra / structure -------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` (M, in), ``weight`` (out, in), ``bias`` (out,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is None:
        return _make(y, (x, weight), lambda g: (g @ wd, g.T @ xd))
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    y = y + bias.data
    return _make(y, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, vjp)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop], (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather_rows(a, idx) -> Tensor:
    """``a[idx]`` along the first axis; ``idx`` is an integer array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        flat = idx.reshape(-1)
        rows = g.reshape((flat.size, -1))
        # scatter-add as a sparse product; far faster than ufunc.at for repeats
        scatter = sparse.csr_matrix(
            (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(shape[0], flat.size)
        )
        return (np.asarray(scatter @ rows).reshape(shape),)

    return _make(a.data[idx], (a,), vjp)


# reductions -----------------------------------------------------------------


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(np.sum(a.data, axis=ax), (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def max_reduce(a, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient flows to the first maximiser."""
    a = as_tensor(a)
    ax = axis % a.ndim
    arg = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)
    mon = _monitor()
    if mon is not None and a.shape[ax] > 1:
        top2 = -np.partition(-a.data, 1, axis=ax)
        first, second = np.take(top2, 0, axis=ax), np.take(top2, 1, axis=ax)
        # ties between clamped zeros cannot break without crossing a ReLU kink,
        # which the ReLU margin already covers
        live = first != 0.0
        if np.any(live):
            mon.note(np.min((first - second)[live]))
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(out, (a,), vjp)


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis."""
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (a,), vjp)


def norm_last(a) -> Tensor:
    """Euclidean norm along the last axis; gradient at the zero vector is 0."""
    a = as_tensor(a)
    ad = a.data
    n = np.sqrt(np.sum(ad * ad, axis=-1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where((n > 0)[..., None], ad / safe[..., None], 0.0) * g[..., None],)

    return _make(n, (a,), vjp)


def safe_normalize(a, eps: float = EPS) -> Tensor:
    """``a / ||a||`` along the last axis, or the zero vector when ``||a|| < eps``."""
    a = as_tensor(a)
    ad = a.data
    n = np.sqrt(np.sum(ad * ad, axis=-1, keepdims=True))
    ok = n >= eps
    safe = np.where(ok, n, 1.0)
    u = np.where(ok, ad / safe, 0.0)

    def vjp(g):
        proj = np.sum(u * g, axis=-1, keepdims=True)
        return (np.where(ok, (g - u * proj) / safe, 0.0),)

    return _make(u, (a,), vjp)


def batch_norm(x, gamma, beta, eps: float = 1e-5, stats=None):
    """Per-channel normalisation over the rows of ``x`` (M, C).

    With ``stats=None`` batch statistics are used and differentiated through;
    otherwise ``stats=(mean, var)`` are treated as constants.  Returns
    ``(y, batch_mean, batch_var)``; the batch moments are ``None`` when fixed
    statistics are supplied.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd, gd = x.data, gamma.data
    if stats is None:
        mu = np.mean(xd, axis=0)
        centered = xd - mu
        var = np.einsum("ij,ij->j", centered, centered) / xd.shape[0]
    else:
        mu, var = (np.asarray(s, dtype=np.float64) for s in stats)
        centered = xd - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    del centered
    y = xhat * gd + beta.data
    m = xd.shape[0]

    if stats is None:

        def vjp(g):
            dgamma = np.sum(g * xhat, axis=0)
            dbeta = np.sum(g, axis=0)
            dx = (gd * inv / m) * (m * g - dbeta - xhat * dgamma)
            return (dx, dgamma, dbeta)

        return _make(y, (x, gamma, beta), vjp), mu, var

    def vjp_fixed(g):
        return (g * (gd * inv), np.sum(g * xhat, axis=0), np.sum(g, axis=0))

    return _make(y, (x, gamma, beta), vjp_fixed), None, None


# gradient checking -----------------------------------------------------------


def grad_check(f: Callable[..., Tensor], point, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``point`` is a tensor or a sequence of tensors passed positionally to
    ``f``; numeric derivatives are central differences with the given step.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    saved = [(p.requires_grad, p.grad) for p in points]
    for p in points:
        p.data = np.array(p.data, dtype=np.float64)
        p.requires_grad = True
        p.grad = None
    try:
        with Tape() as tape:
            out = f(*points)
        tape.backward(out)
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in points]
        worst = 0.0
        for p, a in zip(points, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(*points).data)
                flat[i] = orig - step
                fm = float(f(*points).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                worst = max(worst, abs(a.reshape(-1)[i] - num) / max(1.0, abs(num)))
        return worst
    finally:
        for p, (rg, g) in zip(points, saved):
            p.requires_grad, p.grad = rg, g
