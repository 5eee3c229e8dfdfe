"""Dense float tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When gradient mode is on and any input
requires a gradient, the op records its inputs and a backward closure on the
output. Node ids come from a global counter, so sorting the reachable nodes by
id (descending) is a valid reverse topological order; :func:`backward` relies
on that instead of a persistent tape. A graph can be walked once: the closures
are released afterwards and a second walk raises :class:`GraphError`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12

_dtype = np.float64
_ids = itertools.count()
_mode = threading.local()


class TensorError(Exception):
    pass


class ShapeError(TensorError, ValueError):
    pass


class NumericError(TensorError, FloatingPointError):
    pass


class GraphError(TensorError, RuntimeError):
    pass


class DeterminismError(TensorError):
    pass


def set_default_dtype(dtype) -> None:
    """Switch storage precision for newly created tensors (float64 or float32)."""
    global _dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype = dtype.type


def default_dtype():
    return _dtype


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "op",
                 "_parents", "_backward", "_consumed")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_dtype, copy=True)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = next(_ids)
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def softmax(self):
        return softmax(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(out)):
        shapes = ", ".join(str(p.shape) for p in parents)
        raise NumericError(f"{op} produced non-finite values (input shapes {shapes})")
    t = Tensor.__new__(Tensor)
    t.data = out if out.dtype == _dtype else out.astype(_dtype)
    t.grad = None
    t.name = None
    t.node_id = next(_ids)
    t.op = op
    t._consumed = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


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


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: shapes {' and '.join(map(str, shapes))} do not broadcast") from None


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _node("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data
    return _node("reciprocal", out, (a,), lambda g: (-g * out * out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: (g * out,))


def log(a, eps: float = LOG_EPS) -> Tensor:
    """Natural log of ``max(a, eps)``; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, eps)
    live = a.data >= eps
    return _node("log", np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    live = np.ones(a.shape, dtype=bool)
    if lo is not None:
        live &= a.data >= lo
    if hi is not None:
        live &= a.data <= hi
    return _node("clamp", out, (a,), lambda g: (np.where(live, g, 0.0),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _node("gelu", out, (a,), backward)


# -- reductions / normalisation -------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node("softmax_lastdim", out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node("layer_norm", out, (x, gain, bias), backward)


# -- linear algebra / shape -----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node("matmul", ad @ bd, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _node("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _node("reshape", out, (a,), lambda g: (g.reshape(src),))


def index_select(a, index) -> Tensor:
    """Basic slicing and integer-array gathering (``a[index]``)."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} (shape {a.shape})") from None
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in parts)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node("slice", np.array(out, copy=True), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- backward ---------------------------------------------------------------

@dataclass
class Graph:
    """Nodes reachable from a loss, in reverse topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            if t._consumed:
                raise GraphError("graph already used for backward; rebuild it with a fresh forward pass")
            seen[t.node_id] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        return cls(sorted(seen.values(), key=lambda t: t.node_id, reverse=True))


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Graph()
    graph = Graph.from_loss(loss)
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in graph.nodes:
        g = pending.pop(node.node_id, None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg
        node._parents = ()
        node._backward = None
        node._consumed = True
    return graph


# -- parallel evaluation with fixed reduction order -------------------------

def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Map ``fn`` over ``items``; results come back in input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def fixed_order_sum(values: Iterable):
    """Left-to-right sum; the order is the index order of ``values``."""
    it = iter(values)
    total = next(it)
    for v in it:
        total = total + v
    return total


# -- finite differences -------------------------------------------------------

@dataclass
class CoordCheck:
    param: int
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class FiniteDiffReport:
    passed: bool
    max_rel_error: float
    tol: float
    checks: list[CoordCheck]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 16,
    seed: int = 0,
    abs_floor: float = 1e-6,
    roundoff_ulps: int = 64,
) -> FiniteDiffReport:
    """Compare backprop gradients of ``f()`` against central differences.

    Up to ``max_coords`` coordinates per parameter are sampled. The relative
    error is ``|a - n| / max(|a|, |n|, floor)``. The floor is the larger of
    ``abs_floor`` and ``noise / tol``, where ``noise`` is the smallest slope the
    difference quotient can resolve: ``roundoff_ulps`` units in the last place
    of ``f`` over ``2h``. Below it both numbers are rounding noise.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    for p in params:
        p.grad = None
    loss = f()
    with no_grad():
        again = f().item()
    if again != loss.item():
        raise DeterminismError(f"f is not deterministic: {loss.item()!r} vs {again!r}")
    backward(loss)
    noise = roundoff_ulps * float(np.spacing(abs(again))) / (2 * h)
    floor = max(abs_floor, noise / tol)

    rng = np.random.default_rng(seed)
    checks = []
    for pi, p in enumerate(params):
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > max_coords:
            picks = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for k in picks:
            orig = flat[k]
            with no_grad():
                flat[k] = orig + h
                up = f().item()
                flat[k] = orig - h
                down = f().item()
            flat[k] = orig
            num = (up - down) / (2 * h)
            ana = float(grad.reshape(-1)[k])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            checks.append(CoordCheck(pi, np.unravel_index(k, p.shape), ana, num, rel))
    worst = max((c.rel_error for c in checks), default=0.0)
    return FiniteDiffReport(worst < tol, worst, tol, checks)
