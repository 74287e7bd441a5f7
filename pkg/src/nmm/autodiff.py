"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every :class:`Tensor` records the tensors it was computed from together with a
vector-Jacobian product for each of them.  :func:`backward` walks that graph in
reverse topological order.  Scalars are 0-d arrays, so a node holding a single
real number is just the smallest case of the same machinery.

The module-level math functions (``exp``, ``where``, ``asin`` ...) accept plain
floats and arrays as well as tensors.  Code written against them runs unchanged
in a fast numpy-only mode and in a recording mode used for training.

Piecewise functions built with :func:`where` differentiate the branch that was
selected.  Callers that split at a breakpoint use ``x <= breakpoint`` for the
left branch, so at a boundary the left-branch derivative is the one taken.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import signal, special

_counter = itertools.count()


class NonFiniteGradientError(FloatingPointError):
    """A NaN or Inf showed up while propagating gradients."""

    def __init__(self, node: "Tensor", parent: "Tensor"):
        self.node = node
        self.parent = parent
        super().__init__(
            f"non-finite gradient flowing from node #{node.id} ({node.op}"
            f"{', ' + node.name if node.name else ''}) into node #{parent.id} "
            f"({parent.op}{', ' + parent.name if parent.name else ''})"
        )


class Tensor:
    __slots__ = ("value", "grad", "parents", "op", "name", "requires_grad", "id")
    __array_priority__ = 1000.0

    def __init__(self, value, requires_grad: bool = False, name: str = "",
                 parents: tuple = (), op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.op = op
        self.name = name
        self.requires_grad = requires_grad or bool(parents)
        self.id = next(_counter)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __len__(self) -> int:
        return len(self.value)

    # arithmetic
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # comparisons produce plain boolean arrays, never graph nodes
    def __lt__(self, other):
        return self.value < _raw(other)

    def __le__(self, other):
        return self.value <= _raw(other)

    def __gt__(self, other):
        return self.value > _raw(other)

    def __ge__(self, other):
        return self.value >= _raw(other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raw(x):
    return x.value if isinstance(x, Tensor) else x


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x) -> np.ndarray:
    """Strip the graph and return the underlying array (or float)."""
    return x.value if isinstance(x, Tensor) else x


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(value, op: str, links: Iterable[tuple[object, Callable]]) -> Tensor:
    parents = tuple((p, fn) for p, fn in links if isinstance(p, Tensor) and p.requires_grad)
    return Tensor(value, parents=parents, op=op)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    if not _any_tensor(a, b):
        return a + b
    av, bv = _raw(a), _raw(b)
    out = av + bv
    sa, sb = np.shape(av), np.shape(bv)
    return _node(out, "add", [(a, lambda g: _unbroadcast(g, sa)),
                              (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b):
    if not _any_tensor(a, b):
        return a - b
    av, bv = _raw(a), _raw(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _node(av - bv, "sub", [(a, lambda g: _unbroadcast(g, sa)),
                                  (b, lambda g: -_unbroadcast(g, sb))])


def mul(a, b):
    if not _any_tensor(a, b):
        return a * b
    av, bv = _raw(a), _raw(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _node(av * bv, "mul", [(a, lambda g: _unbroadcast(g * bv, sa)),
                                  (b, lambda g: _unbroadcast(g * av, sb))])


def div(a, b):
    if not _any_tensor(a, b):
        return a / b
    av, bv = _raw(a), _raw(b)
    out = av / bv
    sa, sb = np.shape(av), np.shape(bv)
    return _node(out, "div", [(a, lambda g: _unbroadcast(g / bv, sa)),
                              (b, lambda g: _unbroadcast(-g * out / bv, sb))])


def neg(a):
    if not isinstance(a, Tensor):
        return -a
    return _node(-a.value, "neg", [(a, lambda g: -g)])


def power(a, exponent: float):
    if isinstance(exponent, Tensor):
        raise TypeError("tensor exponents are not supported")
    if not isinstance(a, Tensor):
        return a ** exponent
    av = a.value
    return _node(av ** exponent, "pow",
                 [(a, lambda g: g * exponent * av ** (exponent - 1))])


def _unary(x, op: str, fwd, dfwd):
    if not isinstance(x, Tensor):
        return fwd(x)
    xv = x.value
    out = fwd(xv)
    return _node(out, op, [(x, lambda g: g * dfwd(xv, out))])


def exp(x):
    return _unary(x, "exp", np.exp, lambda v, out: out)


def log(x):
    return _unary(x, "log", np.log, lambda v, out: 1.0 / v)


def sqrt(x):
    return _unary(x, "sqrt", np.sqrt, lambda v, out: 0.5 / out)


def sin(x):
    return _unary(x, "sin", np.sin, lambda v, out: np.cos(v))


def cos(x):
    return _unary(x, "cos", np.cos, lambda v, out: -np.sin(v))


def tanh(x):
    return _unary(x, "tanh", np.tanh, lambda v, out: 1.0 - out * out)


def asin(x):
    return _unary(x, "asin", np.arcsin, lambda v, out: 1.0 / np.sqrt(1.0 - v * v))


def absolute(x):
    return _unary(x, "abs", np.abs, lambda v, out: np.sign(v))


def erf(x):
    return _unary(x, "erf", special.erf,
                  lambda v, out: (2.0 / np.sqrt(np.pi)) * np.exp(-v * v))


def sigmoid(x):
    return _unary(x, "sigmoid", special.expit, lambda v, out: out * (1.0 - out))


def softplus(x):
    return _unary(x, "softplus", lambda v: np.logaddexp(0.0, v),
                  lambda v, out: special.expit(v))


def gelu(x):
    """Exact (erf-based) GELU."""
    xv = _raw(x)
    cdf = 0.5 * (1.0 + special.erf(xv / np.sqrt(2.0)))
    out = xv * cdf
    if not isinstance(x, Tensor):
        return out
    return _node(out, "gelu", [(x, lambda g: g * (cdf + xv * np.exp(-0.5 * xv * xv)
                                                  / np.sqrt(2.0 * np.pi)))])


def clip(x, lo, hi):
    """Clamp; the gradient passes through only where the input was inside."""
    if not isinstance(x, Tensor):
        return np.clip(x, lo, hi)
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return _node(np.clip(xv, lo, hi), "clip", [(x, lambda g: g * inside)])


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    if not _any_tensor(a, b):
        return np.where(cond, a, b)
    av, bv = _raw(a), _raw(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _node(np.where(cond, av, bv), "where",
                 [(a, lambda g: _unbroadcast(np.where(cond, g, 0.0), sa)),
                  (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), sb))])


# ---------------------------------------------------------------- reductions / shape

def tsum(x, axis=None, keepdims=False):
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _node(np.sum(x.value, axis=axis, keepdims=keepdims), "sum", [(x, vjp)])


def mean(x, axis=None, keepdims=False):
    if not isinstance(x, Tensor):
        return np.mean(x, axis=axis, keepdims=keepdims)
    n = x.value.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape):
    if not isinstance(x, Tensor):
        return np.reshape(x, shape)
    old = x.shape
    return _node(x.value.reshape(shape), "reshape", [(x, lambda g: g.reshape(old))])


def transpose(x, axes=None):
    if not isinstance(x, Tensor):
        return np.transpose(x, axes)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.value, axes), "transpose",
                 [(x, lambda g: np.transpose(g, inverse))])


def swapaxes(x, a1: int, a2: int):
    if not isinstance(x, Tensor):
        return np.swapaxes(x, a1, a2)
    return _node(np.swapaxes(x.value, a1, a2), "swapaxes",
                 [(x, lambda g: np.swapaxes(g, a1, a2))])


def getitem(x, index):
    if not isinstance(x, Tensor):
        return x[index]
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return _node(x.value[index], "getitem", [(x, vjp)])


def concat(xs: Sequence, axis: int = 0):
    if not _any_tensor(*xs):
        return np.concatenate(xs, axis=axis)
    vals = [np.asarray(_raw(x), dtype=np.float64) for x in xs]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def make(i):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return _node(np.concatenate(vals, axis=axis), "concat",
                 [(x, make(i)) for i, x in enumerate(xs)])


def stack(xs: Sequence, axis: int = 0):
    if not _any_tensor(*xs):
        return np.stack(xs, axis=axis)
    vals = [np.asarray(_raw(x), dtype=np.float64) for x in xs]

    def make(i):
        return lambda g: np.take(g, i, axis=axis)

    return _node(np.stack(vals, axis=axis), "stack",
                 [(x, make(i)) for i, x in enumerate(xs)])


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # stacked-by-matrix products collapse to one GEMM
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return np.matmul(a, b)


def matmul(a, b):
    if not _any_tensor(a, b):
        return _mm(np.asarray(a), np.asarray(b))
    av, bv = np.asarray(_raw(a)), np.asarray(_raw(b))
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")
    sa, sb = av.shape, bv.shape

    def grad_b(g):
        if bv.ndim == 2 and av.ndim > 2:
            return av.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
        return _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), sb)

    return _node(_mm(av, bv), "matmul",
                 [(a, lambda g: _unbroadcast(_mm(g, np.swapaxes(bv, -1, -2)), sa)),
                  (b, grad_b)])


def _rowsum(a: np.ndarray, axis: int) -> np.ndarray:
    # a GEMV against ones beats a ufunc reduction over the contiguous last axis
    if axis in (-1, a.ndim - 1) and a.ndim >= 2:
        return a @ np.ones((a.shape[-1], 1))
    return np.sum(a, axis=axis, keepdims=True)


def softmax(x, axis: int = -1):
    xv = _raw(x)
    out = xv - np.max(xv, axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= _rowsum(out, axis)
    if not isinstance(x, Tensor):
        return out

    def vjp(g):
        r = g * out
        r -= out * _rowsum(r, axis)
        return r

    return _node(out, "softmax", [(x, vjp)])


def iir_filter(x, alpha, beta1, beta2, delay: int = 0):
    """y[n] = alpha*x[n-delay] - beta1*y[n-1] - beta2*y[n-2] along the last axis.

    Zero initial conditions.  The reverse pass runs the adjoint recursion
    backwards in time, so a whole series costs two ``lfilter`` calls instead of
    one graph node per sample.
    """
    xv = np.asarray(_raw(x), dtype=np.float64)
    al, b1, b2 = float(_raw(alpha)), float(_raw(beta1)), float(_raw(beta2))
    n = xv.shape[-1]
    if delay:
        pad = np.zeros(xv.shape[:-1] + (delay,))
        shifted = np.concatenate([pad, xv[..., : max(n - delay, 0)]], axis=-1)
    else:
        shifted = xv
    den = [1.0, b1, b2]
    y = signal.lfilter([al], den, shifted, axis=-1)
    if not _any_tensor(x, alpha, beta1, beta2):
        return y

    cache = {}

    def adjoint(g):
        if "z" not in cache:
            cache["z"] = signal.lfilter([1.0], den, g[..., ::-1], axis=-1)[..., ::-1]
        return cache["z"]

    def lag(v, k):
        out = np.zeros_like(v)
        out[..., k:] = v[..., : n - k]
        return out

    def d_x(g):
        z = adjoint(g)
        gx = al * z
        if delay:
            gx = np.concatenate([gx[..., delay:], np.zeros(gx.shape[:-1] + (delay,))], axis=-1)
        return gx

    # reductions below keep the parameter shapes scalar
    links = [
        (x, d_x),
        (alpha, lambda g: np.sum(adjoint(g) * shifted)),
        (beta1, lambda g: -np.sum(adjoint(g) * lag(y, 1))),
        (beta2, lambda g: -np.sum(adjoint(g) * lag(y, 2))),
    ]
    return _node(y, "iir_filter", links)


# ---------------------------------------------------------------- reverse pass

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent, _ in reversed(node.parents):
            if parent.id not in seen:
                stack.append((parent, False))
    return order


@dataclass
class Tape:
    """Topologically ordered record of one forward pass ending at ``root``."""

    root: Tensor
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        return cls(root, _topological(root))

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.parents and n.requires_grad]

    def replay(self, check_finite: bool = True) -> dict[Tensor, np.ndarray]:
        for node in self.nodes:
            node.grad = None
        self.root.grad = np.ones_like(self.root.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = np.asarray(vjp(g), dtype=np.float64)
                if check_finite and not np.all(np.isfinite(contrib)):
                    raise NonFiniteGradientError(node, parent)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib
        return {leaf: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
                for leaf in self.leaves}


def backward(loss: Tensor, check_finite: bool = True) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf that needs one."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward() needs a Tensor")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.value).all():
        raise FloatingPointError(f"loss is not finite: {loss.value}")
    return Tape.record(loss).replay(check_finite=check_finite)


class GradCheckError(FloatingPointError):
    def __init__(self, coords: list[int]):
        self.coords = coords
        super().__init__(f"function not finite at probe points for coordinates {coords}")


def grad_check(f: Callable, x, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a 1-d vector to a scalar and must be written with this module's
    operations so it can be evaluated on a :class:`Tensor` as well as on an
    array.  The probe step is ``eps * max(1, |x_i|)``.
    """
    x = np.array(x, dtype=np.float64).ravel()
    numeric = np.empty_like(x)
    bad = []
    for i in range(x.size):
        h = eps * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = float(np.asarray(value_of(f(xp)))), float(np.asarray(value_of(f(xm))))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(i)
            continue
        numeric[i] = (fp - fm) / (2.0 * h)
    if bad:
        raise GradCheckError(bad)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = f(leaf)
    if isinstance(out, Tensor) and out.requires_grad:
        analytic = backward(out)[leaf]
    else:
        analytic = np.zeros_like(x)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
