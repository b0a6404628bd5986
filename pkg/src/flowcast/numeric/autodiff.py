"""Tape-based reverse-mode differentiation over numpy arrays.

Primitives are matrix level (matmul, elementwise maps, reductions, PD
log-determinant and solve), so a tape for a covariance objective or a
coupling flow stays a few hundred nodes long.

Every primitive is exposed as a module-level function that accepts plain
arrays or :class:`Var` nodes. With no ``Var`` among the arguments the
function just computes with numpy, so model code is written once and runs
both under a tape (training) and without one (evaluation).

    >>> tape = Tape()
    >>> w = tape.param(np.array(3.0), "w")
    >>> reverse_grad(tape, w * w)["w"]
    array(6.)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .linalg import cholesky, log_det_pd as _log_det_pd, solve_pd as _solve_pd
from scipy.linalg import cho_solve


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable
    vjp: Callable  # (g, out, *input_values, **kw) -> tuple of input grads


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as they are created, so ``nodes`` is always in
    topological order. Trainable leaves are registered by name in ``slots``.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.slots: dict[str, Var] = {}

    def _leaf(self, value) -> "Var":
        value = np.array(value, dtype=float)
        if not np.all(np.isfinite(value)):
            raise ValueError("non-finite leaf value")
        value.flags.writeable = False
        var = Var(self, len(self.nodes), value, None, (), {})
        self.nodes.append(var)
        return var

    def param(self, value, name: str) -> "Var":
        if name in self.slots:
            raise KeyError(f"parameter slot {name!r} already registered")
        var = self._leaf(value)
        self.slots[name] = var
        return var

    def constant(self, value) -> "Var":
        return self._leaf(value)

    def replay(self, leaf_values: dict[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from its leaves.

        ``leaf_values`` optionally overrides named parameter slots. Returns
        the value of every node in tape order.
        """
        leaf_values = leaf_values or {}
        by_index = {v.index: np.asarray(leaf_values[k], dtype=float)
                    for k, v in self.slots.items() if k in leaf_values}
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op is None:
                values.append(by_index.get(node.index, node.value))
                continue
            args = [values[a.index] if isinstance(a, Var) else a for a in node.inputs]
            values.append(node.op.forward(*args, **node.kwargs))
        return values

    def __len__(self):
        return len(self.nodes)


class Var:
    """A node on a :class:`Tape` holding a forward value."""

    __array_ufunc__ = None  # make ndarray <op> Var defer to Var's reflected ops
    __slots__ = ("tape", "index", "value", "op", "inputs", "kwargs")

    def __init__(self, tape, index, value, op, inputs, kwargs):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.inputs = inputs
        self.kwargs = kwargs

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        name = self.op.name if self.op else "leaf"
        return f"Var({name}, shape={self.shape})"

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def value(x):
    return x.value if isinstance(x, Var) else x


def _apply(op: Op, *args, **kw):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    vals = [value(a) for a in args]
    out = op.forward(*vals, **kw)
    if tape is None:
        return out
    out = np.asarray(out, dtype=float)
    out.flags.writeable = False
    var = Var(tape, len(tape.nodes), out, op, tuple(args), kw)
    tape.nodes.append(var)
    return var


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _shape(x):
    return np.shape(x)


# --- elementwise arithmetic -------------------------------------------------

_ADD = Op("add", np.add, lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))))
_SUB = Op("sub", np.subtract, lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b))))
_MUL = Op("mul", np.multiply,
          lambda g, out, a, b: (_unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b))))
_DIV = Op("div", np.divide,
          lambda g, out, a, b: (_unbroadcast(g / b, _shape(a)), _unbroadcast(-g * out / b, _shape(b))))
_NEG = Op("neg", np.negative, lambda g, out, a: (-g,))


def add(a, b):
    return _apply(_ADD, a, b)


def sub(a, b):
    return _apply(_SUB, a, b)


def mul(a, b):
    return _apply(_MUL, a, b)


def div(a, b):
    return _apply(_DIV, a, b)


def neg(a):
    return _apply(_NEG, a)


def _pow_fwd(a, exponent):
    return np.power(a, exponent)


def _pow_vjp(g, out, a, exponent):
    return (g * exponent * np.power(a, exponent - 1),)


_POW = Op("power", _pow_fwd, _pow_vjp)


def power(a, exponent: float):
    return _apply(_POW, a, exponent=float(exponent))


# --- elementwise maps ---------------------------------------------------------

_EXP = Op("exp", np.exp, lambda g, out, a: (g * out,))
_LOG = Op("log", np.log, lambda g, out, a: (g / a,))
_TANH = Op("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))
_RELU = Op("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0),))
_SQRT = Op("sqrt", np.sqrt, lambda g, out, a: (g * 0.5 / out,))
_SQUARE = Op("square", np.square, lambda g, out, a: (2.0 * g * a,))


def exp(a):
    return _apply(_EXP, a)


def log(a):
    return _apply(_LOG, a)


def tanh(a):
    return _apply(_TANH, a)


def relu(a):
    return _apply(_RELU, a)


def sqrt(a):
    return _apply(_SQRT, a)


def square(a):
    return _apply(_SQUARE, a)


# --- shape and indexing ---------------------------------------------------------

def _matmul_vjp(g, out, a, b):
    a2, b2 = np.asarray(a), np.asarray(b)
    ga = g @ np.swapaxes(b2, -1, -2)
    gb = np.swapaxes(a2, -1, -2) @ g
    return _unbroadcast(ga, a2.shape), _unbroadcast(gb, b2.shape)


def _matmul_fwd(a, b):
    if np.ndim(a) < 2 or np.ndim(b) < 2:
        raise ValueError("matmul primitive requires operands with ndim >= 2")
    return np.matmul(a, b)


_MATMUL = Op("matmul", _matmul_fwd, _matmul_vjp)


def matmul(a, b):
    return _apply(_MATMUL, a, b)


_TRANSPOSE = Op("transpose", lambda a: np.swapaxes(a, -1, -2),
                lambda g, out, a: (np.swapaxes(g, -1, -2),))


def transpose(a):
    return _apply(_TRANSPOSE, a)


_RESHAPE = Op("reshape", lambda a, shape: np.reshape(a, shape),
              lambda g, out, a, shape: (np.reshape(g, np.shape(a)),))


def reshape(a, shape):
    return _apply(_RESHAPE, a, shape=tuple(shape))


def _getitem_vjp(g, out, a, idx):
    z = np.zeros(np.shape(a))
    np.add.at(z, idx, g)
    return (z,)


_GETITEM = Op("getitem", lambda a, idx: np.asarray(a)[idx], _getitem_vjp)


def getitem(a, idx):
    return _apply(_GETITEM, a, idx=idx)


def _concat_fwd(*parts, axis):
    return np.concatenate(parts, axis=axis)


def _concat_vjp(g, out, *parts, axis):
    sizes = np.cumsum([np.shape(p)[axis] for p in parts])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


_CONCAT = Op("concat", _concat_fwd, _concat_vjp)


def concat(parts, axis: int = -1):
    return _apply(_CONCAT, *parts, axis=axis)


# --- reductions -----------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


_SUM = Op("sum", lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
          lambda g, out, a, axis, keepdims: (_expand_reduced(g, np.shape(a), axis, keepdims),))


def sum_(a, axis=None, keepdims: bool = False):
    return _apply(_SUM, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False):
    n = np.size(value(a)) if axis is None else np.prod(
        [np.shape(value(a))[ax] for ax in ((axis,) if np.isscalar(axis) else axis)])
    return sum_(a, axis=axis, keepdims=keepdims) / float(n)


def _lse_fwd(a, axis):
    mx = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(mx, axis=axis) + np.log(np.sum(np.exp(a - mx), axis=axis))


def _lse_vjp(g, out, a, axis):
    w = np.exp(a - np.expand_dims(out, axis))
    return (np.expand_dims(g, axis) * w,)


_LSE = Op("logsumexp", _lse_fwd, _lse_vjp)


def logsumexp(a, axis: int = -1):
    return _apply(_LSE, a, axis=axis)


# --- positive-definite primitives --------------------------------------------

def _logdet_vjp(g, out, M):
    L = cholesky(M)
    Minv = cho_solve((L, True), np.eye(L.shape[0]))
    return (g * Minv.T,)


_LOGDET = Op("log_det_pd", _log_det_pd, _logdet_vjp)


def log_det_pd(M):
    return _apply(_LOGDET, M)


def _solve_vjp(g, out, M, B):
    gB = _solve_pd(np.asarray(M).T, g)
    X = np.asarray(out)
    if X.ndim == 1:
        gM = -np.outer(gB, X)
    else:
        gM = -gB @ X.T
    return gM, gB


_SOLVE = Op("solve_pd", _solve_pd, _solve_vjp)


def solve_pd(M, B):
    return _apply(_SOLVE, M, B)


# --- gradients ---------------------------------------------------------------

def reverse_grad(tape: Tape, output: Var) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``output`` with respect to every parameter slot.

    Slots the output does not depend on get zero gradients.
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise ValueError("output is not a node of this tape")
    if output.value.size != 1:
        raise ValueError(f"output must be scalar, got shape {output.value.shape}")
    grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
    for node in reversed(tape.nodes[: output.index + 1]):
        g = grads.pop(node.index, None)
        if g is None or node.op is None:
            if g is not None:
                grads[node.index] = g  # leaf: keep for collection
            continue
        vals = [value(a) for a in node.inputs]
        in_grads = node.op.vjp(g, node.value, *vals, **node.kwargs)
        for a, ga in zip(node.inputs, in_grads):
            if not isinstance(a, Var) or ga is None:
                continue
            if a.index in grads:
                grads[a.index] = grads[a.index] + ga
            else:
                grads[a.index] = np.asarray(ga, dtype=float)
    return {name: np.array(grads.get(var.index, np.zeros_like(var.value)), dtype=float)
            .reshape(var.value.shape)
            for name, var in tape.slots.items()}


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
