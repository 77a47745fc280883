"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Values are plain numpy arrays.  Every operation accepts either an ndarray
(pure evaluation, nothing recorded) or a :class:`Var` bound to a
:class:`Tape` (the primitive is recorded for the backward pass).  Both paths
run the same numpy code, so a formula evaluated with and without a tape
produces bit-identical values.

A tape is single-threaded; :class:`Var` values are treated as immutable once
created.  Independent tapes may be evaluated in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

SMOOTH_ABS_EPS = 1e-12


class Tape:
    """Ordered record of primitive operations for one forward evaluation."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    def leaf(self, value, trainable: bool = False, name: str | None = None) -> "Var":
        """Create an input variable bound to this tape."""
        return Var(value, self, trainable=trainable, is_leaf=True, name=name)

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)

    def backward(self, output: "Var") -> dict["Var", np.ndarray]:
        """Accumulate d(output)/d(leaf) for every trainable leaf.

        The output must be scalar (size 1).  Nodes are visited exactly once,
        in reverse execution order.  Non-trainable leaves get no entry.
        """
        if not isinstance(output, Var):
            raise TypeError("backward() needs a Var produced on this tape")
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if output.value.size != 1:
            raise ValueError(
                f"backward() requires a scalar output, got shape {output.value.shape}"
            )
        grads: dict[Var, np.ndarray] = {output: np.ones_like(output.value)}
        for node in reversed(self._nodes):
            g_out = grads.get(node.out)
            if g_out is None:
                continue
            for var, vjp in zip(node.inputs, node.vjps):
                if vjp is None:
                    continue
                g_in = vjp(g_out)
                acc = grads.get(var)
                grads[var] = g_in if acc is None else acc + g_in
        return {
            v: g for v, g in grads.items() if v.is_leaf and v.trainable
        }


class Var:
    """A float64 array recorded on a tape.

    Instances are immutable values; arithmetic operators delegate to the
    module-level primitives so expressions read like plain numpy.
    """

    __slots__ = ("value", "tape", "trainable", "is_leaf", "name")

    def __init__(self, value, tape: Tape, trainable: bool = False,
                 is_leaf: bool = False, name: str | None = None) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.trainable = trainable
        self.is_leaf = is_leaf
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = self.name or ("leaf" if self.is_leaf else "node")
        return f"Var({tag}, shape={self.value.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)


@dataclass
class _Node:
    out: Var
    inputs: tuple[Var, ...]
    vjps: tuple[Callable[[np.ndarray], np.ndarray] | None, ...]


def value(x) -> np.ndarray:
    """Underlying numpy array of a Var, or the input itself as float64."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _record(tape: Tape | None, out_value: np.ndarray, inputs: Sequence,
            vjps: Sequence) -> Var | np.ndarray:
    if tape is None:
        return out_value
    in_vars = []
    in_vjps = []
    for x, vjp in zip(inputs, vjps):
        if isinstance(x, Var):
            in_vars.append(x)
            in_vjps.append(vjp)
    out = Var(out_value, tape)
    tape._nodes.append(_Node(out, tuple(in_vars), tuple(in_vjps)))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    va, vb = value(a), value(b)
    out = va + vb
    return _record(_tape_of(a, b), out, (a, b),
                   (lambda g: _unbroadcast(g, va.shape),
                    lambda g: _unbroadcast(g, vb.shape)))


def sub(a, b):
    va, vb = value(a), value(b)
    out = va - vb
    return _record(_tape_of(a, b), out, (a, b),
                   (lambda g: _unbroadcast(g, va.shape),
                    lambda g: _unbroadcast(-g, vb.shape)))


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    return _record(_tape_of(a, b), out, (a, b),
                   (lambda g: _unbroadcast(g * vb, va.shape),
                    lambda g: _unbroadcast(g * va, vb.shape)))


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    return _record(_tape_of(a, b), out, (a, b),
                   (lambda g: _unbroadcast(g / vb, va.shape),
                    lambda g: _unbroadcast(-g * va / (vb * vb), vb.shape)))


def neg(a):
    va = value(a)
    return _record(_tape_of(a), -va, (a,), (lambda g: -g,))


def matmul(a, b):
    va, vb = value(a), value(b)
    if va.ndim == 0 or vb.ndim == 0 or va.ndim > 2 or vb.ndim > 2:
        raise ValueError(f"matmul expects 1-D or 2-D operands, got {va.shape} @ {vb.shape}")
    if va.shape[-1] != vb.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {va.shape} @ {vb.shape}")
    out = va @ vb

    if va.ndim == 2 and vb.ndim == 2:
        vjps = (lambda g: g @ vb.T, lambda g: va.T @ g)
    elif va.ndim == 2 and vb.ndim == 1:
        vjps = (lambda g: np.outer(g, vb), lambda g: va.T @ g)
    elif va.ndim == 1 and vb.ndim == 2:
        vjps = (lambda g: vb @ g, lambda g: np.outer(va, g))
    else:  # 1-D dot 1-D
        vjps = (lambda g: g * vb, lambda g: g * va)
    return _record(_tape_of(a, b), out, (a, b), vjps)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a):
    out = np.exp(value(a))
    return _record(_tape_of(a), out, (a,), (lambda g: g * out,))


def log(a):
    va = value(a)
    return _record(_tape_of(a), np.log(va), (a,), (lambda g: g / va,))


def sqrt(a):
    out = np.sqrt(value(a))
    return _record(_tape_of(a), out, (a,), (lambda g: g / (2.0 * out),))


def sin(a):
    va = value(a)
    return _record(_tape_of(a), np.sin(va), (a,), (lambda g: g * np.cos(va),))


def cos(a):
    va = value(a)
    return _record(_tape_of(a), np.cos(va), (a,), (lambda g: -g * np.sin(va),))


def sigmoid(a):
    va = value(a)
    # numerically stable logistic
    out = np.where(va >= 0, 1.0 / (1.0 + np.exp(-np.abs(va))),
                   np.exp(-np.abs(va)) / (1.0 + np.exp(-np.abs(va))))
    return _record(_tape_of(a), out, (a,), (lambda g: g * out * (1.0 - out),))


def softplus(a):
    va = value(a)
    out = np.logaddexp(0.0, va)
    s = np.where(va >= 0, 1.0 / (1.0 + np.exp(-np.abs(va))),
                 np.exp(-np.abs(va)) / (1.0 + np.exp(-np.abs(va))))
    return _record(_tape_of(a), out, (a,), (lambda g: g * s,))


def smooth_abs(a, eps: float = SMOOTH_ABS_EPS):
    """sqrt(x^2 + eps): the everywhere-differentiable |x| used by the losses."""
    va = value(a)
    out = np.sqrt(va * va + eps)
    return _record(_tape_of(a), out, (a,), (lambda g: g * va / out,))


def clamp(a, lo: float | None, hi: float | None):
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    va = value(a)
    out = np.clip(va, lo, hi)
    inside = np.ones_like(va)
    if lo is not None:
        inside = inside * (va > lo)
    if hi is not None:
        inside = inside * (va < hi)
    return _record(_tape_of(a), out, (a,), (lambda g: g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def asum(a, axis=None, keepdims: bool = False):
    va = value(a)
    out = va.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, va.shape).copy() if np.ndim(g) == 0 else np.full(va.shape, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, va.shape).copy()

    return _record(_tape_of(a), out, (a,), (vjp,))


def mean(a, axis=None, keepdims: bool = False):
    va = value(a)
    out = va.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = va.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= va.shape[ax]

    def vjp(g):
        if axis is None:
            return np.full(va.shape, np.asarray(g) / count)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / count, va.shape).copy()

    return _record(_tape_of(a), out, (a,), (vjp,))


def reshape(a, shape):
    va = value(a)
    return _record(_tape_of(a), va.reshape(shape), (a,),
                   (lambda g: g.reshape(va.shape),))


def transpose(a, axes=None):
    va = value(a)
    out = np.transpose(va, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _record(_tape_of(a), out, (a,),
                   (lambda g: np.transpose(g, inv),))


def gather(a, indices):
    """Select from the C-order flattening of ``a``; output has indices' shape.

    The index array is treated as a constant; the gradient scatter-adds into
    the source positions.
    """
    va = value(a)
    idx = np.asarray(indices)
    out = va.reshape(-1)[idx]

    def vjp(g):
        acc = np.zeros(va.size, dtype=np.float64)
        np.add.at(acc, idx.reshape(-1), np.asarray(g).reshape(-1))
        return acc.reshape(va.shape)

    return _record(_tape_of(a), out, (a,), (vjp,))


def stack(items, axis: int = 0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*items)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return _record(tape, out, tuple(items), tuple(make_vjp(i) for i in range(len(items))))


def concat(items, axis: int = 0):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*items)
    offsets = np.cumsum([0] + [v.shape[axis] for v in vals])

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        return lambda g: g[tuple(sl)]

    return _record(tape, out, tuple(items), tuple(make_vjp(i) for i in range(len(items))))


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class FiniteDiffReport:
    """Outcome of a central-difference check against the backward pass."""

    max_rel_error: float
    worst_input: str = ""
    worst_index: tuple[int, ...] = ()
    nan_locations: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.nan_locations and np.isfinite(self.max_rel_error)


def finite_diff_check(fn, inputs: dict[str, tuple[np.ndarray, bool]],
                      eps: float = 1e-5) -> FiniteDiffReport:
    """Compare backward() gradients against central differences, elementwise.

    ``fn(vars)`` must build and return a scalar from the mapping
    name -> Var/ndarray, using only operations from this module (so the same
    code evaluates with or without a tape).  ``inputs`` maps each name to
    (array, trainable).  Relative error per element is
    |g_ad - g_fd| / max(1, |g_fd|); the maximum over all trainable elements
    is returned.  NaNs in either gradient are reported with their location
    instead of raising.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tape = Tape()
    leaves = {name: tape.leaf(arr, trainable=trainable)
              for name, (arr, trainable) in inputs.items()}
    out = fn(leaves)
    grads = tape.backward(out)
    by_name = {name: grads.get(leaf) for name, leaf in leaves.items()}

    # plain-array copies for repeated perturbation
    work = {name: np.array(arr, dtype=np.float64)
            for name, (arr, _) in inputs.items()}

    def eval_plain() -> float:
        return float(np.asarray(value(fn(work))).reshape(()))

    report = FiniteDiffReport(max_rel_error=0.0)
    for name, (arr, trainable) in inputs.items():
        if not trainable:
            continue
        g_ad = by_name[name]
        if g_ad is None:
            g_ad = np.zeros_like(work[name])
        target = work[name]
        it = np.nditer(target, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = target[ix]
            target[ix] = orig + eps
            f_plus = eval_plain()
            target[ix] = orig - eps
            f_minus = eval_plain()
            target[ix] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            g_a = float(g_ad[ix])
            if not np.isfinite(g_fd) or not np.isfinite(g_a):
                report.nan_locations.append((name, ix))
                continue
            rel = abs(g_a - g_fd) / max(1.0, abs(g_fd))
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst_input = name
                report.worst_index = ix
    if report.nan_locations:
        report.max_rel_error = float("inf")
    return report
