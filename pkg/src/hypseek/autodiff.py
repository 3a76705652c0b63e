"""A small reverse-mode differentiation tape over numpy arrays.

Only the operations the embedding model needs are provided.  Every ``Var``
created through a ``Tape`` is appended to it in evaluation order, so the
reverse sweep is a plain walk over the list backwards.

Clamped functions (``acosh``, ``arccos``, ``arcsin_capped``, ``clip_min``)
propagate zero gradient where the clamp is active.  ``relu`` uses subgradient
0 at the kink.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = ["Tape", "Var"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    __slots__ = ("value", "tape", "index", "parents")
    __array_priority__ = 1000

    def __init__(self, value, tape: "Tape", parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # arithmetic ------------------------------------------------------------
    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.add(self, self.tape.neg(other))

    def __rsub__(self, other):
        return self.tape.add(self.tape.neg(self), other)

    def __neg__(self):
        return self.tape.neg(self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __rmatmul__(self, other):
        return self.tape.matmul(other, self)

    def __getitem__(self, idx):
        return self.tape.getitem(self, idx)

    @property
    def T(self):
        return self.tape.transpose(self)

    def sum(self, axis=None, keepdims=False):
        return self.tape.sum(self, axis=axis, keepdims=keepdims)


class Tape:
    """Records operations for a single forward/backward evaluation."""

    def __init__(self):
        self.nodes: list[Var] = []

    def variable(self, value) -> Var:
        return Var(value, self)

    def _lift(self, x) -> Var | np.ndarray:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operands belong to different tapes")
            return x
        return np.asarray(x, dtype=np.float64)

    def _node(self, value, parents: Sequence[tuple[object, Callable]]) -> Var:
        return Var(value, self, tuple((p, fn) for p, fn in parents if isinstance(p, Var)))

    @staticmethod
    def _val(x):
        return x.value if isinstance(x, Var) else x

    # elementwise binary ------------------------------------------------------
    def add(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = self._val(a), self._val(b)
        return self._node(av + bv, [
            (a, lambda g: _unbroadcast(g, av.shape)),
            (b, lambda g: _unbroadcast(g, bv.shape)),
        ])

    def neg(self, a) -> Var:
        a = self._lift(a)
        if not isinstance(a, Var):
            return -a
        return self._node(-a.value, [(a, lambda g: -g)])

    def mul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = self._val(a), self._val(b)
        return self._node(av * bv, [
            (a, lambda g: _unbroadcast(g * bv, av.shape)),
            (b, lambda g: _unbroadcast(g * av, bv.shape)),
        ])

    def div(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = self._val(a), self._val(b)
        out = av / bv
        return self._node(out, [
            (a, lambda g: _unbroadcast(g / bv, av.shape)),
            (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
        ])

    def matmul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = self._val(a), self._val(b)
        if av.ndim != 2 or bv.ndim not in (1, 2):
            raise ValueError("matmul supports (m, k) @ (k,) and (m, k) @ (k, n)")
        if bv.ndim == 1:
            return self._node(av @ bv, [
                (a, lambda g: np.outer(g, bv)),
                (b, lambda g: av.T @ g),
            ])
        return self._node(av @ bv, [
            (a, lambda g: g @ bv.T),
            (b, lambda g: av.T @ g),
        ])

    # structural --------------------------------------------------------------
    def transpose(self, a: Var) -> Var:
        return self._node(a.value.T, [(a, lambda g: g.T)])

    def reshape(self, a: Var, shape) -> Var:
        old = a.value.shape
        return self._node(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])

    def getitem(self, a: Var, idx) -> Var:
        shape = a.value.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return self._node(a.value[idx], [(a, back)])

    def sum(self, a: Var, axis=None, keepdims=False) -> Var:
        shape = a.value.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        return self._node(a.value.sum(axis=axis, keepdims=keepdims), [(a, back)])

    def concatenate(self, parts: Sequence[Var], axis: int = 0) -> Var:
        parts = [self._lift(p) for p in parts]
        vals = [self._val(p) for p in parts]
        bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
        parents = []
        for i, p in enumerate(parts):
            sl = [slice(None)] * vals[i].ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parents.append((p, lambda g, sl=tuple(sl): g[sl]))
        return self._node(np.concatenate(vals, axis=axis), parents)

    # elementwise unary -------------------------------------------------------
    def exp(self, a: Var) -> Var:
        out = np.exp(a.value)
        return self._node(out, [(a, lambda g: g * out)])

    def log(self, a: Var) -> Var:
        av = a.value
        return self._node(np.log(av), [(a, lambda g: g / av)])

    def sqrt(self, a: Var) -> Var:
        out = np.sqrt(a.value)
        return self._node(out, [(a, lambda g: g * 0.5 / out)])

    def tanh(self, a: Var) -> Var:
        out = np.tanh(a.value)
        return self._node(out, [(a, lambda g: g * (1.0 - out * out))])

    def square(self, a: Var) -> Var:
        av = a.value
        return self._node(av * av, [(a, lambda g: 2.0 * g * av)])

    def clip_min(self, a: Var, lo: float) -> Var:
        av = a.value
        live = av > lo
        return self._node(np.where(live, av, lo), [(a, lambda g: np.where(live, g, 0.0))])

    def relu(self, a: Var) -> Var:
        return self.clip_min(a, 0.0)

    def minimum(self, a: Var, hi: float) -> Var:
        av = a.value
        live = av < hi
        return self._node(np.where(live, av, hi), [(a, lambda g: np.where(live, g, 0.0))])

    def acosh(self, a: Var) -> Var:
        """``arccosh(max(a, 1))``."""
        av = a.value
        live = av > 1.0
        safe = np.where(live, av, 2.0)
        return self._node(np.arccosh(np.maximum(av, 1.0)), [
            (a, lambda g: np.where(live, g / np.sqrt(safe * safe - 1.0), 0.0)),
        ])

    def asinh(self, a: Var) -> Var:
        av = a.value
        return self._node(np.arcsinh(av), [(a, lambda g: g / np.sqrt(av * av + 1.0))])

    def where(self, mask, a: Var, b: Var) -> Var:
        """Elementwise ``a`` where ``mask`` else ``b``; the other branch gets zero gradient."""
        mask = np.asarray(mask, dtype=bool)
        a, b = self._lift(a), self._lift(b)
        av, bv = self._val(a), self._val(b)
        return self._node(np.where(mask, av, bv), [
            (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), av.shape)),
            (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), bv.shape)),
        ])

    def arccos(self, a: Var) -> Var:
        """``arccos(clip(a, -1, 1))``."""
        av = a.value
        live = np.abs(av) < 1.0
        safe = np.where(live, av, 0.0)
        return self._node(np.arccos(np.clip(av, -1.0, 1.0)), [
            (a, lambda g: np.where(live, -g / np.sqrt(1.0 - safe * safe), 0.0)),
        ])

    def arcsin_capped(self, a: Var) -> Var:
        """``arcsin(min(a, 1))`` for non-negative ``a``."""
        av = a.value
        live = av < 1.0
        safe = np.where(live, av, 0.0)
        return self._node(np.arcsin(np.minimum(av, 1.0)), [
            (a, lambda g: np.where(live, g / np.sqrt(1.0 - safe * safe), 0.0)),
        ])

    def sinhc_of_sqrt(self, s: Var) -> Var:
        """``sinh(sqrt(s)) / sqrt(s)`` for ``s >= 0``; analytic in ``s``, so smooth at 0."""
        sv = s.value
        x = np.sqrt(sv)
        small = x < 0.1
        xs = np.where(small, 1.0, x)
        value = np.where(small, 1.0 + sv / 6.0 * (1.0 + sv / 20.0 * (1.0 + sv / 42.0
                                                  * (1.0 + sv / 72.0))), np.sinh(xs) / xs)
        series_d = (1.0 / 6.0 + sv / 60.0 + sv * sv / 1680.0 + sv ** 3 / 90720.0
                    + sv ** 4 / 7983360.0)
        exact_d = (xs * np.cosh(xs) - np.sinh(xs)) / (2.0 * xs ** 3)
        deriv = np.where(small, series_d, exact_d)
        return self._node(value, [(s, lambda g: g * deriv)])

    def logsumexp(self, a: Var, axis: int) -> Var:
        av = a.value
        m = np.max(av, axis=axis, keepdims=True)
        e = np.exp(av - m)
        tot = e.sum(axis=axis, keepdims=True)
        out = (m + np.log(tot)).squeeze(axis)
        soft = e / tot
        return self._node(out, [(a, lambda g: np.expand_dims(g, axis) * soft)])

    # reverse sweep -------------------------------------------------------------
    def gradient(self, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``output`` with respect to each of ``wrt``."""
        if output.value.shape != ():
            raise ValueError("gradient() needs a scalar output")
        grads: list = [None] * len(self.nodes)
        grads[output.index] = np.ones(())
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads[node.index]
            if g is None:
                continue
            for parent, fn in node.parents:
                contrib = fn(g)
                prev = grads[parent.index]
                grads[parent.index] = contrib if prev is None else prev + contrib
        return [np.zeros_like(w.value) if grads[w.index] is None
                else np.array(grads[w.index], dtype=np.float64).reshape(w.value.shape)
                for w in wrt]
