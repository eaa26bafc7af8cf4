"""Scalar automatic differentiation.

Two scalar types are provided:

* :class:`DualScalar` carries a value and a directional derivative (forward
  mode).  ``value`` and ``deriv`` may be floats or numpy arrays; an array
  ``deriv`` of shape ``(..., D)`` against a ``value`` of shape ``(..., 1)``
  propagates ``D`` seed directions in one pass.
* :class:`TapeVar` records every operation on a :class:`Tape` so that a single
  reverse sweep (:func:`grad`) returns the gradient of one output with respect
  to any number of inputs.

Plain floats and numpy arrays are also valid scalars for code written against
the free functions in this module (``sin``, ``cos``, ``sqrt`` ...), which is
how the dynamics stay generic over the scalar type.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "AutodiffError",
    "TapeFull",
    "CrossTape",
    "InvalidMark",
    "NumericDomainError",
    "DualScalar",
    "Tape",
    "TapeVar",
    "record",
    "grad",
    "checkpoint_and_rewind",
    "value_of",
    "sin",
    "cos",
    "tan",
    "exp",
    "log",
    "sqrt",
    "minimum",
    "maximum",
    "smooth_abs",
    "DEFAULT_MAX_NODES",
    "DIV_EPS",
]

DEFAULT_MAX_NODES = 2**27
DIV_EPS = 1e-12


class AutodiffError(Exception):
    pass


class TapeFull(AutodiffError):
    pass


class CrossTape(AutodiffError):
    pass


class InvalidMark(AutodiffError):
    pass


class NumericDomainError(AutodiffError, ArithmeticError):
    pass


def _check_divisor(v):
    if isinstance(v, np.ndarray):
        if np.any(np.abs(v) < DIV_EPS):
            raise NumericDomainError("division by a value with magnitude < 1e-12")
    elif abs(v) < DIV_EPS:
        raise NumericDomainError(f"division by {v!r} (magnitude < 1e-12)")


# ---------------------------------------------------------------------------
# elementary functions on raw values (float or ndarray)

def _raw(fn_math, fn_np):
    def f(v):
        if isinstance(v, np.ndarray):
            return fn_np(v)
        return fn_math(v)
    return f


_sin = _raw(math.sin, np.sin)
_cos = _raw(math.cos, np.cos)
_tan = _raw(math.tan, np.tan)
_exp = _raw(math.exp, np.exp)


def _log(v):
    if isinstance(v, np.ndarray):
        if np.any(v <= 0.0):
            raise NumericDomainError("log of a non-positive value")
        return np.log(v)
    if v <= 0.0:
        raise NumericDomainError(f"log of non-positive value {v!r}")
    return math.log(v)


def _sqrt(v):
    if isinstance(v, np.ndarray):
        if np.any(v < 0.0):
            raise NumericDomainError("sqrt of a negative value")
        return np.sqrt(v)
    if v < 0.0:
        raise NumericDomainError(f"sqrt of negative value {v!r}")
    return math.sqrt(v)


def _pow_const(v, k):
    if isinstance(v, np.ndarray):
        return np.power(v, k)
    return v**k


# ---------------------------------------------------------------------------
# forward mode

class DualScalar:
    """Forward-mode dual number ``value + deriv * eps``."""

    __slots__ = ("value", "deriv")
    # keep numpy from broadcasting over a DualScalar as an object array
    __array_ufunc__ = None

    def __init__(self, value, deriv=0.0):
        self.value = value
        self.deriv = deriv

    @classmethod
    def constant(cls, value):
        return cls(value, 0.0)

    def __repr__(self):
        return f"DualScalar({self.value!r}, {self.deriv!r})"

    def __float__(self):
        return float(self.value)

    def __add__(self, o):
        if isinstance(o, DualScalar):
            return DualScalar(self.value + o.value, self.deriv + o.deriv)
        return DualScalar(self.value + o, self.deriv)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, DualScalar):
            return DualScalar(self.value - o.value, self.deriv - o.deriv)
        return DualScalar(self.value - o, self.deriv)

    def __rsub__(self, o):
        return DualScalar(o - self.value, -self.deriv)

    def __neg__(self):
        return DualScalar(-self.value, -self.deriv)

    def __pos__(self):
        return self

    def __mul__(self, o):
        if isinstance(o, DualScalar):
            return DualScalar(self.value * o.value, self.deriv * o.value + self.value * o.deriv)
        return DualScalar(self.value * o, self.deriv * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, DualScalar):
            _check_divisor(o.value)
            inv = 1.0 / o.value
            val = self.value * inv
            return DualScalar(val, (self.deriv - val * o.deriv) * inv)
        _check_divisor(o)
        return DualScalar(self.value / o, self.deriv / o)

    def __rtruediv__(self, o):
        _check_divisor(self.value)
        val = o / self.value
        return DualScalar(val, -val / self.value * self.deriv)

    def __pow__(self, o):
        if isinstance(o, DualScalar):
            # x**y = exp(y log x)
            return exp(o * log(self))
        if o == 2:
            return DualScalar(self.value * self.value, 2.0 * self.value * self.deriv)
        return DualScalar(_pow_const(self.value, o), o * _pow_const(self.value, o - 1) * self.deriv)

    def __rpow__(self, o):
        val = _pow_const(o, self.value)
        return DualScalar(val, val * math.log(o) * self.deriv)

    # comparisons act on the value only
    def __lt__(self, o):
        return self.value < value_of(o)

    def __le__(self, o):
        return self.value <= value_of(o)

    def __gt__(self, o):
        return self.value > value_of(o)

    def __ge__(self, o):
        return self.value >= value_of(o)

    def sin(self):
        return DualScalar(_sin(self.value), _cos(self.value) * self.deriv)

    def cos(self):
        return DualScalar(_cos(self.value), -_sin(self.value) * self.deriv)

    def tan(self):
        t = _tan(self.value)
        return DualScalar(t, (1.0 + t * t) * self.deriv)

    def exp(self):
        e = _exp(self.value)
        return DualScalar(e, e * self.deriv)

    def log(self):
        return DualScalar(_log(self.value), self.deriv / self.value)

    def sqrt(self):
        s = _sqrt(self.value)
        _check_divisor(s)
        return DualScalar(s, self.deriv * (0.5 / s))


# ---------------------------------------------------------------------------
# reverse mode

class Tape:
    """Linear record of scalar operations.

    Each node is ``(opcode, parent1, partial1, parent2, partial2)`` where a
    missing parent is ``-1``.  Parents always precede the node.
    """

    __slots__ = ("nodes", "max_nodes")

    def __init__(self, max_nodes: int = DEFAULT_MAX_NODES):
        if max_nodes < 1:
            raise ValueError("max_nodes must be positive")
        self.nodes: list[tuple] = []
        self.max_nodes = int(max_nodes)

    @property
    def live_node_count(self) -> int:
        return len(self.nodes)

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return f"Tape(live={len(self.nodes)}, max={self.max_nodes})"

    def _push(self, node, value):
        nodes = self.nodes
        if len(nodes) >= self.max_nodes:
            raise TapeFull(
                f"tape capacity of {self.max_nodes} nodes exhausted; shorten the window, "
                "enlarge the step size or raise max_nodes"
            )
        nodes.append(node)
        return TapeVar(self, len(nodes) - 1, value)

    def var(self, value) -> "TapeVar":
        return record(self, value)

    def mark(self) -> int:
        return len(self.nodes)


class TapeVar:
    """A scalar recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"TapeVar(index={self.index}, value={self.value!r})"

    def __float__(self):
        return float(self.value)

    def _same(self, o):
        if o.tape is not self.tape:
            raise CrossTape("arithmetic between variables of different tapes")

    def __add__(self, o):
        if isinstance(o, TapeVar):
            self._same(o)
            return self.tape._push(("+", self.index, 1.0, o.index, 1.0), self.value + o.value)
        return self.tape._push(("+", self.index, 1.0, -1, 0.0), self.value + o)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, TapeVar):
            self._same(o)
            return self.tape._push(("-", self.index, 1.0, o.index, -1.0), self.value - o.value)
        return self.tape._push(("-", self.index, 1.0, -1, 0.0), self.value - o)

    def __rsub__(self, o):
        return self.tape._push(("-", self.index, -1.0, -1, 0.0), o - self.value)

    def __neg__(self):
        return self.tape._push(("neg", self.index, -1.0, -1, 0.0), -self.value)

    def __pos__(self):
        return self

    def __mul__(self, o):
        if isinstance(o, TapeVar):
            self._same(o)
            return self.tape._push(("*", self.index, o.value, o.index, self.value), self.value * o.value)
        return self.tape._push(("*", self.index, o, -1, 0.0), self.value * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, TapeVar):
            self._same(o)
            _check_divisor(o.value)
            inv = 1.0 / o.value
            val = self.value * inv
            return self.tape._push(("/", self.index, inv, o.index, -val * inv), val)
        _check_divisor(o)
        return self.tape._push(("/", self.index, 1.0 / o, -1, 0.0), self.value / o)

    def __rtruediv__(self, o):
        _check_divisor(self.value)
        val = o / self.value
        return self.tape._push(("/", self.index, -val / self.value, -1, 0.0), val)

    def __pow__(self, o):
        if isinstance(o, TapeVar):
            return exp(o * log(self))
        if o == 2:
            return self.tape._push(("pow", self.index, 2.0 * self.value, -1, 0.0), self.value * self.value)
        return self.tape._push(
            ("pow", self.index, o * self.value ** (o - 1), -1, 0.0), self.value**o
        )

    def __rpow__(self, o):
        val = o**self.value
        return self.tape._push(("rpow", self.index, val * math.log(o), -1, 0.0), val)

    def __lt__(self, o):
        return self.value < value_of(o)

    def __le__(self, o):
        return self.value <= value_of(o)

    def __gt__(self, o):
        return self.value > value_of(o)

    def __ge__(self, o):
        return self.value >= value_of(o)

    def _unary(self, op, val, partial):
        return self.tape._push((op, self.index, partial, -1, 0.0), val)

    def sin(self):
        return self._unary("sin", math.sin(self.value), math.cos(self.value))

    def cos(self):
        return self._unary("cos", math.cos(self.value), -math.sin(self.value))

    def tan(self):
        t = math.tan(self.value)
        return self._unary("tan", t, 1.0 + t * t)

    def exp(self):
        e = math.exp(self.value)
        return self._unary("exp", e, e)

    def log(self):
        return self._unary("log", _log(self.value), 1.0 / self.value)

    def sqrt(self):
        s = _sqrt(self.value)
        _check_divisor(s)
        return self._unary("sqrt", s, 0.5 / s)


def record(tape: Tape, value: float) -> TapeVar:
    """Record an input (leaf) variable on ``tape``."""
    return tape._push(("leaf", -1, 0.0, -1, 0.0), float(value))


def grad(tape: Tape, output: TapeVar, inputs) -> list[float]:
    """Gradient of ``output`` w.r.t. each of ``inputs`` in one reverse sweep."""
    if not isinstance(output, TapeVar):
        # a constant output does not depend on anything
        for v in inputs:
            if isinstance(v, TapeVar) and v.tape is not tape:
                raise CrossTape("input belongs to another tape")
        return [0.0 for _ in inputs]
    if output.tape is not tape:
        raise CrossTape("output belongs to another tape")
    for v in inputs:
        if v.tape is not tape:
            raise CrossTape("input belongs to another tape")
        if v.index >= len(tape.nodes):
            raise InvalidMark("input variable was discarded by a rewind")
    if output.index >= len(tape.nodes):
        raise InvalidMark("output variable was discarded by a rewind")
    if not inputs:
        return []
    lo = min(v.index for v in inputs)
    top = output.index
    adj = [0.0] * (top + 1)
    adj[top] = 1.0
    nodes = tape.nodes
    for i in range(top, lo - 1, -1):
        a = adj[i]
        if a == 0.0:
            continue
        _, p1, d1, p2, d2 = nodes[i]
        if p1 >= 0:
            adj[p1] += a * d1
            if p2 >= 0:
                adj[p2] += a * d2
    return [adj[v.index] for v in inputs]


def checkpoint_and_rewind(tape: Tape, mark: int) -> None:
    """Discard every node recorded after ``mark``."""
    if mark < 0 or mark > len(tape.nodes):
        raise InvalidMark(f"mark {mark} outside live region [0, {len(tape.nodes)}]")
    del tape.nodes[mark:]


# ---------------------------------------------------------------------------
# scalar-generic free functions

def value_of(x):
    """Strip derivative information, returning a float or ndarray."""
    if isinstance(x, (DualScalar, TapeVar)):
        return x.value
    return x


def _dispatch(name, raw):
    def f(x):
        if isinstance(x, (float, int)):
            return raw(x)
        if isinstance(x, np.ndarray):
            return raw(x)
        return getattr(x, name)()
    f.__name__ = name
    return f


sin = _dispatch("sin", _sin)
cos = _dispatch("cos", _cos)
tan = _dispatch("tan", _tan)
exp = _dispatch("exp", _exp)
log = _dispatch("log", _log)
sqrt = _dispatch("sqrt", _sqrt)


def minimum(a, b):
    """Differentiable min; the derivative follows the selected argument, ties go to ``a``."""
    va, vb = value_of(a), value_of(b)
    if isinstance(va, np.ndarray) or isinstance(vb, np.ndarray):
        return _select(np.asarray(va <= vb), a, b)
    return a if va <= vb else b


def maximum(a, b):
    """Differentiable max; the derivative follows the selected argument, ties go to ``a``."""
    va, vb = value_of(a), value_of(b)
    if isinstance(va, np.ndarray) or isinstance(vb, np.ndarray):
        return _select(np.asarray(va >= vb), a, b)
    return a if va >= vb else b


def _select(mask, a, b):
    if isinstance(a, TapeVar) or isinstance(b, TapeVar):
        raise TypeError("array-valued selection is not supported on a tape")
    if isinstance(a, DualScalar) or isinstance(b, DualScalar):
        da = a if isinstance(a, DualScalar) else DualScalar(a, 0.0)
        db = b if isinstance(b, DualScalar) else DualScalar(b, 0.0)
        vm = mask
        dm = mask if np.ndim(da.deriv) == np.ndim(mask) else mask[..., None] if np.ndim(mask) else mask
        return DualScalar(np.where(vm, da.value, db.value), np.where(dm, da.deriv, db.deriv))
    return np.where(mask, a, b)


def smooth_abs(x, eps: float = 1e-12):
    """``sqrt(x**2 + eps)``: an everywhere-differentiable stand-in for ``abs``."""
    return sqrt(x * x + eps)
