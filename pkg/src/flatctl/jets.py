"""Jet variables, multi-indices and the Lie derivative along the prolonged field.

Coordinates are states ``x`` (order 0 only), inputs ``u`` with their time
derivatives ``u@k``, new inputs ``v{stage}_{j}@k`` introduced by the staged
procedure, and reference jets ``y{j}d@k``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .expr.core import ONE, Expr, derivative, var

FAMILIES = ("x", "u", "v", "yd")
_FAMILY_RANK = {f: i for i, f in enumerate(FAMILIES)}


@dataclass(frozen=True)
class JetVar:
    """A coordinate: ``family`` x/u/v/yd, 1-based ``index``, jet ``order``.

    ``stage`` is the stage number for new inputs (0 otherwise); ``base`` is
    the printed name of the order-0 variable.
    """

    family: str
    index: int
    order: int = 0
    stage: int = 0
    base: str = ""

    def __post_init__(self):
        if self.family not in _FAMILY_RANK:
            raise ValueError(f"unknown family {self.family!r}")
        if self.index < 1 or self.order < 0:
            raise ValueError("index must be >= 1 and order >= 0")
        if self.family == "x" and self.order:
            raise ValueError("state variables carry no jet order")
        if not self.base:
            object.__setattr__(self, "base", default_base(self.family, self.index, self.stage))

    @property
    def name(self) -> str:
        return self.base if self.order == 0 else f"{self.base}@{self.order}"

    def shift(self, k: int = 1) -> "JetVar":
        if self.family == "x":
            raise ValueError("states have no jets; use the dynamics")
        return JetVar(self.family, self.index, self.order + k, self.stage, self.base)

    def at_order(self, k: int) -> "JetVar":
        return JetVar(self.family, self.index, k, self.stage, self.base)

    def sort_key(self):
        return (_FAMILY_RANK[self.family], self.stage, self.index, self.order)

    def __repr__(self):
        return f"JetVar({self.name})"


def default_base(family: str, index: int, stage: int = 0) -> str:
    if family == "x":
        return f"x{index}"
    if family == "u":
        return f"u{index}"
    if family == "v":
        return f"v{stage}_{index}"
    return f"y{index}d"


def sort_vars(vs: Iterable[JetVar]) -> list[JetVar]:
    return sorted(vs, key=JetVar.sort_key)


_V_NAME = re.compile(r"v(\d+)_(\d+)$")
_YD_NAME = re.compile(r"y(\d+)d$")


class JetRegistry:
    """Name table and jet-order bookkeeping for one system.

    ``l_u`` records, per family, the highest jet order handed out so far; it
    only grows.
    """

    def __init__(self, state_names: Sequence[str], input_names: Sequence[str],
                 params: Mapping[str, float] | None = None, n_outputs: int | None = None):
        self.state_names = list(state_names)
        self.input_names = list(input_names)
        self.params = dict(params or {})
        self.n = len(self.state_names)
        self.m = len(self.input_names)
        self.n_outputs = self.m if n_outputs is None else n_outputs
        self.l_u = {f: 0 for f in FAMILIES}
        self._v_stages: dict[int, int] = {}
        self._names: dict[str, JetVar] = {}
        for i, s in enumerate(self.state_names, 1):
            self._add(s, JetVar("x", i, base=s))
        for j, s in enumerate(self.input_names, 1):
            self._add(s, JetVar("u", j, base=s))
        for j in range(1, self.n_outputs + 1):
            b = default_base("yd", j)
            if b not in self._names:
                self._add(b, JetVar("yd", j, base=b))
        for p in self.params:
            if p in self._names:
                raise ValueError(f"parameter {p!r} clashes with a variable name")

    def _add(self, name: str, v: JetVar):
        if name in self._names or name in getattr(self, "params", {}):
            raise ValueError(f"duplicate name {name!r}")
        if name in ("sin", "cos", "tan", "sqrt", "exp", "log"):
            raise ValueError(f"{name!r} is reserved")
        self._names[name] = v

    # lookup ---------------------------------------------------------------
    def x(self, i: int) -> JetVar:
        return self._names[self.state_names[i - 1]]

    def u(self, j: int, order: int = 0) -> JetVar:
        return self.note(self._names[self.input_names[j - 1]].at_order(order))

    def v(self, stage: int, j: int, order: int = 0) -> JetVar:
        self.register_v(stage, j)
        return self.note(JetVar("v", j, order, stage))

    def yd(self, j: int, order: int = 0) -> JetVar:
        return self.note(JetVar("yd", j, order))

    @property
    def states(self) -> list[JetVar]:
        return [self.x(i) for i in range(1, self.n + 1)]

    @property
    def inputs(self) -> list[JetVar]:
        return [self.u(j) for j in range(1, self.m + 1)]

    def register_v(self, stage: int, count: int):
        self._v_stages[stage] = max(self._v_stages.get(stage, 0), count)

    def note(self, v: JetVar) -> JetVar:
        if v.order > self.l_u[v.family]:
            self.l_u[v.family] = v.order
        return v

    def resolve(self, name: str, order: int = 0):
        """JetVar (or parameter value) for a printed base name, else None."""
        if name in self.params:
            return None if order else float(self.params[name])
        v = self._names.get(name)
        if v is None:
            m = _V_NAME.match(name)
            if m and int(m.group(2)) <= self._v_stages.get(int(m.group(1)), 0):
                v = JetVar("v", int(m.group(2)), 0, int(m.group(1)))
            m = _YD_NAME.match(name)
            if m and 1 <= int(m.group(1)) <= self.n_outputs:
                v = JetVar("yd", int(m.group(1)))
        if v is None:
            return None
        if order and v.family == "x":
            return None
        return self.note(v.at_order(order))

    def snapshot(self) -> dict:
        return {"n": self.n, "m": self.m, "l_u": dict(self.l_u)}


class MultiIndex(tuple):
    """Tuple of nonnegative integers with componentwise algebra.

    ``+``/``-`` accept another MultiIndex of equal length or an integer
    (added to every component); ``<=`` is the componentwise partial order;
    ``abs`` is the sum; ``concat`` joins.  Subtraction that would go
    negative raises unless ``allow_negative=True`` is passed to :meth:`sub`,
    which is how empty ranges such as ``[κ, R-1]`` with ``κ = R`` arise.
    """

    def __new__(cls, values: Iterable[int] = (), *, allow_negative: bool = False):
        vals = tuple(int(v) for v in values)
        if not allow_negative and any(v < 0 for v in vals):
            raise ValueError(f"negative component in multi-index {vals}")
        return super().__new__(cls, vals)

    def _check(self, other):
        if isinstance(other, int):
            return (other,) * len(self)
        other = tuple(other)
        if len(other) != len(self):
            raise ValueError(f"length mismatch: {len(self)} vs {len(other)}")
        return other

    def __add__(self, other):
        o = self._check(other)
        return MultiIndex(a + b for a, b in zip(self, o))

    __radd__ = __add__

    def sub(self, other, allow_negative: bool = False):
        o = self._check(other)
        return MultiIndex((a - b for a, b in zip(self, o)), allow_negative=allow_negative)

    def __sub__(self, other):
        return self.sub(other)

    def __abs__(self):
        return sum(self)

    def __le__(self, other):
        o = self._check(other)
        return all(a <= b for a, b in zip(self, o))

    def __ge__(self, other):
        o = self._check(other)
        return all(a >= b for a, b in zip(self, o))

    def __lt__(self, other):
        return self <= other and tuple(self) != tuple(other)

    def __gt__(self, other):
        return self >= other and tuple(self) != tuple(other)

    def concat(self, other) -> "MultiIndex":
        return MultiIndex(tuple(self) + tuple(other))

    def __mul__(self, k):
        raise TypeError("multi-indices do not support repetition")

    def __repr__(self):
        return "(" + ",".join(str(v) for v in self) + ")"

    __str__ = __repr__


def multiindex(*vals) -> MultiIndex:
    if len(vals) == 1 and not isinstance(vals[0], int):
        return MultiIndex(vals[0])
    return MultiIndex(vals)


class DerivativeCapExceeded(RuntimeError):
    pass


def lie_direction(dyn: Mapping[JetVar, Expr], registry: JetRegistry | None = None):
    """Direction of the prolonged field: x -> f(x, ...), jets -> next jet."""

    def d(v: JetVar):
        if v.family == "x":
            return dyn.get(v)
        nxt = v.shift(1)
        if registry is not None:
            registry.note(nxt)
        return var(nxt)

    return d


def lie_derivative(h: Expr, dyn: Mapping[JetVar, Expr], registry: JetRegistry | None = None) -> Expr:
    """Total time derivative of ``h`` along the prolonged vector field.

    ``dyn`` maps each state to its right-hand side; every other variable is
    a jet whose derivative is the next jet.
    """
    return derivative(h, lie_direction(dyn, registry))


def lie_iterate(h: Expr, dyn: Mapping[JetVar, Expr], k: int, registry: JetRegistry | None = None,
                cap: int | None = None) -> list[Expr]:
    """``[h, L h, ..., L^k h]``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if cap is None and registry is not None:
        cap = 2 * registry.n + 2
    if cap is not None and k > cap:
        raise DerivativeCapExceeded(f"derivative order {k} exceeds the cap {cap}")
    out = [h]
    for _ in range(k):
        out.append(lie_derivative(out[-1], dyn, registry))
    return out


def partial(h: Expr, w: JetVar) -> Expr:
    return derivative(h, {w: ONE})
