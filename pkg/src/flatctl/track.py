"""Tracking-law synthesis on top of a finished stage plan.

For output ``j`` with new input ``v^j = y^j_[κ]`` the law imposes

    v^j = y^{j,d}_[κ] - Σ_{β<κ} a_β (y^j_[β] - y^{j,d}_[β])

where ``y^j_[β]`` for ``β < κ`` is the stored stage expression (a function of
x and earlier new inputs).  Differentiating λ times replaces orders that
reach κ by jets of v itself, which gives a triangular set solvable from top
to bottom: stages ascending, then outputs, then λ.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from math import comb
from typing import Mapping, Sequence

import numpy as np

from .expr import (Expr, compile_program, substitute, tidy)
from .expr.core import const, free_vars, mul, sub, var
from .jets import JetVar, MultiIndex, sort_vars
from .kappa import StagePlan

DEFAULT_POLE = -2.0
CONJ_TOL = 1e-9


class GainError(ValueError):
    pass


class TrackingError(ValueError):
    pass


def poles_to_coefficients(poles: Sequence[complex]) -> tuple:
    """Coefficients ``(a_0, ..., a_{k-1})`` of the monic polynomial with these roots."""
    poles = [complex(p) for p in poles]
    if not poles:
        return ()
    unmatched = list(poles)
    while unmatched:
        p = unmatched.pop(0)
        if abs(p.imag) <= CONJ_TOL * max(1.0, abs(p)):
            continue
        conj = p.conjugate()
        idx = next((i for i, q in enumerate(unmatched) if abs(q - conj) <= CONJ_TOL * max(1.0, abs(p))), None)
        if idx is None:
            raise GainError(f"pole {p} has no conjugate partner")
        unmatched.pop(idx)
    c = np.poly(poles)
    return tuple(float(x) for x in np.real(c[::-1][:-1]))


def companion(coeffs: Sequence[float]) -> np.ndarray:
    """Companion matrix of e^(k) + Σ a_β e^(β) = 0 acting on (e, e', ..., e^(k-1))."""
    k = len(coeffs)
    A = np.zeros((k, k))
    if k:
        A[:-1, 1:] = np.eye(k - 1)
        A[-1, :] = -np.asarray(coeffs, dtype=float)
    return A


@dataclass
class GainSet:
    """Error-dynamics coefficients per original output index."""

    coeffs: dict  # j -> tuple(a_0..a_{κ-1})
    warnings: list = field(default_factory=list)

    @classmethod
    def from_spec(cls, kappa: Sequence[int], poles: Mapping[int, Sequence] | None = None,
                  coeffs: Mapping[int, Sequence[float]] | None = None,
                  default_pole: float = DEFAULT_POLE) -> "GainSet":
        poles = dict(poles or {})
        coeffs = dict(coeffs or {})
        out, warns = {}, []
        for j, k in enumerate(kappa, 1):
            if j in poles and j in coeffs:
                raise GainError(f"y{j}: give either poles or coefficients, not both")
            if j in coeffs:
                c = tuple(float(x) for x in coeffs[j])
                if len(c) != k:
                    raise GainError(f"y{j}: {len(c)} coefficients for kappa = {k}")
                ev = np.linalg.eigvals(companion(c)) if k else []
            else:
                p = list(poles.get(j, [default_pole] * k))
                if len(p) != k:
                    raise GainError(f"y{j}: {len(p)} poles for kappa = {k}")
                c = poles_to_coefficients(p)
                ev = p
            if any(complex(e).real >= 0 for e in ev):
                warns.append(f"y{j}: error dynamics not asymptotically stable")
            out[j] = c
        for j in list(poles) + list(coeffs):
            if not 1 <= j <= len(kappa):
                raise GainError(f"gain given for unknown output y{j}")
        return cls(out, warns)

    @classmethod
    def zero(cls, kappa: Sequence[int]) -> "GainSet":
        return cls({j: (0.0,) * k for j, k in enumerate(kappa, 1)})


# --- reference signals -------------------------------------------------------

def smoothstep_coefficients(s: int) -> np.ndarray:
    """Ascending coefficients of the degree 2s+1 polynomial p on [0, 1] with
    p(0)=0, p(1)=1 and derivatives 1..s vanishing at both ends."""
    c = np.zeros(2 * s + 2)
    for k in range(s + 1):
        c[s + 1 + k] = comb(s + k, k) * comb(2 * s + 1, s - k) * (-1) ** k
    return c


@dataclass
class Signal:
    kind: str
    params: tuple
    max_order: int = 1_000

    def __post_init__(self):
        # ascending coefficient lists of the polynomial and its derivatives
        self._polys = []
        if self.kind == "step":
            t0, t1 = self.params[2:4]
            if not t1 > t0:
                raise ValueError("step needs t1 > t0")
            s = int(self.params[4]) if len(self.params) > 4 else 1
            base = np.polynomial.Polynomial(smoothstep_coefficients(s))
        elif self.kind == "poly":
            base = np.polynomial.Polynomial(list(self.params))
        else:
            return
        P = base
        for _ in range(base.degree() + 1):
            self._polys.append([float(c) for c in P.coef])
            P = P.deriv()

    def jets(self, t: float, order: int) -> list[float]:
        """Values of the signal and its derivatives up to ``order`` at ``t``."""
        if order > self.max_order:
            raise ValueError(f"derivative order {order} exceeds the declared {self.max_order}")
        k = self.kind
        p = self.params
        if k == "const":
            return [float(p[0])] + [0.0] * order
        if k == "sin":
            A, w, ph, off = p
            out = [A * w ** i * math.sin(w * t + ph + i * math.pi / 2) for i in range(order + 1)]
            out[0] += off
            return out
        if k == "poly":
            polys = self._polys
            return [_horner(polys[i], t) if i < len(polys) else 0.0 for i in range(order + 1)]
        if k == "step":
            y0, y1, t0, t1 = p[:4]
            if t <= t0:
                return [float(y0)] + [0.0] * order
            if t >= t1:
                return [float(y1)] + [0.0] * order
            T = t1 - t0
            tau = (t - t0) / T
            polys = self._polys
            out = []
            for i in range(order + 1):
                val = _horner(polys[i], tau) if i < len(polys) else 0.0
                out.append((y1 - y0) * val / T ** i)
            out[0] += y0
            return out
        raise ValueError(f"unknown signal kind {k!r}")

    def describe(self) -> str:
        args = ",".join(f"{x:g}" for x in self.params[:4 if self.kind == "step" else None])
        return f"{self.kind}({args})"


def _horner(coeffs, t):
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * t + c
    return acc


def smoothstep(y_from: float, y_to: float, t0: float, t1: float, smooth: int) -> Signal:
    return Signal("step", (float(y_from), float(y_to), float(t0), float(t1), int(smooth)))


def sinusoid(A: float, omega: float, phase: float = 0.0, offset: float = 0.0) -> Signal:
    return Signal("sin", (float(A), float(omega), float(phase), float(offset)))


def constant(c: float) -> Signal:
    return Signal("const", (float(c),))


_SIG = re.compile(r"^\s*(sin|step|const|poly)\s*\(([^)]*)\)\s*$")
_ARITY = {"sin": (2, 4), "step": (4, 4), "const": (1, 1), "poly": (1, 64)}


def parse_signal(text: str, smooth: int) -> Signal:
    m = _SIG.match(text)
    if not m:
        raise ValueError(f"cannot parse reference {text!r}")
    kind = m.group(1)
    try:
        args = [float(a) for a in m.group(2).split(",") if a.strip()]
    except ValueError:
        raise ValueError(f"non-numeric argument in {text!r}") from None
    lo, hi = _ARITY[kind]
    if not lo <= len(args) <= hi:
        raise ValueError(f"{kind} takes {lo}..{hi} arguments, got {len(args)}")
    if kind == "sin":
        args += [0.0] * (4 - len(args))
        return sinusoid(*args)
    if kind == "step":
        return smoothstep(*args, smooth=smooth)
    if kind == "const":
        return constant(args[0])
    return Signal("poly", tuple(args))


@dataclass
class ReferenceSet:
    signals: dict  # j -> Signal

    def jets(self, t: float, orders: Sequence[int]) -> list[list[float]]:
        return [self.signals[j].jets(t, orders[j - 1]) for j in range(1, len(orders) + 1)]


def reference_eval(sig: Signal, t: float, order: int) -> float:
    return sig.jets(t, order)[order]


# --- tracking equations -------------------------------------------------------

def required_orders(plan: StagePlan) -> MultiIndex:
    """Smallest R compatible with the jets the plan actually uses."""
    need = {j: 0 for j in range(1, plan.system.m + 1)}
    exprs = list(plan.feedback.exprs)
    for st in plan.stages:
        for ys in st.ys.values():
            exprs.extend(ys)
    inv = {(s, c): j for j, (s, c) in plan.output_stage.items()}
    for e in exprs:
        for w in free_vars(e):
            if w.family == "v":
                j = inv[(w.stage, w.index)]
                need[j] = max(need[j], w.order)
    return MultiIndex(plan.kappa[j - 1] + need[j] for j in sorted(need))


@dataclass
class TrackingEquations:
    plan: StagePlan
    R: MultiIndex
    gains: GainSet
    equations: list  # (JetVar v-jet, Expr) in evaluation order

    def check_triangular(self):
        defined = set()
        for v, e in self.equations:
            for w in free_vars(e):
                if w.family == "v" and w not in defined:
                    raise TrackingError(f"{v.name} uses {w.name} before it is defined")
                if w.family == "u":
                    raise TrackingError(f"{v.name} depends on input {w.name}")
            defined.add(v)
        return True


def build_tracking_equations(plan: StagePlan, gains: GainSet, R: Sequence[int] | None = None
                             ) -> TrackingEquations:
    R = plan.system.R if R is None else MultiIndex(R)
    if R is None:
        raise TrackingError("tracking law needs R (declare it or pass it explicitly)")
    R = MultiIndex(R)
    if not plan.kappa <= R:
        raise TrackingError(f"kappa {plan.kappa} is not <= R {R}")
    need = required_orders(plan)
    if not need <= R:
        raise TrackingError(f"the plan uses new-input jets beyond R - kappa (needs R >= {need})")
    eqs = []
    for st in plan.stages:
        for j in st.outputs:
            k = plan.kappa[j - 1]
            a = gains.coeffs[j]
            ys = plan.ys(j)
            for lam in range(0, R[j - 1] - k + 1):
                rhs = var(JetVar("yd", j, k + lam))
                for beta in range(k):
                    if a[beta] == 0.0:
                        continue
                    o = beta + lam
                    y_o = ys[o] if o < k else var(plan.v_var(j, o - k))
                    err = sub(y_o, var(JetVar("yd", j, o)))
                    rhs = sub(rhs, mul(const(a[beta]), err))
                eqs.append((plan.v_var(j, lam), rhs))
    te = TrackingEquations(plan, R, gains, eqs)
    te.check_triangular()
    return te


@dataclass
class TrackingLaw:
    """Numeric evaluation program ``(x, y^d-jets) -> (v-jets, u)``."""

    equations: TrackingEquations
    states: list
    ref_vars: list  # yd JetVars in input order
    program: object  # Compiled: outputs u then v-jets
    symbolic: list | None = None

    @property
    def plan(self) -> StagePlan:
        return self.equations.plan

    @property
    def R(self) -> MultiIndex:
        return self.equations.R

    def ref_values(self, jets: Sequence[Sequence[float]]) -> list[float]:
        return [jets[v.index - 1][v.order] for v in self.ref_vars]

    def __call__(self, x: Sequence[float], ref_jets: Sequence[Sequence[float]]):
        out = self.program(list(x) + self.ref_values(ref_jets))
        m = self.plan.system.m
        vj = dict(zip((v for v, _ in self.equations.equations), out[m:]))
        return vj, out[:m]


def tracking_law(plan: StagePlan, gains: GainSet, R: Sequence[int] | None = None) -> TrackingLaw:
    te = build_tracking_equations(plan, gains, R)
    sysdef = plan.system
    states = sysdef.states
    ref_vars = [JetVar("yd", j, o) for j in range(1, sysdef.m + 1) for o in range(te.R[j - 1] + 1)]
    fb = plan.feedback
    prog = compile_program(states + ref_vars, te.equations, list(fb.exprs) + [var(v) for v, _ in te.equations])
    return TrackingLaw(te, states, ref_vars, prog)


def resolve_tracking(law: TrackingLaw, x: Sequence[float], ref_jets: Sequence[Sequence[float]]):
    """Forward substitution through the triangular set, then u from the feedback."""
    return law(x, ref_jets)


def synthesize_symbolic_law(plan: StagePlan, gains: GainSet, R: Sequence[int] | None = None) -> list[Expr]:
    """Closed form u = α(x, y^d-jets) by substituting the tracking equations."""
    if not all(st.affine for st in plan.stages):
        raise TrackingError("symbolic law needs every stage to be solved in closed form")
    te = build_tracking_equations(plan, gains, R)
    known: dict = {}
    for v, e in te.equations:
        known[v] = tidy(substitute(e, known)) if known else tidy(e)
    return [tidy(substitute(e, known)) for e in plan.feedback.exprs]


def law_free_vars(exprs: Sequence[Expr]) -> list[JetVar]:
    out = set()
    for e in exprs:
        out |= free_vars(e)
    return sort_vars(out)


__all__ = [
    "GainError", "GainSet", "ReferenceSet", "Signal", "TrackingEquations", "TrackingError",
    "TrackingLaw", "build_tracking_equations", "companion", "constant", "law_free_vars",
    "parse_signal", "poles_to_coefficients", "reference_eval", "required_orders",
    "resolve_tracking", "sinusoid", "smoothstep", "smoothstep_coefficients",
    "synthesize_symbolic_law", "tracking_law",
]
