"""Fixed-step simulation, closed-loop harness and trace verification."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

from .expr import EvaluationError, compile_exprs, compile_program
from .expr.core import var
from .jets import JetVar
from .kappa import StagePlan
from .track import ReferenceSet, TrackingLaw, companion

EPS = np.finfo(float).eps


class SingularFeedback(RuntimeError):
    """The closed loop hit a point where the law cannot be evaluated."""

    def __init__(self, message: str, t: float | None = None, x=None):
        self.t = t
        self.x = None if x is None else list(x)
        where = "" if t is None else f" at t={t:.6g}"
        super().__init__(message + where)


@dataclass
class SimConfig:
    t_end: float
    dt: float
    integrator: str = "rk4"
    x0: Sequence[float] | None = None
    diverge: float = 1e8  # |x| beyond this aborts the run

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end >= self.dt:
            raise ValueError("t_end must be at least dt")
        if self.integrator not in ("rk4", "euler"):
            raise ValueError(f"unknown integrator {self.integrator!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


def rk4_step(f: Callable, t: float, x: Sequence[float], dt: float) -> list[float]:
    """Classical fourth-order Runge-Kutta step for x' = f(t, x)."""
    h2 = 0.5 * dt
    k1 = f(t, x)
    k2 = f(t + h2, [a + h2 * b for a, b in zip(x, k1)])
    k3 = f(t + h2, [a + h2 * b for a, b in zip(x, k2)])
    k4 = f(t + dt, [a + dt * b for a, b in zip(x, k3)])
    return [a + dt / 6.0 * (b + 2.0 * c + 2.0 * d + e) for a, b, c, d, e in zip(x, k1, k2, k3, k4)]


def euler_step(f: Callable, t: float, x: Sequence[float], dt: float) -> list[float]:
    return [a + dt * b for a, b in zip(x, f(t, x))]


def integrate_step(f: Callable, x: Sequence[float], t: float, dt: float, method: str = "rk4"):
    return (rk4_step if method == "rk4" else euler_step)(f, t, x, dt)


@dataclass
class SimTrace:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    yd: np.ndarray
    e: np.ndarray
    v: np.ndarray | None = None  # v^j (order 0) aligned with outputs
    state_names: list = field(default_factory=list)
    input_names: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def to_csv(self) -> str:
        n, m = self.x.shape[1], self.y.shape[1]
        header = (["t"] + [f"x{i}" for i in range(1, n + 1)] + [f"u{j}" for j in range(1, self.u.shape[1] + 1)]
                  + [f"y{j}" for j in range(1, m + 1)] + [f"yd{j}" for j in range(1, m + 1)]
                  + [f"e{j}" for j in range(1, m + 1)])
        buf = io.StringIO()
        buf.write(",".join(header) + "\n")
        cols = np.column_stack([self.t, self.x, self.u, self.y, self.yd, self.e])
        for row in cols:
            buf.write(",".join("%.17g" % v for v in row) + "\n")
        return buf.getvalue()


def open_loop_simulation(sysdef, u_of_t: Callable[[float], Sequence[float]], cfg: SimConfig):
    """Simulate x' = f(x, u(t)); returns (t, x, u) arrays."""
    fn = compile_exprs([sysdef.dynamics[x] for x in sysdef.states], sysdef.states + sysdef.inputs)

    def f(t, x):
        return fn(list(x) + list(u_of_t(t)))

    x = list(cfg.x0)
    ts, xs, us = [0.0], [list(x)], [list(u_of_t(0.0))]
    for k in range(cfg.n_steps):
        t = k * cfg.dt
        x = integrate_step(f, x, t, cfg.dt, cfg.integrator)
        ts.append((k + 1) * cfg.dt)
        xs.append(x)
        us.append(list(u_of_t(ts[-1])))
    return np.array(ts), np.array(xs), np.array(us)


class ClosedLoop:
    """Right-hand side of the closed loop plus per-point outputs."""

    def __init__(self, law: TrackingLaw, refs: ReferenceSet):
        self.law = law
        self.refs = refs
        plan = law.plan
        sysdef = plan.system
        self.sysdef = sysdef
        self.m = sysdef.m
        self.n = sysdef.n
        eqs = law.equations.equations
        assigns = list(eqs) + list(zip(sysdef.inputs, plan.feedback.exprs))
        outputs = ([sysdef.dynamics[x] for x in sysdef.states]
                   + [var(u) for u in sysdef.inputs]
                   + list(sysdef.outputs)
                   + [var(plan.v_var(j)) for j in range(1, self.m + 1)])
        self.program = compile_program(sysdef.states + law.ref_vars, assigns, outputs)
        self.orders = list(law.R)

    def reset(self):
        self.program.reset()

    def evaluate(self, t: float, x: Sequence[float]):
        jets = self.refs.jets(t, self.orders)
        out = self.program(list(x) + self.law.ref_values(jets))
        return out, jets

    def rhs(self, t: float, x: Sequence[float]) -> list[float]:
        return self.evaluate(t, x)[0][:self.n]


def simulate_closed_loop(law: TrackingLaw, refs: ReferenceSet, cfg: SimConfig) -> SimTrace:
    """Integrate the closed loop, recording x, u, y, y^d, e and v at the grid points."""
    cl = ClosedLoop(law, refs)
    cl.reset()
    n, m = cl.n, cl.m
    sysdef = cl.sysdef
    N = cfg.n_steps
    T = np.empty(N + 1)
    X = np.empty((N + 1, n))
    U = np.empty((N + 1, m))
    Y = np.empty((N + 1, m))
    YD = np.empty((N + 1, m))
    V = np.empty((N + 1, m))
    events: list[str] = []
    x = [float(v) for v in cfg.x0]
    step = rk4_step if cfg.integrator == "rk4" else euler_step
    cache: dict = {}

    def f(t, xx):
        try:
            out, jets = cl.evaluate(t, xx)
        except (EvaluationError, ArithmeticError, ValueError) as err:
            events.append(f"t={t:.6g}: {err}")
            raise SingularFeedback(f"closed loop failed: {err}", t, xx) from None
        cache["last"] = (out, jets)
        return out[:n]

    for k in range(N + 1):
        t = k * cfg.dt
        f(t, x)
        out, jets = cache["last"]
        T[k] = t
        X[k] = x
        U[k] = out[n:n + m]
        Y[k] = out[n + m:n + 2 * m]
        V[k] = out[n + 2 * m:n + 3 * m]
        YD[k] = [jets[j][0] for j in range(m)]
        if not all(math.isfinite(v) and abs(v) <= cfg.diverge for v in x):
            events.append(f"t={t:.6g}: state diverged")
            raise SingularFeedback("state diverged", t, x)
        if k < N:
            x = step(f, t, x, cfg.dt)
    return SimTrace(T, X, U, Y, YD, Y - YD, V,
                    [s.name for s in sysdef.states], [u.name for u in sysdef.inputs], events)


# --- consistent initial states -------------------------------------------------

class ErrorCoordinates:
    """Map x -> tracking-error jets (e^j, ..., e^j_[κ-1]) at time t."""

    def __init__(self, law: TrackingLaw, refs: ReferenceSet):
        plan = law.plan
        sysdef = plan.system
        self.law, self.refs = law, refs
        self.kappa = list(plan.kappa)
        exprs = []
        for j in range(1, sysdef.m + 1):
            exprs.extend(plan.ys(j))
        eqs = law.equations.equations
        self.program = compile_program(sysdef.states + law.ref_vars, eqs, exprs)
        self.orders = list(law.R)

    def __call__(self, t: float, x: Sequence[float]) -> list[list[float]]:
        jets = self.refs.jets(t, self.orders)
        vals = self.program(list(x) + self.law.ref_values(jets))
        out, pos = [], 0
        for j, k in enumerate(self.kappa):
            out.append([vals[pos + b] - jets[j][b] for b in range(k)])
            pos += k
        return out


def consistent_state(law: TrackingLaw, refs: ReferenceSet, x_guess: Sequence[float], t: float = 0.0,
                     e_target: Sequence[Sequence[float]] | None = None, tol: float = 1e-13):
    """Solve for x with prescribed tracking-error jets at time t (zero by default)."""
    ec = ErrorCoordinates(law, refs)
    kappa = ec.kappa
    target = [list(e_target[j]) if e_target is not None else [0.0] * k for j, k in enumerate(kappa)]

    def F(x):
        try:
            e = ec(t, x)
        except (EvaluationError, ArithmeticError, ValueError):
            return np.full(len(x), 1e6)
        return np.array([e[j][b] - target[j][b] for j, k in enumerate(kappa) for b in range(k)])

    sol = scipy.optimize.root(F, np.asarray(x_guess, dtype=float), method="hybr", tol=1e-14)
    res = np.max(np.abs(F(sol.x)))
    if not res <= max(tol, 1e-10):
        raise SingularFeedback(f"could not find a consistent initial state (residual {res:.3g})", t)
    return [float(v) for v in sol.x]


# --- verification ----------------------------------------------------------------

def central_weights(k: int, p: int) -> np.ndarray:
    """Weights of the k-th derivative on the stencil -p..p with unit spacing.

    Solves the moment conditions Σ w_i z_i^q = k! δ_qk, q = 0..2p.
    """
    z = np.arange(-p, p + 1, dtype=float)
    V = np.vander(z, increasing=True).T
    rhs = np.zeros(z.size)
    rhs[k] = math.factorial(k)
    return np.linalg.solve(V, rhs)


def fd_stride(k: int, dt: float) -> int:
    """Grid stride that balances truncation and rounding for a k-th derivative."""
    return max(1, int(round(EPS ** (1.0 / (k + 2)) / dt)))


def fd_derivative(y: np.ndarray, k: int, dt: float, stride: int | None = None):
    """Second-order central difference of order k; returns (values, valid slice)."""
    if k == 0:
        return y.copy(), slice(0, len(y))
    stride = fd_stride(k, dt) if stride is None else stride
    p = (k + 1) // 2
    w = central_weights(k, p)
    h = stride * dt
    reach = p * stride
    N = len(y)
    out = np.full(N, np.nan)
    if N <= 2 * reach:
        return out, slice(0, 0)
    acc = np.zeros(N - 2 * reach)
    for i, wi in enumerate(w):
        off = (i - p) * stride
        acc += wi * y[reach + off:N - reach + off]
    out[reach:N - reach] = acc / h ** k
    return out, slice(reach, N - reach)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: list
    tol: float
    detail: str = ""
    summary: str = ""  # replaces the "max dev" part when set

    def line(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        if self.summary:
            return f"{self.name}: {state} {self.summary}{self.detail}"
        vals = ", ".join("%.3e" % v for v in self.measured)
        return f"{self.name}: {state} max dev [{vals}] tol {self.tol:.1e}{self.detail}"


def io_behavior_check(trace: SimTrace, plan: StagePlan, tol: float = 1e-3, diverge: float = 1e6
                      ) -> CheckResult:
    """Compare finite-difference y^j_[κ] on the trace with the recorded v^j."""
    dt = float(trace.t[1] - trace.t[0])
    devs, notes = [], []
    for j in range(plan.system.m):
        k = plan.kappa[j]
        d, sl = fd_derivative(trace.y[:, j], k, dt)
        diff = np.abs(d[sl] - trace.v[sl, j])
        dev = float(np.max(diff)) if diff.size else math.inf
        if not np.all(np.isfinite(trace.y[:, j])) or np.max(np.abs(trace.y[:, j])) > diverge:
            dev = math.inf
            notes.append(f"y{j + 1} diverged")
        devs.append(dev)
    passed = all(d <= tol for d in devs)
    detail = "" if passed else " (" + "; ".join(
        notes or [f"deviation exceeds tolerance; dt={dt:g} may be too coarse"]) + ")"
    return CheckResult("io_behavior", passed, devs, tol, detail)


def analytic_errors(kappa: Sequence[int], gains, e0: Sequence[Sequence[float]], t: np.ndarray):
    """Solutions of e^(κ) + Σ a_β e^(β) = 0 on the grid t, one column per output."""
    out = np.zeros((len(t), len(kappa)))
    for j, k in enumerate(kappa):
        if k == 0:
            continue
        A = companion(gains.coeffs[j + 1])
        Phi = scipy.linalg.expm(t[:, None, None] * A[None, :, :])
        out[:, j] = Phi[:, 0, :] @ np.asarray(e0[j], dtype=float)
    return out


def error_ode_check(trace: SimTrace, law: TrackingLaw, refs: ReferenceSet, tol: float = 1e-3,
                    name: str = "error_ode") -> CheckResult:
    """Closed-loop errors against the analytic linear error dynamics."""
    plan = law.plan
    ec = ErrorCoordinates(law, refs)
    e0 = ec(float(trace.t[0]), trace.x[0])
    ref = analytic_errors(plan.kappa, law.equations.gains, e0, trace.t - trace.t[0])
    devs = [float(np.max(np.abs(trace.e[:, j] - ref[:, j]))) for j in range(plan.system.m)]
    return CheckResult(name, all(d <= tol for d in devs), devs, tol)


def exact_start_check(trace: SimTrace, tol: float = 1e-6, name: str = "exact_start") -> CheckResult:
    devs = [float(np.max(np.abs(trace.e[:, j]))) for j in range(trace.e.shape[1])]
    return CheckResult(name, all(d <= tol for d in devs), devs, tol)


def trace_output_consistency(trace: SimTrace, sysdef) -> float:
    """Max |y - φ(x, u)| re-evaluated on the trace columns."""
    fn = compile_exprs(list(sysdef.outputs), sysdef.states + sysdef.inputs)
    worst = 0.0
    for xk, uk, yk in zip(trace.x, trace.u, trace.y):
        vals = fn(list(xk) + list(uk))
        worst = max(worst, max(abs(a - b) for a, b in zip(vals, yk)))
    return worst


__all__ = [
    "CheckResult", "ClosedLoop", "ErrorCoordinates", "SimConfig", "SimTrace", "SingularFeedback",
    "analytic_errors", "central_weights", "consistent_state", "error_ode_check", "euler_step",
    "exact_start_check", "fd_derivative", "fd_stride", "integrate_step", "io_behavior_check",
    "open_loop_simulation", "rk4_step", "simulate_closed_loop", "trace_output_consistency",
]
