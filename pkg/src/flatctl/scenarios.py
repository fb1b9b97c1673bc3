"""Default closed-loop scenarios and the verification suite used by ``flatctl verify``."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .expr import compile_exprs
from .expr.core import free_vars_all
from .jets import sort_vars
from .flatsys import FlatSystemDef
from .kappa import StagePlan, stage_residuals, verify_independence
from .sampling import sample_point
from .track import ReferenceSet, Signal, TrackingLaw, constant, smoothstep
from .sim import (CheckResult, SimConfig, SingularFeedback, consistent_state, error_ode_check,
                  exact_start_check, io_behavior_check, simulate_closed_loop)

STEP_AMPLITUDE = 0.1
PERTURBATION = 0.05
CRANE_PERTURBATION = 0.01
CRANE_REST = (0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
CRANE_TRANSFER = (1.0, 0.5, -0.05)  # load displacement (x, y, z)
# transitions start before and end after the default horizon so the high derivatives stay moderate;
# fixed so that a shorter --t-end does not steepen the reference
STEP_WINDOW = (-1.0, 3.0)


@dataclass
class Scenario:
    refs: ReferenceSet
    x_guess: list
    t_end: float
    dt: float
    err_horizon: float
    perturbation: float
    tol_io: float = 1e-3
    tol_err: float = 1e-3
    tol_exact: float = 1e-6
    hover: bool = False
    notes: list = field(default_factory=list)


def reference_smoothness(law: TrackingLaw) -> int:
    return int(max(law.R)) + 1


def outputs_at(sysdef: FlatSystemDef, x: Sequence[float]) -> list[float]:
    """φ(x, 0): output values at a state with the inputs set to zero."""
    fn = compile_exprs(list(sysdef.outputs), sysdef.states + sysdef.inputs)
    return fn(list(x) + [0.0] * sysdef.m)


def default_scenario(law: TrackingLaw, t_end: float | None = None, dt: float | None = None) -> Scenario:
    sysdef = law.plan.system
    s = reference_smoothness(law)
    if sysdef.name == "crane":
        t_end = 5.0 if t_end is None else t_end
        dt = 1e-3 if dt is None else dt
        x_guess = list(CRANE_REST)
        y0 = outputs_at(sysdef, x_guess)
        refs = ReferenceSet({j + 1: smoothstep(y0[j], y0[j] + CRANE_TRANSFER[j], 0.0, t_end, s)
                             for j in range(3)})
        return Scenario(refs, x_guess, t_end, dt, t_end, CRANE_PERTURBATION, tol_err=1e-2, hover=True)
    t_end = 2.0 if t_end is None else t_end
    dt = 1e-4 if dt is None else dt
    x_guess = [0.0] * sysdef.n
    y0 = outputs_at(sysdef, x_guess)
    refs = ReferenceSet({j + 1: smoothstep(y0[j], y0[j] + STEP_AMPLITUDE, *STEP_WINDOW, s)
                         for j in range(sysdef.m)})
    return Scenario(refs, x_guess, t_end, dt, 2.0 * t_end, PERTURBATION)


def hover_references(sysdef: FlatSystemDef, x: Sequence[float]) -> ReferenceSet:
    y0 = outputs_at(sysdef, x)
    return ReferenceSet({j + 1: constant(y0[j]) for j in range(sysdef.m)})


def seeded_signs(seed: int, count: int, tag: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, tag]))
    return rng.choice([-1.0, 1.0], size=count)


# --- verification suite ---------------------------------------------------------

def _fail(name: str, tol: float, detail: str) -> CheckResult:
    return CheckResult(name, False, [math.inf], tol, f" ({detail})")


def feedback_residual_check(plan: StagePlan, seed: int, points: int = 7, tol: float = 1e-9) -> CheckResult:
    """Stage equations hold with u from the feedback law at seeded (x, v-jet) points."""
    fb = plan.feedback
    rows = [r for st in plan.stages for r in st.rows]
    found = free_vars_all(list(fb.exprs) + rows) | set(plan.system.states)
    variables = sort_vars(found - set(plan.system.inputs))
    worst, used = 0.0, 0
    for i in range(points):
        for attempt in range(20):
            p = sample_point(variables, seed, 1000 + i, attempt, plan.system.box)
            try:
                res = stage_residuals(plan, p)
            except (ArithmeticError, ValueError, RuntimeError):
                continue
            worst = max([worst] + [abs(r) for r in res])
            used += 1
            break
    if used == 0:
        return _fail("feedback_residual", tol, "no admissible sample point")
    return CheckResult("feedback_residual", worst <= tol, [worst], tol)


def decoupling_check(law: TrackingLaw, sc: Scenario, seed: int, tol: float = 1e-6) -> CheckResult:
    """Start off-reference only in the first channel; the other errors must stay at zero."""
    plan = law.plan
    kappa = plan.kappa
    signs = seeded_signs(seed, kappa[0], 2)
    target = [[sc.perturbation * s for s in signs]] + [[0.0] * k for k in kappa[1:]]
    x0 = consistent_state(law, sc.refs, sc.x_guess, e_target=target)
    tr = simulate_closed_loop(law, sc.refs, SimConfig(sc.err_horizon, sc.dt, x0=x0))
    devs = [float(np.max(np.abs(tr.e[:, j]))) for j in range(1, plan.system.m)]
    return CheckResult("decoupling", all(d <= tol for d in devs), devs, tol)


def hover_check(law: TrackingLaw, sc: Scenario, tol: float = 1e-9) -> CheckResult:
    """Constant references at an equilibrium: the applied input must not move."""
    sysdef = law.plan.system
    refs = hover_references(sysdef, sc.x_guess)
    tr = simulate_closed_loop(law, refs, SimConfig(sc.t_end, sc.dt, x0=list(sc.x_guess)))
    devs = [float(np.max(np.abs(tr.u[:, j] - tr.u[0, j]))) for j in range(sysdef.m)]
    return CheckResult("hover_feedforward", all(d <= tol for d in devs), devs, tol)


def _guarded(name, tol, fn, *args, **kw):
    try:
        return fn(*args, **kw), None
    except SingularFeedback as err:
        return _fail(name, tol, f"singularity: {err}"), err


def run_verification(plan: StagePlan, law: TrackingLaw, sc: Scenario, seed: int):
    """Run the check suite; returns (results, singular_errors)."""
    results: list[CheckResult] = []
    singular: list[SingularFeedback] = []
    sysdef = plan.system
    if sysdef.R is not None:
        rep = verify_independence(plan, seed=seed)
        ranks = ",".join(str(r) for r in rep.sample_ranks)
        results.append(CheckResult("independence", rep.passed, [float(min(rep.sample_ranks))],
                                   float(rep.expected),
                                   summary=f"expected rank {rep.expected}, sample ranks [{ranks}]"))
    results.append(feedback_residual_check(plan, seed))

    def exact_run():
        x0 = consistent_state(law, sc.refs, sc.x_guess)
        return simulate_closed_loop(law, sc.refs, SimConfig(sc.t_end, sc.dt, x0=x0))

    tr, err = _guarded("io_behavior", sc.tol_io, exact_run)
    if err is None:
        results.append(io_behavior_check(tr, plan, tol=sc.tol_io))
        results.append(exact_start_check(tr, tol=sc.tol_exact))
    else:
        singular.append(err)
        results.append(tr)
        results.append(_fail("exact_start", sc.tol_exact, "simulation aborted"))

    def perturbed_run():
        x0 = consistent_state(law, sc.refs, sc.x_guess)
        signs = seeded_signs(seed, sysdef.n, 1)
        xp = [a + sc.perturbation * s for a, s in zip(x0, signs)]
        trace = simulate_closed_loop(law, sc.refs, SimConfig(sc.err_horizon, sc.dt, x0=xp))
        return error_ode_check(trace, law, sc.refs, tol=sc.tol_err)

    res, err = _guarded("error_ode", sc.tol_err, perturbed_run)
    results.append(res)
    if err is not None:
        singular.append(err)
    if sysdef.m > 1:
        res, err = _guarded("decoupling", 1e-6, decoupling_check, law, sc, seed)
        results.append(res)
        if err is not None:
            singular.append(err)
    if sc.hover:
        res, err = _guarded("hover_feedforward", 1e-9, hover_check, law, sc)
        results.append(res)
        if err is not None:
            singular.append(err)
    return results, singular


def apply_reference_overrides(sc: Scenario, signals: Mapping[int, Signal]) -> Scenario:
    merged = dict(sc.refs.signals)
    merged.update(signals)
    sc.refs = ReferenceSet(merged)
    return sc


__all__ = [
    "Scenario", "apply_reference_overrides", "decoupling_check", "default_scenario",
    "feedback_residual_check", "hover_check", "hover_references", "outputs_at", "reference_smoothness",
    "run_verification", "seeded_signs",
]
