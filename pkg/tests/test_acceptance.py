"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import subprocess
import sys
import time

import numpy as np
import pytest

import test_flatsys
import test_jets
from flatctl.expr import evaluate, parse
from flatctl.expr.core import free_vars
from flatctl.flatsys import builtin_academic, builtin_crane
from flatctl.jets import sort_vars
from flatctl.kappa import run_procedure
from flatctl.scenarios import (PERTURBATION, decoupling_check, default_scenario, hover_check, seeded_signs)
from flatctl.sim import (SimConfig, consistent_state, error_ode_check, exact_start_check, integrate_step,
                         io_behavior_check, simulate_closed_loop)

SEED = 7
FEEDBACK_FIXTURES = {
    "u1": "v1_1",
    "u2": "v2_1 - x4*v1_1@1",
    "u3": "v1_2 - x10 - v2_1 + x4*v1_1@1",
}


def report(capsys, number, title, passed, detail):
    with capsys.disabled():
        print(f"\ncriterion {number} {title}: {'PASS' if passed else 'FAIL'} {detail}")


def fmt(values):
    return "[" + ", ".join("%.2e" % v for v in values) + "]"


@pytest.fixture(scope="module")
def academic_run(academic_law):
    sc = default_scenario(academic_law)
    x0 = consistent_state(academic_law, sc.refs, sc.x_guess)
    tr = simulate_closed_loop(academic_law, sc.refs, SimConfig(sc.t_end, sc.dt, x0=x0))
    return sc, x0, tr


@pytest.fixture(scope="module")
def crane_scenario(crane_law):
    return default_scenario(crane_law)


@pytest.fixture(scope="module")
def crane_exact(crane_law, crane_scenario):
    sc = crane_scenario
    x0 = consistent_state(crane_law, sc.refs, sc.x_guess)
    return simulate_closed_loop(crane_law, sc.refs, SimConfig(sc.t_end, sc.dt, x0=x0))


def test_criterion_1_academic_structure(capsys):
    t0 = time.perf_counter()
    plan = run_procedure(builtin_academic())
    elapsed = time.perf_counter() - t0
    st = plan.stages
    checks = [
        plan.n_stages == 3,
        st[0].K == (1, 2, 1, 1) and st[0].rank == 2,
        st[1].K == (2, 2) and st[1].rank == 1,
        plan.kappa == (1, 2, 2, 5),
        abs(plan.kappa) == 10,
        plan.system.R == (4, 3, 5, 5) and plan.kappa <= plan.system.R,
        elapsed < 5.0,
    ]
    detail = (f"stages={plan.n_stages} K1={st[0].K} m1={st[0].rank} K2={st[1].K} m2={st[1].rank} "
              f"kappa={tuple(plan.kappa)} |kappa|={abs(plan.kappa)} time={elapsed:.2f}s")
    report(capsys, 1, "academic structure", all(checks), detail)
    assert all(checks), detail


def test_criterion_2_academic_feedback(capsys, academic_plan):
    reg = academic_plan.system.registry
    fb = dict(zip((u.name for u in academic_plan.feedback.inputs), academic_plan.feedback.exprs))
    wants = {name: parse(text, reg) for name, text in FEEDBACK_FIXTURES.items()}
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(50):
        for name, want in wants.items():
            got = fb[name]
            p = {v: float(rng.uniform(-1, 1)) for v in sort_vars(free_vars(got) | free_vars(want))}
            a, b = evaluate(got, p), evaluate(want, p)
            scale = max(abs(a), abs(b))
            worst = max(worst, abs(a - b) / scale if scale else 0.0)
    passed = worst <= 1e-10
    report(capsys, 2, "academic feedback closed form", passed, f"max relative deviation {worst:.2e} at 50 points")
    assert passed


def test_criterion_3_crane_structure(capsys):
    t0 = time.perf_counter()
    plan = run_procedure(builtin_crane(), hints={1: [3]})
    elapsed = time.perf_counter() - t0
    st = plan.stages
    checks = [
        plan.n_stages == 2,
        st[0].K == (2, 2, 2) and st[0].rank == 1,
        st[0].outputs == [3] and plan.stage_kappas() == [(2,), (4, 4)],
        plan.kappa == (4, 4, 2),
        abs(plan.kappa) == 10,
        elapsed < 30.0,
    ]
    detail = (f"stages={plan.n_stages} K1={st[0].K} m1={st[0].rank} stage form {plan.kappa_report()} "
              f"kappa={tuple(plan.kappa)} time={elapsed:.2f}s")
    report(capsys, 3, "crane structure", all(checks), detail)
    assert all(checks), detail


def test_criterion_4_input_output_behavior(capsys, academic_run, academic_plan):
    sc, _, tr = academic_run
    assert sc.dt == 1e-4 and sc.t_end == 2.0
    res = io_behavior_check(tr, academic_plan, tol=1e-3)
    report(capsys, 4, "input-output behavior", res.passed, f"max |d^k y/dt^k - v| per output {fmt(res.measured)}")
    assert res.passed, res.line()


def test_criterion_5_linear_decoupled_error_dynamics(capsys, academic_run, academic_law):
    sc, x0, _ = academic_run
    assert all(a == pytest.approx(2.0) for a in academic_law.equations.gains.coeffs[1])
    signs = seeded_signs(SEED, len(x0), 1)
    xp = [a + PERTURBATION * s for a, s in zip(x0, signs)]
    tr = simulate_closed_loop(academic_law, sc.refs, SimConfig(4.0, sc.dt, x0=xp))
    ode = error_ode_check(tr, academic_law, sc.refs, tol=1e-3)
    dec = decoupling_check(academic_law, sc, SEED, tol=1e-6)
    passed = ode.passed and dec.passed and not tr.events
    report(capsys, 5, "linear decoupled error dynamics", passed,
           f"error-ODE deviation {fmt(ode.measured)}; other channels with y1 perturbed {fmt(dec.measured)}")
    assert passed


def test_criterion_6_exact_start(capsys, academic_run, crane_exact):
    acad = exact_start_check(academic_run[2], tol=1e-6)
    crane = exact_start_check(crane_exact, tol=1e-6)
    passed = acad.passed and crane.passed
    report(capsys, 6, "exact start", passed, f"academic max|e| {fmt(acad.measured)}; crane {fmt(crane.measured)}")
    assert passed


def test_criterion_7_crane_behavior(capsys, crane_law, crane_scenario):
    sc = crane_scenario
    assert sc.t_end == 5.0
    x0 = consistent_state(crane_law, sc.refs, sc.x_guess)
    signs = seeded_signs(SEED, len(x0), 1)
    xp = [a + sc.perturbation * s for a, s in zip(x0, signs)]
    tr = simulate_closed_loop(crane_law, sc.refs, SimConfig(sc.t_end, sc.dt, x0=xp))
    ode = error_ode_check(tr, crane_law, sc.refs, tol=1e-2)
    hover = hover_check(crane_law, sc, tol=1e-9)
    passed = ode.passed and hover.passed and not tr.events
    report(capsys, 7, "crane transfer", passed,
           f"error-ODE deviation {fmt(ode.measured)}; events {len(tr.events)}; hover input drift {fmt(hover.measured)}")
    assert passed


def _rk4_ratio():
    def err(dt):
        x = [1.0]
        for k in range(int(round(1.0 / dt))):
            x = integrate_step(lambda t, y: list(y), x, k * dt, dt)
        return abs(x[0] - np.e)
    return err(0.1) / err(0.05)


def test_criterion_8_calculus_properties(capsys, crane):
    failures = []
    suites = [
        ("leibniz", test_jets.test_leibniz, ()),
        ("linearity", test_jets.test_linearity, ()),
        ("trajectory", test_jets.test_trajectory_consistency, (test_jets.trajectory.__wrapped__(),)),
        ("linsolve-fd", test_flatsys.test_crane_linsolve_jacobian_matches_finite_differences, (crane,)),
    ]
    for name, fn, args in suites:
        try:
            fn(*args)
        except AssertionError as err:
            failures.append(f"{name}: {err}")
    ratio = _rk4_ratio()
    if not 12.0 <= ratio <= 20.0:
        failures.append(f"rk4 ratio {ratio:.2f}")
    passed = not failures
    detail = f"leibniz/linearity/trajectory 100 cases each, linsolve 50 points, rk4 ratio {ratio:.2f}"
    report(capsys, 8, "calculus properties", passed, detail if passed else "; ".join(failures))
    assert passed


def test_criterion_9_determinism(capsys, tmp_path):
    outputs = []
    for k in range(2):
        res = subprocess.run([sys.executable, "-m", "flatctl", "verify", "builtin:academic", "--seed", str(SEED),
                              "--out", str(tmp_path / f"run{k}")], capture_output=True, timeout=600)
        outputs.append((res.returncode, res.stdout, (tmp_path / f"run{k}" / "verify.txt").read_bytes()))
    same = outputs[0] == outputs[1]
    passed = same and outputs[0][0] == 0
    result = outputs[0][1].decode().strip().splitlines()[-1]
    report(capsys, 9, "determinism", passed, f"byte-identical={same}, exit {outputs[0][0]}, {result}")
    assert passed
