import math

import numpy as np
import pytest

from flatctl.flatsys import CRANE_DEFAULTS
from flatctl.scenarios import CRANE_REST, default_scenario, hover_references, outputs_at
from flatctl.sim import (ErrorCoordinates, SimConfig, SingularFeedback, analytic_errors, central_weights,
                         consistent_state, error_ode_check, exact_start_check, fd_derivative, fd_stride, integrate_step,
                         io_behavior_check, simulate_closed_loop, trace_output_consistency)
from flatctl.track import GainSet, ReferenceSet, constant, sinusoid, smoothstep, tracking_law


def expo(t, x):
    return list(x)


# --- integrator ----------------------------------------------------------------

def test_rk4_examples():
    assert integrate_step(lambda t, x: [0.0], [3.0], 0.0, 0.1) == [3.0]
    assert integrate_step(lambda t, x: [1.0], [2.0], 0.0, 0.1) == [2.1]
    assert integrate_step(expo, [1.0], 0.0, 0.1)[0] == pytest.approx(math.exp(0.1), abs=1e-7)
    assert integrate_step(expo, [1.0], 0.0, 0.1)[0] == pytest.approx(1.1051708333333333, abs=1e-15)


def _exp_error(dt):
    x = [1.0]
    for k in range(int(round(1.0 / dt))):
        x = integrate_step(expo, x, k * dt, dt)
    return abs(x[0] - math.e)


def test_rk4_order_ratio():
    ratio = _exp_error(0.1) / _exp_error(0.05)
    assert 12.0 <= ratio <= 20.0


def test_euler_step():
    assert integrate_step(expo, [1.0], 0.0, 0.1, method="euler") == [1.1]


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(1.0, 0.0)
    with pytest.raises(ValueError):
        SimConfig(0.01, 0.1)
    with pytest.raises(ValueError):
        SimConfig(1.0, 0.1, integrator="rk45")
    assert SimConfig(1.0, 1e-3).n_steps == 1000


# --- finite differences ----------------------------------------------------------

def test_central_weights():
    assert central_weights(1, 1) == pytest.approx([-0.5, 0.0, 0.5])
    assert central_weights(2, 1) == pytest.approx([1.0, -2.0, 1.0])
    assert central_weights(3, 2) == pytest.approx([-0.5, 1.0, 0.0, -1.0, 0.5])
    assert central_weights(4, 2) == pytest.approx([1.0, -4.0, 6.0, -4.0, 1.0])


def test_fd_derivative_of_sine():
    dt = 1e-4
    t = np.arange(0.0, 2.0, dt)
    for k in range(1, 6):
        d, sl = fd_derivative(np.sin(t), k, dt)
        exact = np.sin(t + k * np.pi / 2)
        assert np.max(np.abs(d[sl] - exact[sl])) <= 1e-3
    assert fd_stride(1, dt) == 1 and fd_stride(5, dt) > 1


# --- analytic error dynamics ----------------------------------------------------

def test_analytic_errors_first_and_second_order():
    t = np.linspace(0.0, 3.0, 31)
    g = GainSet.from_spec((1, 2))
    e = analytic_errors((1, 2), g, [[0.1], [1.0, 0.0]], t)
    assert e[:, 0] == pytest.approx(0.1 * np.exp(-2 * t), abs=1e-14)
    # double pole at -2 from e(0) = 1, e'(0) = 0
    assert e[:, 1] == pytest.approx((1 + 2 * t) * np.exp(-2 * t), abs=1e-12)


# --- closed loop ------------------------------------------------------------------

@pytest.fixture(scope="module")
def academic_short(academic_law):
    sc = default_scenario(academic_law, dt=1e-3)
    x0 = consistent_state(academic_law, sc.refs, sc.x_guess)
    tr = simulate_closed_loop(academic_law, sc.refs, SimConfig(0.5, 1e-3, x0=x0))
    return sc, x0, tr


def test_exact_start_tracks(academic_short):
    _, _, tr = academic_short
    assert exact_start_check(tr).passed
    assert np.max(np.abs(tr.e)) <= 1e-6


def test_output_column_is_reevaluated(academic_short, academic):
    _, _, tr = academic_short
    assert trace_output_consistency(tr, academic) == 0.0
    assert tr.e == pytest.approx(tr.y - tr.yd, abs=0)


def test_perturbed_first_output_decays(academic_short, academic_law):
    sc, x0, _ = academic_short
    xp = list(x0)
    xp[0] += 0.1
    tr = simulate_closed_loop(academic_law, sc.refs, SimConfig(1.0, 1e-3, x0=xp))
    assert np.max(np.abs(tr.e[:, 0] - 0.1 * np.exp(-2 * tr.t))) <= 1e-6
    assert error_ode_check(tr, academic_law, sc.refs).passed


def test_csv_format(academic_short):
    _, _, tr = academic_short
    text = tr.to_csv()
    lines = text.split("\n")
    assert lines[0] == ",".join(["t"] + [f"x{i}" for i in range(1, 11)] + [f"u{j}" for j in range(1, 5)]
                                + [f"y{j}" for j in range(1, 5)] + [f"yd{j}" for j in range(1, 5)]
                                + [f"e{j}" for j in range(1, 5)])
    assert text.endswith("\n") and "\r" not in text
    assert len(lines) == len(tr.t) + 2
    row = lines[1].split(",")
    assert len(row) == 27
    assert float(lines[2].split(",")[0]) == 1e-3
    assert all(float(a) == b for a, b in zip(lines[5].split(","), np.concatenate(
        [[tr.t[4]], tr.x[4], tr.u[4], tr.y[4], tr.yd[4], tr.e[4]])))


def test_coarse_step_fails_io_check(academic_law):
    sc = default_scenario(academic_law, dt=0.1)
    x0 = consistent_state(academic_law, sc.refs, sc.x_guess)
    tr = simulate_closed_loop(academic_law, sc.refs, SimConfig(sc.t_end, 0.1, x0=x0))
    res = io_behavior_check(tr, academic_law.plan)
    assert not res.passed
    assert "too coarse" in res.line()


def test_flipped_gain_sign_fails(academic_plan):
    coeffs = {j: [-a for a in c] for j, c in GainSet.from_spec(academic_plan.kappa).coeffs.items()}
    law = tracking_law(academic_plan, GainSet.from_spec(academic_plan.kappa, coeffs=coeffs))
    sc = default_scenario(law, dt=1e-3)
    x0 = consistent_state(law, sc.refs, sc.x_guess)
    xp = [a + 0.05 for a in x0]
    with pytest.raises(SingularFeedback, match="diverged"):
        simulate_closed_loop(law, sc.refs, SimConfig(4.0, 1e-3, x0=xp))


def test_crane_zero_gain_equilibrium(crane_plan):
    law = tracking_law(crane_plan, GainSet.zero(crane_plan.kappa))
    refs = hover_references(crane_plan.system, CRANE_REST)
    tr = simulate_closed_loop(law, refs, SimConfig(1.0, 1e-3, x0=list(CRANE_REST)))
    load0 = outputs_at(crane_plan.system, CRANE_REST)
    assert np.max(np.abs(tr.y - np.array(load0))) <= 1e-6
    hold = -CRANE_DEFAULTS["mL"] * CRANE_DEFAULTS["r"] * CRANE_DEFAULTS["g"]
    assert tr.u[:, 2] == pytest.approx(hold, abs=1e-12)


def test_consistent_state_hits_targets(academic_law):
    refs = ReferenceSet({1: sinusoid(0.1, 1.0), 2: constant(0.05), 3: sinusoid(0.1, 2.0, 0.3), 4: constant(0.0)})
    x0 = consistent_state(academic_law, refs, [0.0] * 10)
    e = ErrorCoordinates(academic_law, refs)(0.0, x0)
    assert max(abs(v) for row in e for v in row) <= 1e-10


def test_divergence_is_reported_with_time(academic_law):
    sc = default_scenario(academic_law, dt=1e-3)
    refs = ReferenceSet(dict(sc.refs.signals))
    refs.signals[3] = smoothstep(0.0, 3.0, 0.0, 1.0, 6)
    x0 = consistent_state(academic_law, refs, sc.x_guess)
    with pytest.raises(SingularFeedback) as info:
        simulate_closed_loop(academic_law, refs, SimConfig(2.0, 1e-3, x0=x0))
    assert info.value.t is not None and 0.0 < info.value.t < 2.0
