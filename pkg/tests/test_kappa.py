import time

import numpy as np
import pytest

from flatctl.expr import ONE, derivative, evaluate, parse, var
from flatctl.expr.core import free_vars, free_vars_all, structural_key
from flatctl.flatsys import builtin_academic, builtin_crane, chain_of_integrators, parse_system
from flatctl.jets import DerivativeCapExceeded, MultiIndex, lie_iterate, sort_vars
from flatctl.kappa import (ProcedureError, check_plan, generic_rank, pivoted_qr_order, run_procedure,
                           stage_relative_degrees, stage_residuals, verify_independence)
from flatctl.sampling import sample_point

CUBIC = """\
[states]
x1 x2
[inputs]
u
[dynamics]
x1' = x2
x2' = u + u^3
[flat_output]
y1 = x1
[declare]
R = (3)
"""


def residual_points(plan, count, seed):
    fb = plan.feedback
    rows = [r for st in plan.stages for r in st.rows]
    vs = sort_vars((free_vars_all(list(fb.exprs) + rows) | set(plan.system.states)) - set(plan.system.inputs))
    return [sample_point(vs, seed, i, box=plan.system.box) for i in range(count)]


# --- rank utilities --------------------------------------------------------------

def test_identity_rank():
    reg = builtin_academic().registry
    one, zero = ONE, derivative(var(reg.x(1)), {reg.x(2): ONE})
    J = [[one if i == j else zero for j in range(3)] for i in range(3)]
    assert generic_rank(J).rank == 3


def test_pivoted_qr_prefers_lowest_index_on_ties():
    A = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert pivoted_qr_order(A)[:2] == [0, 2]
    B = np.array([[0.0, 3.0, 1.0], [0.0, 0.0, 2.0]])
    assert pivoted_qr_order(B)[0] == 1


def test_rank_disagreement_is_reported():
    s = parse_system("[states]\nx1 x2\n[inputs]\nu\n[dynamics]\nx1' = x2\nx2' = u\n"
                     "[flat_output]\ny1 = x1\n[box]\nx1 = -0.2, 0.2\n")
    x1 = parse("x1^8", s.registry)
    one = parse("1", s.registry)
    zero = parse("0", s.registry)
    found = None
    for seed in range(60):
        res = generic_rank([[one, zero], [zero, x1]], seed=seed, box=s.box)
        assert res.rank == 2
        if res.diagnostic:
            found = res
            break
    assert found is not None
    assert "disagree" in found.diagnostic


# --- academic --------------------------------------------------------------------

def test_academic_stage_structure(academic_plan):
    p = academic_plan
    assert p.n_stages == 3
    assert [st.K for st in p.stages] == [(1, 2, 1, 1), (2, 2), (5,)]
    assert [st.rank for st in p.stages] == [2, 1, 1]
    assert [st.outputs for st in p.stages] == [[1, 2], [3], [4]]
    assert [st.inputs for st in p.stages] == [[1, 2], [3], [4]]
    assert p.stage_kappas() == [(1, 2), (2,), (5,)]
    assert p.kappa == (1, 2, 2, 5)
    assert p.kappa_report() == "(1,2 | 2 | 5)"
    assert abs(p.kappa) == 10 and p.kappa <= p.system.R
    assert all(st.affine for st in p.stages)
    check_plan(p)


def test_academic_stage_relative_degrees(academic):
    reg = academic.registry
    K = stage_relative_degrees(academic.outputs, academic.dynamics, academic.inputs, reg)
    assert K == (1, 2, 1, 1)


def test_academic_rank_of_first_stage(academic):
    reg = academic.registry
    tops = [lie_iterate(h, academic.dynamics, k, reg)[-1] for h, k in zip(academic.outputs, (1, 2, 1, 1))]
    J = [[derivative(t, {u: ONE}) for u in academic.inputs] for t in tops]
    assert generic_rank(J).rank == 2


def test_academic_stage_expressions(academic_plan):
    reg = academic_plan.system.registry
    reg.register_v(1, 2)
    y3 = academic_plan.ys(3)
    assert y3[0] is parse("x5", reg)
    r = np.random.default_rng(0)
    want = parse("x3 + x4*v1_1", reg)
    for _ in range(5):
        pt = {w: float(r.uniform(-1, 1)) for w in free_vars(want) | free_vars(y3[1])}
        assert evaluate(y3[1], pt) == pytest.approx(evaluate(want, pt), abs=1e-14)


def test_stage_expressions_have_no_inputs(academic_plan, crane_plan):
    for plan in (academic_plan, crane_plan):
        for st in plan.stages:
            for j, ys in st.ys.items():
                for e in ys:
                    for w in free_vars(e):
                        assert w.family != "u"
                        assert not (w.family == "v" and w.stage >= st.index)


def test_academic_feedback_examples(academic_plan):
    reg = academic_plan.system.registry
    reg.register_v(1, 2)
    reg.register_v(2, 1)
    fb = academic_plan.feedback
    expected = ["v1_1", "v2_1 - x4*v1_1@1", "v1_2 - x10 - v2_1 + x4*v1_1@1"]
    r = np.random.default_rng(1)
    for got, text in zip(fb.exprs[:3], expected):
        want = parse(text, reg)
        for _ in range(10):
            pt = {w: float(r.uniform(-1, 1)) for w in free_vars(got) | free_vars(want)}
            assert evaluate(got, pt) == pytest.approx(evaluate(want, pt), abs=1e-13)
    assert all(w.family in ("x", "v") for e in fb.exprs for w in free_vars(e))


def test_feedback_satisfies_stage_equations(academic_plan, crane_plan):
    for plan in (academic_plan, crane_plan):
        for pt in residual_points(plan, 10, 77):
            assert max(abs(r) for r in stage_residuals(plan, pt)) <= 1e-9


def test_academic_independence(academic_plan):
    rep = verify_independence(academic_plan)
    assert rep.passed
    # n + |R - kappa| = 10 + (3 + 1 + 3 + 0)
    assert rep.expected == 17
    assert rep.sample_ranks == [17] * 7


def test_shrunken_kappa_fails_independence(academic_plan):
    rep = verify_independence(academic_plan, kappa=MultiIndex((1, 2, 2, 4)))
    assert not rep.passed
    assert max(rep.sample_ranks) < rep.expected


def test_independence_needs_R(academic_plan):
    s = chain_of_integrators(2)
    s.R = None
    with pytest.raises(ValueError):
        verify_independence(run_procedure(s))


def test_academic_runtime():
    t0 = time.perf_counter()
    run_procedure(builtin_academic())
    assert time.perf_counter() - t0 < 5.0


def test_plans_are_deterministic(academic):
    a = run_procedure(academic, seed=11)
    b = run_procedure(academic, seed=11)
    assert a.kappa == b.kappa
    assert [structural_key(e) for e in a.feedback.exprs] == [structural_key(e) for e in b.feedback.exprs]


# --- crane -----------------------------------------------------------------------

def test_crane_structure(crane_plan):
    p = crane_plan
    assert p.n_stages == 2
    assert p.stages[0].K == (2, 2, 2) and p.stages[0].rank == 1
    assert p.stages[0].outputs == [3]
    assert p.stage_kappas() == [(2,), (4, 4)]
    assert p.kappa == (4, 4, 2)
    assert p.kappa_report() == "(2 | 4,4)"
    assert abs(p.kappa) == 10
    check_plan(p)


def test_crane_hint_is_honored():
    p = run_procedure(builtin_crane(), hints={1: [3]})
    assert p.stages[0].outputs == [3]


def test_crane_feedback_arguments(crane_plan):
    names = {w.name for e in crane_plan.feedback.exprs for w in free_vars(e)}
    assert {"phi", "alpha", "beta", "omega_phi", "omega_alpha", "omega_beta"} <= names
    assert not names & {"xT", "yT", "vxT", "vyT"}
    assert any(n.startswith("v1_1") for n in names) and any(n.startswith("v2_") for n in names)


def test_crane_independence(crane_plan):
    rep = verify_independence(crane_plan)
    assert rep.passed and rep.expected == 12


# --- other systems ---------------------------------------------------------------

def test_chain_of_integrators_single_stage():
    p = run_procedure(chain_of_integrators(2))
    assert p.n_stages == 1
    assert p.kappa == (2,) == p.system.R


def test_non_affine_stage_uses_newton():
    s = parse_system(CUBIC)
    p = run_procedure(s)
    assert p.kappa == (2,) and not p.stages[0].affine
    for pt in residual_points(p, 5, 3):
        assert abs(stage_residuals(p, pt)[0]) <= 1e-9
    with pytest.raises(ProcedureError, match="not affine"):
        run_procedure(s, allow_newton=False)


def test_non_flat_output_hits_cap():
    s = parse_system("[states]\nx1 x2\n[inputs]\nu\n[dynamics]\nx1' = x1\nx2' = u\n[flat_output]\ny1 = x1\n")
    with pytest.raises(DerivativeCapExceeded):
        run_procedure(s)


def test_symbolic_only_dependence_is_pruned():
    # u appears in the output derivative only through a factor that is zero everywhere
    s = parse_system("[states]\nx1 x2\n[inputs]\nu\n[dynamics]\nx1' = x2 + (sin(x1)^2 + cos(x1)^2 - 1)*u\n"
                     "x2' = u\n[flat_output]\ny1 = x1\n")
    p = run_procedure(s)
    assert p.kappa == (2,)
