import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from flatctl.expr import (EvaluationError, NonIntegerExponent, NotAffine, ParseError, SubstitutionCycle,
                          UnknownIdentifier, add, affine_decompose, const, cos, derivative, differentiate,
                          div, evaluate, log, mul, neg, parse, power, simplify, sin, solve_affine, sqrt,
                          structural_key, sub, substitute, to_string, var)
from flatctl.expr.core import ADD, DIV, MUL, NEG, POW, SUB, free_vars, raw
from flatctl.jets import JetRegistry, JetVar

REG = JetRegistry(["x1", "x2", "x3", "x4", "x5", "x6", "x7", "x10"], ["u1", "u2", "u3"])
X = {name: REG.resolve(name) for name in REG.state_names}
U = {name: REG.resolve(name) for name in REG.input_names}
U1D = REG.resolve("u1", 1)
VARS = [X["x1"], X["x2"], X["x3"], U["u1"], U["u2"], U1D]


def P(text):
    return parse(text, REG)


def point(seed, variables=VARS):
    r = np.random.default_rng(seed)
    return {v: float(r.uniform(-0.9, 0.9)) for v in variables}


# --- parse / print -------------------------------------------------------------

def test_parse_sum_of_product():
    e = P("x3 + x4*u1")
    assert e is add(var(X["x3"]), mul(var(X["x4"]), var(U["u1"])))
    assert e.kind == ADD and e.args[1].kind == MUL


def test_parse_four_factor_product():
    reg = JetRegistry(["r", "phi", "alpha", "beta"], ["u"])
    e = parse("r*phi*cos(alpha)*cos(beta)", reg)
    factors = []
    node = e
    while node.kind == MUL:
        factors.append(node.args[1])
        node = node.args[0]
    factors.append(node)
    assert len(factors) == 4
    assert [f.kind for f in reversed(factors)] == ["var", "var", "cos", "cos"]


def test_parse_jet_suffix():
    e = P("u1@2")
    assert e.kind == "var"
    assert e.payload == JetVar("u", 1, 2, base="u1")


def test_parse_precedence_and_associativity():
    assert to_string(P("x1 - x2 - x3")) == "x1 - x2 - x3"
    assert P("x1 - (x2 - x3)").args[1].kind == SUB
    e = P("x1^2^3")
    # right associative: x1^(2^3) folds the exponent to 8
    assert e.kind == POW and e.payload == 8
    assert P("-x1^2").kind == NEG
    assert P("2*x1/x2").kind == DIV


def test_parse_scientific_literal():
    assert evaluate(P("1.5e-3*x1"), {X["x1"]: 2.0}) == pytest.approx(3e-3)


def test_parse_error_offset():
    with pytest.raises(ParseError) as info:
        P("x1 + * x2")
    assert info.value.offset == 5


def test_parse_error_offset_is_in_bytes():
    reg = JetRegistry(["x1"], ["u1"])
    with pytest.raises(ParseError) as info:
        parse("x1 + é", reg)
    assert info.value.offset == 5


def test_parse_unknown_identifier():
    with pytest.raises(UnknownIdentifier):
        P("x1 + zeta")


def test_parse_non_integer_exponent():
    with pytest.raises(NonIntegerExponent):
        P("x1^1.5")
    with pytest.raises(NonIntegerExponent):
        P("x1^x2")


def test_state_with_jet_suffix_rejected():
    with pytest.raises(ParseError):
        P("x1@1")


# --- evaluate ------------------------------------------------------------------

def test_evaluate_examples():
    assert evaluate(const(5.0), {}) == 5.0
    p = {X["x3"]: 1.0, X["x4"]: 2.0, U["u1"]: 3.0}
    assert evaluate(P("x3 + x4*u1"), p) == 7.0
    assert evaluate(sin(const(0.0)), {}) == 0.0


def test_evaluate_domain_errors_report_subtree():
    with pytest.raises(EvaluationError) as info:
        evaluate(P("x2 + log(x1)"), {X["x1"]: -1.0, X["x2"]: 0.0})
    assert info.value.subtree is not None
    assert info.value.subtree.kind == "log"
    with pytest.raises(EvaluationError):
        evaluate(P("1/x1"), {X["x1"]: 0.0})


# --- differentiate -------------------------------------------------------------

def test_differentiate_examples():
    assert differentiate(P("x4*u1"), U["u1"]) is var(X["x4"])
    assert differentiate(P("x3 + x4*u1"), X["x5"]) is const(0.0)
    d = differentiate(P("x4*x7*u1 - x6"), X["x7"])
    for seed in range(10):
        p = point(seed, [X["x4"], X["x7"], U["u1"], X["x6"]])
        assert evaluate(d, p) == pytest.approx(p[X["x4"]] * p[U["u1"]], rel=1e-12)


def test_derivative_finite_difference_oracle():
    e = P("x4*x7*u1 - x6")
    d = differentiate(e, X["x7"])
    for seed in range(10):
        p = point(seed, [X["x4"], X["x7"], U["u1"], X["x6"]])
        h = 1e-6
        hi, lo = dict(p), dict(p)
        hi[X["x7"]] += h
        lo[X["x7"]] -= h
        fd = (evaluate(e, hi) - evaluate(e, lo)) / (2 * h)
        assert abs(fd - evaluate(d, p)) <= 1e-6 * max(1.0, abs(fd))


# --- substitute / simplify -----------------------------------------------------

def test_substitute_stage_example():
    reg = JetRegistry(["x4", "x10"], ["u1", "u2", "u3"])
    reg.register_v(1, 2)
    reg.register_v(2, 1)
    e = parse("x10 + u2 + u3", reg)
    bindings = {reg.resolve("u2"): parse("v2_1 - x4*v1_1@1", reg),
                reg.resolve("u3"): parse("v1_2 - x10 - v2_1 + x4*v1_1@1", reg)}
    out = substitute(e, bindings)
    assert all(w.family in ("x", "v") for w in free_vars(out))
    r = np.random.default_rng(3)
    p = {w: float(r.uniform(-1, 1)) for w in free_vars(out)}
    assert evaluate(out, p) == pytest.approx(p[reg.resolve("v1_2")], abs=1e-12)


def test_substitute_identity_and_zero():
    e = P("x1*sin(x2) + u1")
    assert substitute(e, {X["x1"]: var(X["x1"])}) is e
    assert substitute(var(X["x1"]), {X["x1"]: const(0.0)}) is const(0.0)


def test_substitute_cycle_detected():
    with pytest.raises(SubstitutionCycle):
        substitute(P("x1"), {X["x1"]: P("x2 + 1"), X["x2"]: P("x1*2")})


def test_simplify_examples():
    assert simplify(P("0*u1 + x3")) is var(X["x3"])
    assert simplify(P("2 + 3")) is const(5.0)
    assert simplify(P("x4*u1 + 0*sin(x2)")) is P("x4*u1")
    assert simplify(P("x1^1")) is var(X["x1"])
    assert simplify(P("x1^0")) is const(1.0)
    assert simplify(P("x1*1")) is var(X["x1"])


# --- affine decomposition --------------------------------------------------------

def test_affine_examples():
    res = affine_decompose([P("u1")], [U["u1"]])
    assert evaluate(res.A[0][0], {}) == 1.0 and evaluate(res.b[0], {}) == 0.0
    res = affine_decompose([P("x10 + u2 + u3")], [U["u2"], U["u3"]])
    assert [evaluate(a, {}) for a in res.A[0]] == [1.0, 1.0]
    assert res.b[0] is var(X["x10"])
    assert affine_decompose([P("u1*u3")], [U["u1"], U["u3"]]) is NotAffine


def test_affine_sin_of_unknown_is_not_affine():
    assert affine_decompose([P("x1 + sin(u1)")], [U["u1"]]) is NotAffine
    assert affine_decompose([P("u1/u2")], [U["u1"], U["u2"]]) is NotAffine


def test_solve_affine_symbolic_and_linsolve():
    rows = [P("x1*u1 + u2 + x2"), P("u1 - x3*u2")]
    aff = affine_decompose(rows, [U["u1"], U["u2"]])
    rhs = [P("x3"), P("x2")]
    for max_symbolic in (3, 0):
        sol = solve_affine(aff, rhs, max_symbolic=max_symbolic)
        bind = dict(zip([U["u1"], U["u2"]], sol))
        for seed in range(5):
            p = point(seed)
            for row, r in zip(rows, rhs):
                assert evaluate(substitute(row, bind), p) == pytest.approx(evaluate(r, p), abs=1e-10)


# --- property suites -------------------------------------------------------------

LEAVES = st.sampled_from([var(v) for v in VARS]) | st.floats(0.1, 3.0).map(lambda c: const(round(c, 3)))


def _safe(children):
    a, b = children
    return st.sampled_from([
        add(a, b), sub(a, b), mul(a, b), neg(a),
        div(a, add(const(2.0), mul(b, b))),
        sin(a), cos(b), power(a, 2), power(b, 3),
        sqrt(add(const(1.5), mul(a, a))),
        log(add(const(1.5), mul(b, b))),
    ])


SAFE_EXPR = st.recursive(LEAVES, lambda inner: st.tuples(inner, inner).flatmap(_safe), max_leaves=12)

PROPS = settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@PROPS
@given(SAFE_EXPR, st.sampled_from(VARS), st.integers(0, 10_000))
def test_derivative_matches_finite_differences(e, w, seed):
    p = point(seed)
    d = evaluate(differentiate(e, w), p)
    h = 1e-5
    hi, lo = dict(p), dict(p)
    hi[w] += h
    lo[w] -= h
    fd = (evaluate(e, hi) - evaluate(e, lo)) / (2 * h)
    assert abs(fd - d) <= 1e-6 * max(1.0, abs(d))


@PROPS
@given(SAFE_EXPR, st.integers(0, 10_000))
def test_simplify_preserves_value(e, seed):
    raw_e = _unsimplified(e)
    s = simplify(raw_e)
    for k in range(20):
        p = point(seed * 31 + k)
        a, b = evaluate(raw_e, p), evaluate(s, p)
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def _unsimplified(e):
    # pad with identities that simplify must remove
    return raw(ADD, raw(MUL, e, const(1.0)), raw(MUL, const(0.0), e))


@PROPS
@given(SAFE_EXPR, SAFE_EXPR, st.integers(0, 10_000))
def test_substitute_then_evaluate(e, g, seed):
    p = point(seed)
    g = substitute(g, {X["x1"]: const(0.7)})  # bindings must not refer to bound variables
    out = substitute(e, {X["x1"]: g})
    q = dict(p)
    q[X["x1"]] = evaluate(g, p)
    a, b = evaluate(out, p), evaluate(e, q)
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


RAW_LEAVES = st.sampled_from([var(v) for v in VARS]) | st.sampled_from(
    [const(c) for c in (0.0, 1.0, 2.0, 0.5, 3.25, 1e-3, 12.0)])


def _raw_node(children):
    a, b = children
    return st.sampled_from([
        raw(ADD, a, b), raw(SUB, a, b), raw(MUL, a, b), raw(DIV, a, b), raw(NEG, a),
        raw(POW, a, payload=2), raw(POW, b, payload=-1), raw("sin", a), raw("exp", b),
    ])


RAW_EXPR = st.recursive(RAW_LEAVES, lambda inner: st.tuples(inner, inner).flatmap(_raw_node), max_leaves=15)


@PROPS
@given(RAW_EXPR)
def test_print_parse_round_trip(e):
    text = to_string(e)
    back = P(text)
    assert back is e
    assert structural_key(back) == structural_key(e)


@PROPS
@given(st.lists(st.tuples(SAFE_EXPR, SAFE_EXPR, SAFE_EXPR), min_size=1, max_size=3), st.integers(0, 10_000))
def test_affine_decompose_identity(parts, seed):
    unknowns = [U["u2"], U["u3"]]
    rows = [add(add(mul(a, var(U["u2"])), mul(b, var(U["u3"]))), c) for a, b, c in parts]
    res = affine_decompose(rows, unknowns)
    if res is NotAffine:
        return
    for k in range(20):
        p = point(seed * 17 + k, VARS + unknowns)
        for i, row in enumerate(rows):
            lin = sum(evaluate(res.A[i][c], p) * p[u] for c, u in enumerate(unknowns)) + evaluate(res.b[i], p)
            assert abs(evaluate(row, p) - lin) <= 1e-10 * max(1.0, abs(lin))


def test_affine_decompose_rejects_nonlinear_rows():
    rows = [mul(var(U["u2"]), var(U["u3"])), sin(var(U["u2"]))]
    for r in rows:
        assert affine_decompose([r], [U["u2"], U["u3"]]) is NotAffine


def test_derivative_direction_callable():
    e = P("x1*u1")
    d = derivative(e, lambda w: var(U1D) if w == U["u1"] else None)
    p = point(1)
    assert evaluate(d, p) == pytest.approx(p[X["x1"]] * p[U1D])


def test_expression_interning():
    assert P("x1 + x2") is P("x1 + x2")
    assert not math.isnan(evaluate(P("x1 + x2"), point(0)))
