"""Numeric evaluation of expression DAGs.

Two paths share the same semantics: :func:`evaluate` walks the DAG and
reports the offending subtree on domain errors, and :func:`compile_program`
emits straight-line Python for repeated evaluation in simulations.  The
compiled code falls back to the interpreter when it raises, so errors carry
the same context either way.
"""
from __future__ import annotations

import math
from typing import Mapping, Sequence

from .core import (ADD, CONST, DIV, IMPLICIT, LINSOLVE, MUL, NEG, POW, SUB, VAR,
                   Expr, derivative, free_vars, free_vars_all, postorder)

COND_LIMIT = 1e12
NEWTON_TOL = 1e-12
NEWTON_MAXIT = 50


class EvaluationError(ArithmeticError):
    """Numeric failure; ``subtree`` is the node whose evaluation failed."""

    def __init__(self, message: str, subtree: Expr | None = None):
        self.subtree = subtree
        self.reason = message
        if subtree is not None:
            from .printer import describe

            message = f"{message} in {describe(subtree, 200)}"
        super().__init__(message)


class SingularMatrixError(EvaluationError):
    pass


class NewtonFailure(EvaluationError):
    pass


# --- dense linear algebra on Python floats ---------------------------------

def lu_factor(a: Sequence[float], k: int, cond_limit: float = COND_LIMIT):
    """LU with partial pivoting of the row-major k*k matrix ``a``.

    Raises SingularMatrixError when a pivot vanishes or the ratio of the
    largest to the smallest pivot magnitude exceeds ``cond_limit``.
    """
    m = [list(a[i * k:(i + 1) * k]) for i in range(k)]
    perm = list(range(k))
    for j in range(k):
        p = max(range(j, k), key=lambda i: abs(m[i][j]))
        if m[p][j] == 0.0 or m[p][j] != m[p][j]:
            raise SingularMatrixError("singular matrix")
        if p != j:
            m[j], m[p] = m[p], m[j]
            perm[j], perm[p] = perm[p], perm[j]
        piv = m[j][j]
        rowj = m[j]
        for i in range(j + 1, k):
            f = m[i][j] / piv
            if f != 0.0:
                rowi = m[i]
                rowi[j] = f
                for c in range(j + 1, k):
                    rowi[c] -= f * rowj[c]
            else:
                m[i][j] = 0.0
    diag = [abs(m[i][i]) for i in range(k)]
    if max(diag) > cond_limit * min(diag):
        raise SingularMatrixError(
            f"ill-conditioned matrix (pivot ratio {max(diag) / min(diag):.3g})")
    return m, perm


def lu_solve(lu, b: Sequence[float]) -> list[float]:
    m, perm = lu
    k = len(perm)
    y = [b[perm[i]] for i in range(k)]
    for i in range(k):
        row = m[i]
        s = y[i]
        for c in range(i):
            s -= row[c] * y[c]
        y[i] = s
    for i in range(k - 1, -1, -1):
        row = m[i]
        s = y[i]
        for c in range(i + 1, k):
            s -= row[c] * y[c]
        y[i] = s / row[i]
    return y


def newton(fun, x0: Sequence[float], tol: float = NEWTON_TOL, maxit: int = NEWTON_MAXIT):
    """Damped Newton for ``fun(w) -> (residuals, row-major Jacobian)``."""
    k = len(x0)
    w = list(x0)
    r, jac = fun(w)
    norm = max(abs(v) for v in r)
    for _ in range(maxit):
        if norm <= tol:
            return w
        step = lu_solve(lu_factor(jac, k), r)
        lam = 1.0
        while True:
            trial = [w[i] - lam * step[i] for i in range(k)]
            try:
                r_t, jac_t = fun(trial)
                norm_t = max(abs(v) for v in r_t)
            except (ArithmeticError, ValueError):
                norm_t = math.inf
            if norm_t < norm or lam < 1e-4:
                break
            lam *= 0.5
        if not norm_t < math.inf:
            raise NewtonFailure("Newton step left the domain")
        w, r, jac, norm = trial, r_t, jac_t, norm_t
    if norm <= tol * 10:
        return w
    raise NewtonFailure(f"Newton did not converge (residual {norm:.3g})")


# --- interpreter -----------------------------------------------------------

_UNARY = {
    NEG: lambda a: -a,
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "sqrt": math.sqrt,
    "exp": math.exp,
    "log": math.log,
}


def _pow(a: float, p: int) -> float:
    if p < 0 and a == 0.0:
        raise ZeroDivisionError("zero to a negative power")
    return a ** p


class _ImplicitSolver:
    """Numeric solution of an implicit node family, with a warm start."""

    def __init__(self, residuals: Sequence[Expr], unknowns):
        from ..jets import sort_vars

        self.unknowns = tuple(unknowns)
        self.params = sort_vars(free_vars_all(residuals) - frozenset(self.unknowns))
        k = len(self.unknowns)
        jac = [derivative(r, {u: _one()}) for r in residuals for u in self.unknowns]
        self.fn = compile_program(list(self.unknowns) + self.params, [],
                                  list(residuals) + jac)
        self.k = k
        self.last = None

    def solve(self, params: Sequence[float]):
        k = self.k
        guess = self.last if self.last is not None else [0.0] * k
        pv = list(params)

        def fun(w):
            out = self.fn(list(w) + pv)
            return out[:k], out[k:]

        sol = newton(fun, guess)
        self.last = sol
        return sol

    def reset(self):
        self.last = None


def _one():
    from .core import ONE

    return ONE


_interp_solvers: dict = {}


def evaluate(e: Expr, valuation: Mapping) -> float:
    """Evaluate ``e`` at the point ``valuation`` (JetVar -> float)."""
    return evaluate_all([e], valuation)[0]


def evaluate_all(exprs: Sequence[Expr], valuation: Mapping) -> list[float]:
    vals: dict = {}
    lu_cache: dict = {}
    for n in postorder(exprs, into_implicit=False):
        k = n.kind
        try:
            if k == CONST:
                vals[n] = n.payload
            elif k == VAR:
                try:
                    vals[n] = float(valuation[n.payload])
                except KeyError:
                    raise EvaluationError(f"no value for {n.payload.name}", n) from None
            elif k in _UNARY:
                vals[n] = _UNARY[k](vals[n.args[0]])
            elif k == ADD:
                vals[n] = vals[n.args[0]] + vals[n.args[1]]
            elif k == SUB:
                vals[n] = vals[n.args[0]] - vals[n.args[1]]
            elif k == MUL:
                vals[n] = vals[n.args[0]] * vals[n.args[1]]
            elif k == DIV:
                vals[n] = vals[n.args[0]] / vals[n.args[1]]
            elif k == POW:
                vals[n] = _pow(vals[n.args[0]], n.payload)
            elif k == LINSOLVE:
                kk, c = n.payload
                mkey = n.args[:kk * kk]
                lu = lu_cache.get(mkey)
                if lu is None:
                    lu = lu_factor([vals[a] for a in mkey], kk)
                    lu_cache[mkey] = lu
                sol = lu_solve(lu, [vals[a] for a in n.args[kk * kk:]])
                vals[n] = sol[c]
            elif k == IMPLICIT:
                unknowns, c = n.payload
                key = (n.args, unknowns)
                solver = _interp_solvers.get(key)
                if solver is None:
                    solver = _interp_solvers[key] = _ImplicitSolver(n.args, unknowns)
                solver.reset()
                sol = solver.solve([float(valuation[p]) for p in solver.params])
                vals[n] = sol[c]
            else:
                raise EvaluationError(f"unknown node kind {k}", n)
        except EvaluationError as err:
            if err.subtree is None:
                raise type(err)(err.reason, n) from None
            raise
        except (ValueError, ZeroDivisionError, OverflowError) as err:
            raise EvaluationError(f"domain error ({err})", n) from None
        v = vals[n]
        if v != v or v in (math.inf, -math.inf):
            raise EvaluationError("non-finite value", n)
    return [vals[x] for x in exprs]


# --- compiler --------------------------------------------------------------

class Compiled:
    """Straight-line evaluator produced by :func:`compile_program`.

    Call with a sequence of input values (ordered as ``inputs``); returns the
    list of output values.  Assigned variables act as locals available to
    later assignments and to the outputs.
    """

    def __init__(self, inputs, assignments, outputs, fn, solvers, source):
        self.inputs = tuple(inputs)
        self.assignments = tuple(assignments)
        self.outputs = tuple(outputs)
        self._fn = fn
        self._solvers = solvers
        self.source = source

    def __call__(self, values: Sequence[float]) -> list[float]:
        try:
            return self._fn(values)
        except EvaluationError as err:
            if err.subtree is not None:
                raise
            self._diagnose(values)
            raise
        except (ArithmeticError, ValueError):
            self._diagnose(values)
            raise

    def _diagnose(self, values):
        point = dict(zip(self.inputs, values))
        for v, e in self.assignments:
            point[v] = evaluate(e, point)
        evaluate_all(list(self.outputs), point)

    def reset(self):
        """Drop Newton warm starts."""
        for s in self._solvers:
            s.reset()


_FN_NAMES = {"sin": "_sin", "cos": "_cos", "tan": "_tan", "sqrt": "_sqrt",
             "exp": "_exp", "log": "_log"}


def compile_program(inputs: Sequence, assignments: Sequence, outputs: Sequence[Expr]) -> Compiled:
    """Compile an ordered program into a Python function.

    ``inputs`` are JetVars, ``assignments`` is a list of (JetVar, Expr) pairs
    evaluated in order, ``outputs`` the expressions to return.
    """
    names: dict = {}
    lines = ["def _f(_a):"]
    for i, v in enumerate(inputs):
        names[("var", v)] = f"_a[{i}]"
    counter = [0]
    solvers = []
    ns = {"_sin": math.sin, "_cos": math.cos, "_tan": math.tan, "_sqrt": math.sqrt,
          "_exp": math.exp, "_log": math.log, "_lu_factor": lu_factor,
          "_lu_solve": lu_solve, "_pow": _pow, "_chk": _check_finite}
    node_name: dict = {}
    lu_names: dict = {}
    sol_names: dict = {}

    def fresh(prefix="t"):
        counter[0] += 1
        return f"{prefix}{counter[0]}"

    def emit_expr(root: Expr) -> str:
        for n in postorder([root], into_implicit=False):
            if n in node_name:
                continue
            k = n.kind
            if k == CONST:
                node_name[n] = repr(n.payload)
                continue
            if k == VAR:
                key = ("var", n.payload)
                if key not in names:
                    raise EvaluationError(f"no value for {n.payload.name}", n)
                node_name[n] = names[key]
                continue
            a = [] if k == IMPLICIT else [node_name[x] for x in n.args]
            if k == NEG:
                rhs = f"-{a[0]}"
            elif k == ADD:
                rhs = f"{a[0]} + {a[1]}"
            elif k == SUB:
                rhs = f"{a[0]} - {a[1]}"
            elif k == MUL:
                rhs = f"{a[0]} * {a[1]}"
            elif k == DIV:
                rhs = f"{a[0]} / {a[1]}"
            elif k == POW:
                p = n.payload
                if p == 2:
                    rhs = f"{a[0]} * {a[0]}"
                elif p > 0:
                    rhs = f"{a[0]} ** {p}"
                else:
                    rhs = f"_pow({a[0]}, {p})"
            elif k in _FN_NAMES:
                rhs = f"{_FN_NAMES[k]}({a[0]})"
            elif k == LINSOLVE:
                kk, c = n.payload
                mkey = n.args[:kk * kk]
                lu = lu_names.get(mkey)
                if lu is None:
                    lu = lu_names[mkey] = fresh("_lu")
                    lines.append(f"    {lu} = _lu_factor(({', '.join(a[:kk * kk])},), {kk})")
                skey = n.args
                sol = sol_names.get(skey)
                if sol is None:
                    sol = sol_names[skey] = fresh("_s")
                    lines.append(f"    {sol} = _lu_solve({lu}, ({', '.join(a[kk * kk:])},))")
                rhs = f"{sol}[{c}]"
            elif k == IMPLICIT:
                unknowns, c = n.payload
                skey = (n.args, unknowns)
                sol = sol_names.get(skey)
                if sol is None:
                    solver = _ImplicitSolver(n.args, unknowns)
                    solvers.append(solver)
                    sname = fresh("_newton")
                    ns[sname] = solver.solve
                    for p in solver.params:
                        if ("var", p) not in names:
                            raise EvaluationError(f"no value for {p.name}", n)
                    args = ", ".join(names[("var", p)] for p in solver.params)
                    sol = sol_names[skey] = fresh("_s")
                    lines.append(f"    {sol} = {sname}(({args}{',' if args else ''}))")
                rhs = f"{sol}[{c}]"
            else:
                raise EvaluationError(f"cannot compile node kind {k}", n)
            t = fresh()
            lines.append(f"    {t} = {rhs}")
            node_name[n] = t
        return node_name[root]

    for v, e in assignments:
        ref = emit_expr(e)
        t = fresh("_v")
        lines.append(f"    {t} = {ref}")
        names[("var", v)] = t
        # later references to v must read the assigned local
        node_name.pop(_var_node(v), None)
    outs = [emit_expr(e) for e in outputs]
    lines.append(f"    return _chk([{', '.join(outs)}])")
    source = "\n".join(lines) + "\n"
    code = compile(source, "<flatctl-compiled>", "exec")
    exec(code, ns)
    return Compiled(inputs, assignments, outputs, ns["_f"], solvers, source)


def _var_node(v):
    from .core import var

    return var(v)


def _check_finite(vals):
    for x in vals:
        if x != x or x in (math.inf, -math.inf):
            raise ValueError("non-finite value")
    return vals


def compile_exprs(exprs: Sequence[Expr], variables=None) -> Compiled:
    """Compile expressions over ``variables`` (default: their sorted free vars)."""
    if variables is None:
        from ..jets import sort_vars

        variables = sort_vars(free_vars_all(exprs))
    return compile_program(list(variables), [], list(exprs))


def evaluate_many(exprs: Sequence[Expr], points: Sequence[Mapping]) -> list[list[float]]:
    """Evaluate expressions at several points through one compiled function."""
    from ..jets import sort_vars

    variables = sort_vars(free_vars_all(exprs))
    fn = compile_exprs(exprs, variables)
    return [fn([p[v] for v in variables]) for p in points]


__all__ = [
    "COND_LIMIT", "Compiled", "EvaluationError", "NewtonFailure", "SingularMatrixError",
    "compile_exprs", "compile_program", "evaluate", "evaluate_all", "evaluate_many",
    "lu_factor", "lu_solve", "newton", "free_vars",
]
