"""The staged construction of κ and of the linearizing quasi-static feedback.

Each stage differentiates the remaining flat-output components along the
current closed-loop field until a remaining input shows up, takes the
generic rank of the resulting Jacobian, selects that many outputs and
inputs, declares the selected top derivatives to be new inputs ``v`` and
solves for the selected inputs.  The solved inputs are then substituted into
the field and into the remaining outputs, and the next stage starts.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .expr import (Expr, NotAffine, affine_decompose, compile_exprs, evaluate, implicit,
                   solve_affine, substitute, substitute_all, tidy)
from .expr.core import ONE, ZERO, derivative, free_vars, free_vars_all, sub, var
from .flatsys import FlatSystemDef
from .jets import DerivativeCapExceeded, JetVar, MultiIndex, lie_derivative, sort_vars
from .sampling import DEFAULT_SEED, SampleBox, sample_evaluations, sample_point

N_SAMPLES = 7
RANK_RTOL = 1e-9
DEP_ATOL = 1e-9
DEP_MIN_HITS = 4
TIE_RTOL = 1e-12


class ProcedureError(RuntimeError):
    pass


# --- generic rank ------------------------------------------------------------

def pivoted_qr_order(A: np.ndarray, k: int | None = None, tie_rtol: float = TIE_RTOL) -> list[int]:
    """Column order chosen by Householder QR with column pivoting.

    At each step the column with the largest remaining norm is taken; norms
    within ``tie_rtol`` of the maximum count as ties and go to the lowest
    index.
    """
    A = np.array(A, dtype=float, copy=True)
    rows, cols = A.shape
    k = min(rows, cols) if k is None else min(k, rows, cols)
    perm = list(range(cols))
    for j in range(k):
        norms = np.linalg.norm(A[j:, j:], axis=0)
        top = norms.max() if norms.size else 0.0
        if top == 0.0:
            break
        cand = [c for c in range(norms.size) if norms[c] >= top * (1 - tie_rtol)]
        p = j + min(cand, key=lambda c: perm[j + c])
        A[:, [j, p]] = A[:, [p, j]]
        perm[j], perm[p] = perm[p], perm[j]
        x = A[j:, j]
        alpha = -np.copysign(np.linalg.norm(x), x[0] if x[0] != 0 else 1.0)
        v = x.copy()
        v[0] -= alpha
        vn = np.dot(v, v)
        if vn > 0:
            A[j:, j:] -= np.outer(2.0 * v / vn, v @ A[j:, j:])
    return perm


def numeric_rank(A: np.ndarray, rtol: float = RANK_RTOL) -> int:
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


@dataclass
class RankResult:
    rank: int
    sample_ranks: list
    row_pivots: list
    col_pivots: list
    first_index: int
    matrices: list  # numeric sample matrices
    points: list
    diagnostic: str = ""


def generic_rank(J: Sequence[Sequence[Expr]], seed: int = DEFAULT_SEED, box: SampleBox | None = None,
                 n_samples: int = N_SAMPLES) -> RankResult:
    """Generic rank of a symbolic matrix: the maximal numeric rank over seeded samples."""
    rows = len(J)
    cols = len(J[0]) if rows else 0
    flat = [e for row in J for e in row]
    if not flat:
        return RankResult(0, [0] * n_samples, [], [], 0, [], [])
    points, values = sample_evaluations(flat, n_samples, seed, box)
    mats = [np.array(v, dtype=float).reshape(rows, cols) for v in values]
    ranks = [numeric_rank(M) for M in mats]
    r = max(ranks)
    first = ranks.index(r)
    col_piv = pivoted_qr_order(mats[first])[:r]
    row_piv = pivoted_qr_order(mats[first].T)[:r]
    agree = sum(1 for x in ranks if x == r)
    diag = ""
    if agree < (n_samples // 2 + 1):
        bad = [i for i, x in enumerate(ranks) if x != r]
        diag = (f"sample ranks disagree {ranks}; rank {r} reached at only {agree} of "
                f"{n_samples} points (samples {bad} fall short)")
    return RankResult(r, ranks, row_piv, col_piv, first, mats, points, diag)


def _subset_rank(res: RankResult, rows: Sequence[int], cols: Sequence[int] | None = None) -> int:
    best = 0
    for M in res.matrices:
        sub_m = M[np.ix_(list(rows), list(cols) if cols is not None else list(range(M.shape[1])))]
        best = max(best, numeric_rank(sub_m))
    return best


def depends_on(e: Expr, w: JetVar, seed: int = DEFAULT_SEED, box: SampleBox | None = None,
               n_samples: int = N_SAMPLES) -> bool:
    """Generic dependence: |∂e/∂w| > 1e-9 at a majority of the sample points."""
    if w not in free_vars(e):
        return False
    d = derivative(e, {w: ONE})
    if d.kind == "const":
        return abs(d.payload) > DEP_ATOL
    _, values = sample_evaluations([d], n_samples, seed, box)
    hits = sum(1 for (x,) in values if abs(x) > DEP_ATOL)
    return hits >= DEP_MIN_HITS


# --- plan --------------------------------------------------------------------

@dataclass
class StageRecord:
    index: int
    remaining_outputs: list  # original output indices present at stage start
    remaining_inputs: list
    K: MultiIndex  # aligned with remaining_outputs
    rank: int
    outputs: list  # selected original output indices, ascending
    kappa: MultiIndex  # aligned with outputs
    inputs: list  # selected original input indices, ascending
    v: list  # JetVars v{i}_{c}, aligned with outputs
    rows: list  # selected top derivatives, v = rows
    solved: dict  # input JetVar -> Expr over (x, v-jets of stages <= i, later inputs)
    ys: dict  # output index -> [y_[0], ..., y_[kappa-1]]
    affine: bool
    rank_info: RankResult | None = None

    @property
    def m_i(self) -> int:
        return self.rank


@dataclass
class FeedbackLaw:
    inputs: list  # JetVar per original input
    exprs: list  # Expr over (x, v-jets)
    max_v_order: dict  # stage -> highest jet order used

    def as_dict(self) -> dict:
        return dict(zip(self.inputs, self.exprs))


@dataclass
class StagePlan:
    system: FlatSystemDef
    stages: list
    kappa: MultiIndex  # original output order
    output_stage: dict  # output index -> (stage, component)
    seed: int
    diagnostics: list = field(default_factory=list)
    elapsed: float = 0.0
    _feedback: FeedbackLaw | None = None

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def stage_kappas(self) -> list:
        return [st.kappa for st in self.stages]

    def kappa_report(self) -> str:
        return "(" + " | ".join(",".join(str(k) for k in st.kappa) for st in self.stages) + ")"

    def v_var(self, j: int, order: int = 0) -> JetVar:
        """New input attached to original output ``j`` at jet ``order``."""
        stage, comp = self.output_stage[j]
        return JetVar("v", comp, order, stage)

    def ys(self, j: int) -> list:
        stage, _ = self.output_stage[j]
        return self.stages[stage - 1].ys[j]

    @property
    def feedback(self) -> FeedbackLaw:
        if self._feedback is None:
            self._feedback = synthesize_feedback(self)
        return self._feedback


def _select_rows(res: RankResult, hint: Sequence[int], target: int) -> list[int]:
    chosen: list[int] = []
    order = list(hint) + [r for r in res.row_pivots if r not in hint]
    order += [r for r in range(len(res.matrices[0])) if r not in order]
    rank = 0
    for r in order:
        if r in chosen:
            continue
        trial = _subset_rank(res, chosen + [r])
        if trial > rank:
            chosen.append(r)
            rank = trial
        if rank == target:
            break
    return chosen


def _select_columns(res: RankResult, rows: Sequence[int], target: int) -> list[int]:
    best_i = None
    for i, M in enumerate(res.matrices):
        if numeric_rank(M[list(rows), :]) == target:
            best_i = i
            break
    M = res.matrices[best_i][list(rows), :]
    return pivoted_qr_order(M)[:target]


def _prune_independent(e: Expr, inputs: Sequence[JetVar], seed, box) -> tuple[Expr, bool]:
    """Return (e', depends) where e' drops inputs e does not generically depend on."""
    present = [u for u in inputs if u in free_vars(e)]
    if not present:
        return e, False
    dep = [u for u in present if depends_on(e, u, seed, box)]
    if dep:
        return e, True
    return tidy(substitute(e, {u: ZERO for u in present})), False


def run_procedure(sysdef: FlatSystemDef, *, seed: int = DEFAULT_SEED, hints: Mapping | None = None,
                  cap: int | None = None, allow_newton: bool = True) -> StagePlan:
    """Run the staged construction on ``sysdef``."""
    t0 = time.perf_counter()
    reg = sysdef.registry
    box = sysdef.box
    hints = dict(sysdef.hints if hints is None else hints)
    cap = 2 * sysdef.n + 2 if cap is None else cap
    m = sysdef.m
    U = {j: reg.u(j) for j in range(1, m + 1)}
    rest_out = list(range(1, m + 1))
    rest_in = list(range(1, m + 1))
    f_cur = dict(sysdef.dynamics)
    chains = {j: [tidy(sysdef.outputs[j - 1])] for j in rest_out}
    stages: list[StageRecord] = []
    output_stage: dict = {}
    diagnostics: list[str] = []

    while rest_in:
        i = len(stages) + 1
        if i > m:
            raise ProcedureError("procedure did not terminate within m stages")
        if not rest_out:
            raise ProcedureError("inputs remain but all outputs are used")
        stage_out, stage_in = list(rest_out), list(rest_in)
        u_rest = [U[k] for k in rest_in]
        for j in rest_out:
            chain = chains[j]
            while True:
                top, dep = _prune_independent(chain[-1], u_rest, seed, box)
                chain[-1] = top
                if dep:
                    break
                if len(chain) - 1 >= cap:
                    raise DerivativeCapExceeded(
                        f"y{j}: no input dependence up to derivative order {cap}; "
                        "the declared output is probably not flat")
                chain.append(tidy(lie_derivative(top, f_cur, reg)))
        K = MultiIndex(len(chains[j]) - 1 for j in rest_out)
        tops = [chains[j][-1] for j in rest_out]
        J = [[derivative(t, {u: ONE}) for u in u_rest] for t in tops]
        res = generic_rank(J, seed, box)
        if res.diagnostic:
            diagnostics.append(f"stage {i}: {res.diagnostic}")
        if res.rank == 0:
            raise ProcedureError(f"stage {i}: input Jacobian is zero at all samples")
        hint_rows = [rest_out.index(j) for j in hints.get(i, []) if j in rest_out]
        rows = _select_rows(res, hint_rows, res.rank)
        cols = _select_columns(res, rows, res.rank)
        sel_out = sorted(rest_out[r] for r in rows)
        sel_in = sorted(rest_in[c] for c in cols)
        kappa_i = MultiIndex(len(chains[j]) - 1 for j in sel_out)
        v_vars = [reg.v(i, c + 1) for c in range(len(sel_out))]
        reg.register_v(i, len(sel_out))
        top_rows = [chains[j][-1] for j in sel_out]
        unknowns = [U[k] for k in sel_in]
        aff = affine_decompose(top_rows, unknowns)
        if aff is NotAffine:
            aff = _numeric_affine(top_rows, unknowns, seed, box)
        if aff is not NotAffine:
            point = res.points[res.first_index]

            def magnitude(e, point=point):
                try:
                    pt = dict(point)
                    for w in free_vars(e):
                        if w not in pt:
                            pt.update(sample_point([w], seed, res.first_index, 0, box))
                    return evaluate(e, pt)
                except (ArithmeticError, ValueError):
                    return 0.0

            sol = solve_affine(aff, [var(v) for v in v_vars], magnitude)
            sol = [tidy(s) for s in sol]
            affine = True
        else:
            if not allow_newton:
                raise ProcedureError(f"stage {i}: selected rows are not affine in the inputs")
            residuals = [sub(r, var(v)) for r, v in zip(top_rows, v_vars)]
            sol = implicit(residuals, unknowns)
            affine = False
        solved = dict(zip(unknowns, sol))
        keys = list(f_cur)
        new_f = substitute_all([f_cur[k] for k in keys], solved)
        f_cur = dict(zip(keys, new_f))
        ys = {j: list(chains[j][:-1]) for j in sel_out}
        for c, j in enumerate(sel_out):
            output_stage[j] = (i, c + 1)
        rest_out = [j for j in rest_out if j not in sel_out]
        rest_in = [k for k in rest_in if k not in sel_in]
        for j in rest_out:
            chains[j][-1] = tidy(substitute(chains[j][-1], solved))
        stages.append(StageRecord(
            index=i, remaining_outputs=stage_out, remaining_inputs=stage_in, K=K, rank=res.rank,
            outputs=sel_out, kappa=kappa_i, inputs=sel_in, v=v_vars, rows=top_rows,
            solved=solved, ys=ys, affine=affine, rank_info=res))
    if rest_out:
        raise ProcedureError("outputs " + ", ".join(f"y{j}" for j in rest_out)
                             + " remain after all inputs were replaced")
    kappa = MultiIndex(len(stages[output_stage[j][0] - 1].ys[j]) for j in range(1, m + 1))
    plan = StagePlan(system=sysdef, stages=stages, kappa=kappa, output_stage=output_stage,
                     seed=seed, diagnostics=diagnostics)
    check_plan(plan)
    plan.elapsed = time.perf_counter() - t0
    return plan


def _numeric_affine(rows, unknowns, seed, box):
    """Affine split when like terms hide it symbolically: second derivatives vanish numerically."""
    second = [derivative(derivative(r, {u: ONE}), {w: ONE}) for r in rows for u in unknowns
              for w in unknowns]
    second = [s for s in second if s is not ZERO]
    if second:
        _, values = sample_evaluations(second, N_SAMPLES, seed, box)
        if any(abs(x) > DEP_ATOL for vals in values for x in vals):
            return NotAffine
    A = []
    for r in rows:
        row = []
        for u in unknowns:
            a = derivative(r, {u: ONE})
            a = substitute(a, {w: ZERO for w in unknowns if w in free_vars(a)})
            row.append(tidy(a))
        A.append(tuple(row))
    from .expr import Affine

    b = substitute_all(list(rows), {u: ZERO for u in unknowns})
    return Affine(tuple(A), tuple(tidy(x) for x in b))


# --- checks and synthesis ------------------------------------------------------

class PlanInvariantError(AssertionError):
    pass


def check_plan(plan: StagePlan) -> None:
    """Assert the structural properties every finished plan must have."""
    sysdef = plan.system
    m, n = sysdef.m, sysdef.n
    if sum(st.rank for st in plan.stages) != m:
        raise PlanInvariantError("sum of stage ranks differs from m")
    if plan.n_stages > m:
        raise PlanInvariantError("more stages than inputs")
    if abs(plan.kappa) != n:
        raise PlanInvariantError(f"|kappa| = {abs(plan.kappa)} differs from n = {n}")
    if sysdef.R is not None and not plan.kappa <= sysdef.R:
        raise PlanInvariantError(f"kappa {plan.kappa} is not <= R {sysdef.R}")
    for st in plan.stages:
        for j, exprs in st.ys.items():
            for e in exprs:
                for w in free_vars(e):
                    if w.family == "u":
                        raise PlanInvariantError(f"y{j} stage expression contains {w.name}")
                    if w.family == "v" and w.stage >= st.index:
                        raise PlanInvariantError(f"y{j} stage expression contains {w.name}")
                    if w.family == "v" and sysdef.R is not None:
                        src = next(o for o, (s, c) in plan.output_stage.items()
                                   if s == w.stage and c == w.index)
                        if w.order > sysdef.R[src - 1] - plan.kappa[src - 1]:
                            raise PlanInvariantError(
                                f"{w.name} exceeds the order R-kappa allowed for y{src}")


def synthesize_feedback(plan: StagePlan) -> FeedbackLaw:
    """Back-substitute the stage solutions into u = α(x, v-jets)."""
    final: dict = {}
    for st in reversed(plan.stages):
        keys = list(st.solved)
        vals = substitute_all([st.solved[k] for k in keys], final) if final else \
            [st.solved[k] for k in keys]
        for k, e in zip(keys, vals):
            final[k] = tidy(e)
    reg = plan.system.registry
    inputs = reg.inputs
    exprs = [final[u] for u in inputs]
    max_order: dict = {}
    for e in exprs:
        for w in free_vars(e):
            if w.family == "u":
                raise PlanInvariantError(f"feedback still contains {w.name}")
            if w.family == "v":
                max_order[w.stage] = max(max_order.get(w.stage, 0), w.order)
    return FeedbackLaw(inputs=inputs, exprs=exprs, max_v_order=dict(sorted(max_order.items())))


@dataclass
class IndependenceReport:
    passed: bool
    expected: int
    sample_ranks: list
    kappa: MultiIndex

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return (f"independence {state}: expected rank {self.expected}, "
                f"sample ranks {self.sample_ranks}")


def verify_independence(plan: StagePlan, kappa: Sequence[int] | None = None,
                        seed: int | None = None) -> IndependenceReport:
    """Rank of d(x, φ_[κ..R-1]) with respect to (x, u-jets) in original coordinates."""
    sysdef = plan.system
    if sysdef.R is None:
        raise ValueError("verify_independence needs a declared R")
    kappa = MultiIndex(plan.kappa if kappa is None else kappa)
    seed = plan.seed if seed is None else seed
    reg = sysdef.registry
    rows = [var(x) for x in sysdef.states]
    for j in range(1, sysdef.m + 1):
        h = sysdef.outputs[j - 1]
        top = sysdef.R[j - 1] - 1
        for beta in range(0, top + 1):
            if beta >= kappa[j - 1]:
                rows.append(h)
            if beta < top:
                h = lie_derivative(h, sysdef.dynamics, reg)
    cols = sort_vars(free_vars_all(rows) | set(sysdef.states))
    J = [[derivative(r, {w: ONE}) for w in cols] for r in rows]
    res = generic_rank(J, seed, sysdef.box)
    expected = sysdef.n + sum(max(0, r - k) for r, k in zip(sysdef.R, kappa))
    passed = len(rows) == expected and all(r == expected for r in res.sample_ranks)
    return IndependenceReport(passed, expected, res.sample_ranks, kappa)


def stage_residuals(plan: StagePlan, point: Mapping) -> list[float]:
    """Evaluate each stage equation ``row - v`` with u from the feedback law."""
    fb = plan.feedback
    pt = dict(point)
    for u, e in zip(fb.inputs, fb.exprs):
        pt[u] = evaluate(e, pt)
    out = []
    for st in plan.stages:
        # rows live in their stage's coordinates: earlier inputs already replaced
        for r, v in zip(st.rows, st.v):
            out.append(evaluate(r, pt) - pt[v])
    return out


def stage_relative_degrees(outputs: Sequence[Expr], dyn: Mapping, inputs: Sequence[JetVar],
                           registry=None, seed: int = DEFAULT_SEED, box: SampleBox | None = None,
                           cap: int = 22) -> MultiIndex:
    """Smallest k with L^k h depending on one of ``inputs``, for each output."""
    out = []
    for h in outputs:
        k = 0
        while True:
            h, dep = _prune_independent(h, inputs, seed, box)
            if dep:
                break
            if k >= cap:
                raise DerivativeCapExceeded(f"no input dependence up to order {cap}")
            h = tidy(lie_derivative(h, dyn, registry))
            k += 1
        out.append(k)
    return MultiIndex(out)


__all__ = [
    "FeedbackLaw", "IndependenceReport", "PlanInvariantError", "ProcedureError", "RankResult",
    "StagePlan", "StageRecord", "check_plan", "depends_on", "generic_rank", "numeric_rank",
    "pivoted_qr_order", "run_procedure", "stage_relative_degrees", "stage_residuals",
    "synthesize_feedback", "verify_independence", "compile_exprs",
]
