"""Light algebra on expressions: polynomial collection, affine splitting,
symbolic Gaussian elimination."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import (ADD, CONST, DIV, MUL, NEG, POW, SUB, VAR, ZERO, Expr, add, const,
                   derivative, div, free_vars, linsolve, mul, neg, postorder, power,
                   rebuild, structural_key, sub, substitute_all, tree_size)

MAX_TERMS = 400


class _TooBig(Exception):
    pass


def _atom_sort_key(a: Expr):
    if a.kind == VAR:
        return (0, a.payload.sort_key(), b"")
    return (1, (), structural_key(a))


def _poly_mul(p, q, limit):
    out: dict = {}
    for m1, c1 in p.items():
        for m2, c2 in q.items():
            if m1 and m2:
                d = dict(m1)
                for atom, k in m2:
                    d[atom] = d.get(atom, 0) + k
                m = tuple(sorted(d.items(), key=lambda it: _atom_sort_key(it[0])))
            else:
                m = m1 or m2
            out[m] = out.get(m, 0.0) + c1 * c2
            if len(out) > limit:
                raise _TooBig
    return {m: c for m, c in out.items() if c != 0.0}


def _poly_add(p, q, sign=1.0):
    out = dict(p)
    for m, c in q.items():
        out[m] = out.get(m, 0.0) + sign * c
    return {m: c for m, c in out.items() if c != 0.0}


def _to_poly(e: Expr, limit: int, atom_of):
    polys: dict = {}
    for n in postorder([e]):
        k = n.kind
        if k == CONST:
            polys[n] = {(): n.payload} if n.payload != 0.0 else {}
        elif k == NEG:
            polys[n] = {m: -c for m, c in polys[n.args[0]].items()}
        elif k == ADD:
            polys[n] = _poly_add(polys[n.args[0]], polys[n.args[1]])
        elif k == SUB:
            polys[n] = _poly_add(polys[n.args[0]], polys[n.args[1]], -1.0)
        elif k == MUL:
            polys[n] = _poly_mul(polys[n.args[0]], polys[n.args[1]], limit)
        elif k == DIV and n.args[1].kind == CONST:
            polys[n] = {m: c / n.args[1].payload for m, c in polys[n.args[0]].items()}
        elif k == POW and 0 < n.payload <= 8:
            base = polys[n.args[0]]
            acc = {(): 1.0}
            for _ in range(n.payload):
                acc = _poly_mul(acc, base, limit)
            polys[n] = acc
        else:
            a = atom_of(n)
            if a.kind == CONST:
                polys[n] = {(): a.payload} if a.payload != 0.0 else {}
            else:
                polys[n] = {((a, 1),): 1.0}
        if len(polys[n]) > limit:
            raise _TooBig
    return polys[e]


def _from_poly(p) -> Expr:
    def term_key(item):
        m, _ = item
        deg = sum(k for _, k in m)
        return (deg, [(_atom_sort_key(a), k) for a, k in m])

    acc = ZERO
    for m, c in sorted(p.items(), key=term_key):
        term = None if abs(c) == 1.0 and m else const(abs(c))
        for a, k in m:
            f = power(a, k)
            term = f if term is None else mul(term, f)
        neg_c = c < 0
        if acc is ZERO:
            acc = neg(term) if neg_c else term
        else:
            acc = sub(acc, term) if neg_c else add(acc, term)
    return acc


def collect(e: Expr, max_terms: int = MAX_TERMS) -> Expr:
    """Expand polynomial structure and merge like terms.

    Non-polynomial subterms (functions, divisions by non-constants, negative
    powers, linear solves) are kept as atoms after collecting inside them.
    Returns ``e`` unchanged when expansion would exceed ``max_terms`` terms.
    """
    memo: dict = {}

    def atom_of(n: Expr) -> Expr:
        if n.kind == VAR:
            return n
        if n in memo:
            return memo[n]
        args = [collect(a, max_terms) for a in n.args]
        r = rebuild(n, args)
        memo[n] = r
        return r

    try:
        return _from_poly(_to_poly(e, max_terms, atom_of))
    except _TooBig:
        return e


def tidy(e: Expr, max_size: int = 600) -> Expr:
    """:func:`collect` for small expressions, identity for large ones."""
    if tree_size(e, limit=max_size + 1) > max_size:
        return e
    c = collect(e)
    return c if tree_size(c, limit=10**6) <= tree_size(e, limit=10**6) * 4 else e


@dataclass(frozen=True)
class Affine:
    A: tuple  # rows of Expr
    b: tuple


class _NotAffine:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "NotAffine"

    def __bool__(self):
        return False


NotAffine = _NotAffine()


def affine_decompose(rows: Sequence[Expr], unknowns: Sequence, clean=tidy):
    """Split ``rows = A @ unknowns + b`` or return ``NotAffine``.

    The test is symbolic: every coefficient must be free of the unknowns
    (after :func:`tidy`, which cancels like terms in small expressions).
    """
    unknowns = list(unknowns)
    uset = frozenset(unknowns)
    A = []
    for r in rows:
        row = []
        for u in unknowns:
            a = derivative(r, {u: const(1.0)})
            if free_vars(a) & uset:
                a = clean(a)
                if free_vars(a) & uset:
                    return NotAffine
            row.append(a)
        A.append(tuple(row))
    b = substitute_all(list(rows), {u: ZERO for u in unknowns})
    return Affine(tuple(A), tuple(clean(x) for x in b))


def gauss_solve(A: Sequence[Sequence[Expr]], r: Sequence[Expr], magnitude=None,
                clean=tidy) -> list[Expr]:
    """Symbolic Gaussian elimination for ``A w = r``.

    ``magnitude(expr) -> float`` ranks pivot candidates (largest wins, ties
    by lowest row); by default any entry that is not the constant 0 will do.
    """
    k = len(r)
    M = [list(row) for row in A]
    rhs = list(r)
    order = []
    for j in range(k):
        cands = [i for i in range(j, k) if M[i][j] is not ZERO]
        if not cands:
            raise ZeroDivisionError("structurally singular system")
        if magnitude is not None:
            p = max(cands, key=lambda i: (abs(magnitude(M[i][j])), -i))
        else:
            p = cands[0]
        M[j], M[p] = M[p], M[j]
        rhs[j], rhs[p] = rhs[p], rhs[j]
        order.append(p)
        for i in range(j + 1, k):
            if M[i][j] is ZERO:
                continue
            f = clean(div(M[i][j], M[j][j]))
            for c in range(j + 1, k):
                M[i][c] = clean(sub(M[i][c], mul(f, M[j][c])))
            M[i][j] = ZERO
            rhs[i] = clean(sub(rhs[i], mul(f, rhs[j])))
    w = [ZERO] * k
    for i in range(k - 1, -1, -1):
        s = rhs[i]
        for c in range(i + 1, k):
            s = sub(s, mul(M[i][c], w[c]))
        w[i] = clean(div(s, M[i][i]))
    return w


def solve_affine(aff: Affine, rhs: Sequence[Expr], magnitude=None, max_symbolic: int = 3,
                 size_limit: int = 800) -> list[Expr]:
    """Solve ``A w + b = rhs`` for w.

    Small systems use symbolic elimination; larger or bulky ones become
    linear-solve nodes, which keep the DAG compact and differentiate exactly.
    """
    k = len(rhs)
    r = [sub(rhs[i], aff.b[i]) for i in range(k)]
    bulky = sum(tree_size(a, limit=size_limit + 1) for row in aff.A for a in row) > size_limit
    if k <= max_symbolic and not bulky:
        return gauss_solve(aff.A, r, magnitude)
    return linsolve([list(row) for row in aff.A], r)
