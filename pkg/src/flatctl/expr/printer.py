"""Infix printing that round-trips through :func:`flatctl.expr.parse.parse`."""
from __future__ import annotations

from .core import (ADD, CONST, DIV, FUNCTIONS, IMPLICIT, LINSOLVE, MUL, NEG, POW,
                   SUB, VAR, Expr, free_vars, postorder, tree_size)

_PREC = {ADD: 1, SUB: 1, MUL: 2, DIV: 2, NEG: 3, POW: 4}
_ATOM = 5
_SYM = {ADD: " + ", SUB: " - ", MUL: "*", DIV: "/"}


def format_number(c: float) -> str:
    if c == int(c) and abs(c) < 1e15:
        return str(int(c))
    return repr(c)


def _prec(n: Expr) -> int:
    if n.kind == CONST:
        return 3 if n.payload < 0 else _ATOM
    return _PREC.get(n.kind, _ATOM)


def to_string(e: Expr) -> str:
    """Render ``e`` in the expression grammar.

    Parentheses are emitted only where precedence or associativity needs
    them, so parsing the output reproduces the same (unsimplified) tree.
    """
    text: dict = {}
    for n in postorder([e]):
        text[n] = _render(n, text)
    return text[e]


def _wrap(child: Expr, s: str, needs: bool) -> str:
    return f"({s})" if needs else s


def _render(n: Expr, text) -> str:
    k = n.kind
    if k == CONST:
        return format_number(n.payload)
    if k == VAR:
        return n.payload.name
    if k == NEG:
        a = n.args[0]
        return "-" + _wrap(a, text[a], _prec(a) < 3)
    if k in _SYM:
        a, b = n.args
        p = _PREC[k]
        left = _wrap(a, text[a], _prec(a) < p)
        right = _wrap(b, text[b], _prec(b) <= p)
        return left + _SYM[k] + right
    if k == POW:
        a = n.args[0]
        base = _wrap(a, text[a], _prec(a) <= 4)
        p = n.payload
        return f"{base}^{p}" if p >= 0 else f"{base}^({p})"
    if k in FUNCTIONS:
        return f"{k}({text[n.args[0]]})"
    if k == LINSOLVE:
        kk, c = n.payload
        return f"linsolve[{kk},{c}](" + ", ".join(text[a] for a in n.args) + ")"
    if k == IMPLICIT:
        unknowns, c = n.payload
        names = ",".join(u.name for u in unknowns)
        return f"implicit[{names};{c}](" + ", ".join(text[a] for a in n.args) + ")"
    raise ValueError(f"cannot print node kind {k}")


def describe(e: Expr, max_size: int = 2000) -> str:
    """Printed form when small enough, otherwise a summary of arguments."""
    if tree_size(e, limit=max_size + 1) <= max_size:
        return to_string(e)
    from ..jets import sort_vars

    names = ", ".join(v.name for v in sort_vars(free_vars(e)))
    kinds = sorted({n.kind for n in postorder([e])})
    return f"<function of ({names}); {len(postorder([e]))} shared nodes; uses {', '.join(kinds)}>"
