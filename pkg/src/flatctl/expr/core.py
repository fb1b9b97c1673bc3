"""Immutable, hash-consed scalar expression DAGs.

Every node is interned: two structurally equal trees are the same Python
object, so equality and hashing are by identity.  Build nodes with the smart
constructors (:func:`add`, :func:`mul`, ...), which fold constants and apply
0/1 identities, or with :func:`raw` when the exact tree shape matters (the
parser does this so that printing round-trips).
"""
from __future__ import annotations

import hashlib
import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

CONST = "const"
VAR = "var"
NEG = "neg"
ADD = "add"
SUB = "sub"
MUL = "mul"
DIV = "div"
POW = "pow"
LINSOLVE = "linsolve"
IMPLICIT = "implicit"

FUNCTIONS = ("sin", "cos", "tan", "sqrt", "exp", "log")
UNARY = (NEG,) + FUNCTIONS
BINARY = (ADD, SUB, MUL, DIV)


class Expr:
    """A node of a symbolic expression DAG.

    ``kind`` is one of the module-level kind constants, ``payload`` carries
    the constant value, the :class:`~flatctl.jets.JetVar`, the integer
    exponent, or the shape data of linear-solve / implicit nodes, and
    ``args`` holds the children.
    """

    __slots__ = ("kind", "payload", "args", "_skey")

    def __init__(self, kind, payload, args):
        self.kind = kind
        self.payload = payload
        self.args = args
        self._skey = None

    def __setattr__(self, name, value):
        if name != "_skey" and hasattr(self, name):
            raise AttributeError("Expr nodes are immutable")
        object.__setattr__(self, name, value)

    def __reduce__(self):
        return (_make, (self.kind, self.payload, self.args))

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __rtruediv__(self, other):
        return div(as_expr(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        if isinstance(k, Expr):
            if k.kind != CONST:
                raise TypeError("exponent must be an integer constant")
            k = k.payload
        if int(k) != k:
            raise TypeError("exponent must be an integer constant")
        return power(self, int(k))

    def __repr__(self):
        from .printer import to_string

        if tree_size(self) > 400:
            return f"<Expr {self.kind} dag_size={dag_size(self)}>"
        return f"Expr({to_string(self)})"

    @property
    def is_const(self) -> bool:
        return self.kind == CONST

    @property
    def value(self) -> float:
        if self.kind != CONST:
            raise TypeError("not a constant")
        return self.payload

    @property
    def var(self):
        if self.kind != VAR:
            raise TypeError("not a variable")
        return self.payload


_table: dict = {}
_lock = threading.Lock()


def _make(kind, payload, args=()):
    key = (kind, payload, args)
    node = _table.get(key)
    if node is None:
        with _lock:
            node = _table.get(key)
            if node is None:
                node = Expr(kind, payload, args)
                _table[key] = node
    return node


def const(c) -> Expr:
    c = float(c)
    if math.isnan(c) or math.isinf(c):
        raise ValueError(f"non-finite constant {c!r}")
    if c == 0.0:
        c = 0.0  # fold -0.0
    return _make(CONST, c)


def var(v) -> Expr:
    return _make(VAR, v)


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float)):
        return const(x)
    if hasattr(x, "family") and hasattr(x, "order"):
        return var(x)
    raise TypeError(f"cannot convert {type(x).__name__} to Expr")


ZERO = const(0.0)
ONE = const(1.0)
TWO = const(2.0)


def raw(kind: str, *args: Expr, payload=None) -> Expr:
    """Build a node exactly as given, without any simplification."""
    if kind == POW:
        if payload is None or int(payload) != payload:
            raise ValueError("pow needs an integer exponent payload")
        payload = int(payload)
    return _make(kind, payload, tuple(args))


# --- smart constructors ----------------------------------------------------

def _c(e: Expr):
    return e.payload if e.kind == CONST else None


def neg(a: Expr) -> Expr:
    if a.kind == CONST:
        return const(-a.payload)
    if a.kind == NEG:
        return a.args[0]
    return _make(NEG, None, (a,))


def add(a: Expr, b: Expr) -> Expr:
    ca, cb = _c(a), _c(b)
    if ca is not None and cb is not None:
        return const(ca + cb)
    if ca == 0.0:
        return b
    if cb == 0.0:
        return a
    if b.kind == NEG:
        return sub(a, b.args[0])
    if cb is not None and cb < 0:
        return sub(a, const(-cb))
    if a.kind == NEG:
        return sub(b, a.args[0])
    return _make(ADD, None, (a, b))


def sub(a: Expr, b: Expr) -> Expr:
    ca, cb = _c(a), _c(b)
    if ca is not None and cb is not None:
        return const(ca - cb)
    if cb == 0.0:
        return a
    if a is b:
        return ZERO
    if ca == 0.0:
        return neg(b)
    if b.kind == NEG:
        return add(a, b.args[0])
    if cb is not None and cb < 0:
        return add(a, const(-cb))
    return _make(SUB, None, (a, b))


def mul(a: Expr, b: Expr) -> Expr:
    ca, cb = _c(a), _c(b)
    if ca is not None and cb is not None:
        return const(ca * cb)
    if ca == 0.0 or cb == 0.0:
        return ZERO
    if ca == 1.0:
        return b
    if cb == 1.0:
        return a
    if ca == -1.0:
        return neg(b)
    if cb == -1.0:
        return neg(a)
    if cb is not None:
        a, b, ca, cb = b, a, cb, ca
    if ca is not None and b.kind == MUL and b.args[0].kind == CONST:
        return mul(const(ca * b.args[0].payload), b.args[1])
    if a.kind == NEG and b.kind == NEG:
        return mul(a.args[0], b.args[0])
    if a.kind == NEG:
        return neg(mul(a.args[0], b))
    if b.kind == NEG:
        return neg(mul(a, b.args[0]))
    return _make(MUL, None, (a, b))


def div(a: Expr, b: Expr) -> Expr:
    ca, cb = _c(a), _c(b)
    if cb == 0.0:
        raise ZeroDivisionError("division by the constant 0")
    if ca == 0.0:
        return ZERO
    if cb == 1.0:
        return a
    if cb == -1.0:
        return neg(a)
    if ca is not None and cb is not None:
        return const(ca / cb)
    if cb is not None:
        return mul(const(1.0 / cb), a)
    if a.kind == NEG:
        return neg(div(a.args[0], b))
    if b.kind == NEG:
        return neg(div(a, b.args[0]))
    return _make(DIV, None, (a, b))


def power(a: Expr, k: int) -> Expr:
    k = int(k)
    if k == 0:
        return ONE
    if k == 1:
        return a
    ca = _c(a)
    if ca is not None:
        if ca == 0.0 and k < 0:
            raise ZeroDivisionError("0 raised to a negative power")
        return const(ca ** k)
    if a.kind == POW:
        return power(a.args[0], a.payload * k)
    return _make(POW, k, (a,))


_FUNC_IMPL = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "sqrt": math.sqrt,
    "exp": math.exp,
    "log": math.log,
}


def func(name: str, a: Expr) -> Expr:
    if name not in _FUNC_IMPL:
        raise ValueError(f"unknown function {name!r}")
    ca = _c(a)
    if ca is not None:
        try:
            return const(_FUNC_IMPL[name](ca))
        except (ValueError, OverflowError):
            pass
    return _make(name, None, (a,))


def sin(a):
    return func("sin", as_expr(a))


def cos(a):
    return func("cos", as_expr(a))


def tan(a):
    return func("tan", as_expr(a))


def sqrt(a):
    return func("sqrt", as_expr(a))


def exp(a):
    return func("exp", as_expr(a))


def log(a):
    return func("log", as_expr(a))


def add_all(terms: Iterable[Expr]) -> Expr:
    total = ZERO
    for t in terms:
        total = add(total, t)
    return total


def linsolve(M: Sequence[Sequence[Expr]], r: Sequence[Expr]) -> list[Expr]:
    """Components of the solution ``a`` of ``M a = r`` as expression nodes."""
    k = len(r)
    M = [[as_expr(e) for e in row] for row in M]
    r = [as_expr(e) for e in r]
    if len(M) != k or any(len(row) != k for row in M):
        raise ValueError("linsolve needs a square matrix matching the rhs")
    if all(e is ZERO for e in r):
        return [ZERO] * k
    if k == 1:
        return [div(r[0], M[0][0])]
    if all((M[i][j] is ONE) if i == j else (M[i][j] is ZERO)
           for i in range(k) for j in range(k)):
        return list(r)
    args = tuple(e for row in M for e in row) + tuple(r)
    return [_make(LINSOLVE, (k, c), args) for c in range(k)]


def linsolve_parts(e: Expr):
    """Return ``(M, r, k, component)`` of a linear-solve node."""
    k, c = e.payload
    flat = e.args
    M = [list(flat[i * k:(i + 1) * k]) for i in range(k)]
    r = list(flat[k * k:])
    return M, r, k, c


def implicit(residuals: Sequence[Expr], unknowns: Sequence) -> list[Expr]:
    """Nodes for the solution ``w`` of ``residuals(w, ...) = 0``.

    ``unknowns`` are the JetVars bound by the node; they do not count as free
    variables of the result.  Numeric evaluation uses damped Newton.
    """
    unknowns = tuple(unknowns)
    k = len(unknowns)
    if len(residuals) != k:
        raise ValueError("implicit node needs as many residuals as unknowns")
    args = tuple(as_expr(r) for r in residuals)
    return [_make(IMPLICIT, (unknowns, c), args) for c in range(k)]


# --- traversal -------------------------------------------------------------

def postorder(roots: Iterable[Expr], into_implicit: bool = True) -> list[Expr]:
    """All nodes reachable from ``roots``, children before parents.

    With ``into_implicit=False`` implicit nodes are leaves (evaluation order).
    """
    seen = set()
    out = []
    stack = [(r, False) for r in reversed(list(roots))]
    while stack:
        node, done = stack.pop()
        if done:
            out.append(node)
            continue
        if node in seen:
            continue
        seen.add(node)
        stack.append((node, True))
        if node.kind == IMPLICIT and not into_implicit:
            continue
        for a in reversed(node.args):
            if a not in seen:
                stack.append((a, False))
    return out


def dag_size(e: Expr) -> int:
    return len(postorder([e]))


def tree_size(e: Expr, limit: int = 10**9) -> int:
    sizes = {}
    for n in postorder([e]):
        s = 1 + sum(sizes[a] for a in n.args)
        sizes[n] = min(s, limit)
    return sizes[e]


_free_cache: dict = {}


def free_vars(e: Expr) -> frozenset:
    """JetVars occurring free in ``e`` (bound unknowns of implicit nodes excluded)."""
    hit = _free_cache.get(e)
    if hit is not None:
        return hit
    for n in postorder([e]):
        if n in _free_cache:
            continue
        if n.kind == VAR:
            fv = frozenset((n.payload,))
        elif not n.args:
            fv = frozenset()
        else:
            fv = frozenset().union(*(_free_cache[a] for a in n.args))
            if n.kind == IMPLICIT:
                fv = fv - frozenset(n.payload[0])
        _free_cache[n] = fv
    return _free_cache[e]


def free_vars_all(exprs: Iterable[Expr]) -> frozenset:
    out = frozenset()
    for e in exprs:
        out = out | free_vars(e)
    return out


def structural_key(e: Expr) -> bytes:
    """Deterministic digest of the tree shape (stable across processes)."""
    if e._skey is not None:
        return e._skey
    for n in postorder([e]):
        if n._skey is not None:
            continue
        h = hashlib.blake2b(digest_size=12)
        h.update(n.kind.encode())
        if n.kind == VAR:
            h.update(n.payload.name.encode())
        elif n.kind == IMPLICIT:
            h.update(repr((tuple(u.name for u in n.payload[0]), n.payload[1])).encode())
        else:
            h.update(repr(n.payload).encode())
        for a in n.args:
            h.update(a._skey)
        n._skey = h.digest()
    return e._skey


# --- rebuilding ------------------------------------------------------------

def rebuild(n: Expr, args: Sequence[Expr]) -> Expr:
    """Rebuild node ``n`` with new children through the smart constructors."""
    k = n.kind
    if k == NEG:
        return neg(args[0])
    if k == ADD:
        return add(args[0], args[1])
    if k == SUB:
        return sub(args[0], args[1])
    if k == MUL:
        return mul(args[0], args[1])
    if k == DIV:
        return div(args[0], args[1])
    if k == POW:
        return power(args[0], n.payload)
    if k in _FUNC_IMPL:
        return func(k, args[0])
    if k == LINSOLVE:
        kk, c = n.payload
        M = [list(args[i * kk:(i + 1) * kk]) for i in range(kk)]
        return linsolve(M, args[kk * kk:])[c]
    if k == IMPLICIT:
        unknowns, c = n.payload
        return implicit(args, unknowns)[c]
    raise ValueError(f"cannot rebuild node of kind {k}")


def transform(roots: Sequence[Expr], leaf: Callable[[Expr], Expr | None]) -> list[Expr]:
    """Bottom-up rewrite: ``leaf`` may replace VAR/CONST nodes (return None to keep)."""
    memo = {}
    for n in postorder(roots):
        if not n.args:
            rep = leaf(n)
            memo[n] = n if rep is None else rep
            continue
        new_args = tuple(memo[a] for a in n.args)
        if all(x is y for x, y in zip(new_args, n.args)):
            memo[n] = n
        else:
            memo[n] = rebuild(n, new_args)
    return [memo[r] for r in roots]


def simplify(e: Expr) -> Expr:
    """Constant folding and 0/1 identities applied throughout the tree."""
    memo = {}
    for n in postorder([e]):
        if not n.args:
            memo[n] = n
        else:
            memo[n] = rebuild(n, [memo[a] for a in n.args])
    return memo[e]


class SubstitutionCycle(ValueError):
    pass


def _check_acyclic(bindings: Mapping) -> None:
    deps = {}
    for v, val in bindings.items():
        if val.kind == VAR and val.payload == v:
            continue
        deps[v] = [w for w in free_vars(val) if w in bindings]
    state = {}

    def visit(v, path):
        st = state.get(v)
        if st == 1:
            raise SubstitutionCycle("cyclic bindings: " + " -> ".join(w.name for w in path + [v]))
        if st == 2:
            return
        state[v] = 1
        for w in deps.get(v, ()):
            visit(w, path + [v])
        state[v] = 2

    for v in deps:
        visit(v, [])


def substitute(e: Expr, bindings: Mapping) -> Expr:
    """Simultaneously replace variables by expressions."""
    return substitute_all([e], bindings)[0]


def substitute_all(exprs: Sequence[Expr], bindings: Mapping) -> list[Expr]:
    if not bindings:
        return list(exprs)
    bindings = {v: as_expr(val) for v, val in bindings.items()}
    _check_acyclic(bindings)
    keys = frozenset(bindings)

    memo = {}
    for n in postorder(exprs):
        if n.kind == VAR:
            memo[n] = bindings.get(n.payload, n)
            continue
        if not n.args or not (free_vars(n) & keys):
            memo[n] = n
            continue
        if n.kind == IMPLICIT and frozenset(n.payload[0]) & keys:
            raise ValueError("cannot substitute a variable bound by an implicit node")
        new_args = tuple(memo[a] for a in n.args)
        memo[n] = rebuild(n, new_args)
    return [memo[x] for x in exprs]


# --- differentiation -------------------------------------------------------

def derivative(e: Expr, direction) -> Expr:
    """Directional derivative of ``e``.

    ``direction`` maps a JetVar to the Expr of its rate (a mapping or a
    callable returning an Expr or None for zero).
    """
    return derivative_all([e], direction)[0]


def derivative_all(exprs: Sequence[Expr], direction) -> list[Expr]:
    if isinstance(direction, Mapping):
        dmap = direction
        direction = lambda v: dmap.get(v)  # noqa: E731
    memo: dict = {}
    for n in postorder(exprs):
        memo[n] = _d_node(n, memo, direction)
    return [memo[x] for x in exprs]


def _d_node(n: Expr, memo, direction) -> Expr:
    k = n.kind
    if k == CONST:
        return ZERO
    if k == VAR:
        d = direction(n.payload)
        return ZERO if d is None else as_expr(d)
    if k == NEG:
        return neg(memo[n.args[0]])
    if k == ADD:
        return add(memo[n.args[0]], memo[n.args[1]])
    if k == SUB:
        return sub(memo[n.args[0]], memo[n.args[1]])
    if k == MUL:
        a, b = n.args
        return add(mul(memo[a], b), mul(a, memo[b]))
    if k == DIV:
        a, b = n.args
        da, db = memo[a], memo[b]
        if da is ZERO and db is ZERO:
            return ZERO
        return div(sub(da, mul(n, db)), b)
    if k == POW:
        a = n.args[0]
        da = memo[a]
        if da is ZERO:
            return ZERO
        p = n.payload
        return mul(mul(const(p), power(a, p - 1)), da)
    if k in _FUNC_IMPL:
        a = n.args[0]
        da = memo[a]
        if da is ZERO:
            return ZERO
        if k == "sin":
            return mul(cos(a), da)
        if k == "cos":
            return neg(mul(sin(a), da))
        if k == "tan":
            return mul(add(ONE, power(n, 2)), da)
        if k == "sqrt":
            return div(da, mul(TWO, n))
        if k == "exp":
            return mul(n, da)
        if k == "log":
            return div(da, a)
    if k == LINSOLVE:
        M, r, kk, c = linsolve_parts(n)
        dM = [[memo[x] for x in row] for row in M]
        dr = [memo[x] for x in r]
        m_const = all(x is ZERO for row in dM for x in row)
        if m_const and all(x is ZERO for x in dr):
            return ZERO
        if m_const:
            rhs = dr
        else:
            sol = linsolve(M, r)
            rhs = [sub(dr[i], add_all(mul(dM[i][j], sol[j]) for j in range(kk)))
                   for i in range(kk)]
        return linsolve(M, rhs)[c]
    if k == IMPLICIT:
        return _d_implicit(n, direction)
    raise ValueError(f"no derivative rule for {k}")


def _d_implicit(n: Expr, direction) -> Expr:
    unknowns, c = n.payload
    bound = frozenset(unknowns)
    residuals = list(n.args)
    sol = implicit(residuals, unknowns)
    at_sol = dict(zip(unknowns, sol))

    def masked(v):
        return None if v in bound else direction(v)

    dF = derivative_all(residuals, masked)
    if all(d is ZERO for d in dF):
        return ZERO
    jac = [[derivative(r, {u: ONE}) for u in unknowns] for r in residuals]
    flat = substitute_all([x for row in jac for x in row] + [neg(d) for d in dF], at_sol)
    kk = len(unknowns)
    Js = [flat[i * kk:(i + 1) * kk] for i in range(kk)]
    rhs = flat[kk * kk:]
    return linsolve(Js, rhs)[c]


def differentiate(e: Expr, w) -> Expr:
    """Partial derivative with respect to the JetVar ``w``."""
    return derivative(e, {w: ONE})
