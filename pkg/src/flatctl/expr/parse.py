"""Recursive-descent parser for the infix expression grammar.

Grammar, loosest binding first::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | IDENT ('@' INT)? | FUNC '(' expr ')' | '(' expr ')'

The tree is built verbatim (no folding) so that printing reproduces it.
"""
from __future__ import annotations

import re

from .core import ADD, DIV, FUNCTIONS, MUL, NEG, POW, SUB, Expr, const, raw, var
from .core import postorder

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()@,])"
    r")"
)


class ParseError(ValueError):
    """Syntax error; ``offset`` is the byte offset into the UTF-8 source."""

    def __init__(self, message: str, offset: int, text: str = ""):
        self.message = message
        self.offset = offset
        self.text = text
        super().__init__(f"{message} at byte {offset}")


class UnknownIdentifier(ParseError):
    pass


class NonIntegerExponent(ParseError):
    pass


def _byte_offset(text: str, i: int) -> int:
    return len(text[:i].encode("utf-8"))


class _Tokens:
    def __init__(self, text: str):
        self.text = text
        self.toks = []
        pos = 0
        n = len(text)
        while pos < n:
            m = _TOKEN.match(text, pos)
            if m is None or m.end() == pos:
                rest = text[pos:]
                if not rest.strip():
                    break
                start = pos + len(rest) - len(rest.lstrip())
                raise ParseError(f"unexpected character {text[start]!r}",
                                 _byte_offset(text, start), text)
            kind = m.lastgroup
            if kind is None:
                break
            self.toks.append((kind, m.group(kind), m.start(kind)))
            pos = m.end()
        self.toks.append(("end", "", len(text)))
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def next(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, message, tok=None, cls=ParseError):
        tok = tok or self.peek()
        return cls(message, _byte_offset(self.text, tok[2]), self.text)

    def expect(self, value):
        tok = self.peek()
        if tok[0] != "op" or tok[1] != value:
            found = "end of input" if tok[0] == "end" else repr(tok[1])
            raise self.error(f"expected {value!r}, found {found}")
        return self.next()


def parse(text: str, registry=None, resolve=None) -> Expr:
    """Parse ``text`` into an Expr.

    Identifiers are resolved through ``registry.resolve(name, order)``, or
    through the ``resolve`` callable when given.  A resolver returns a JetVar,
    a float (parameters become constants) or None for unknown names.
    """
    if resolve is None:
        if registry is None:
            raise ValueError("parse needs a registry or a resolve callable")
        resolve = registry.resolve
    toks = _Tokens(text)
    e = _expr(toks, resolve)
    if toks.peek()[0] != "end":
        raise toks.error(f"unexpected {toks.peek()[1]!r}")
    return e


def _expr(toks, resolve):
    left = _term(toks, resolve)
    while True:
        kind, val, _ = toks.peek()
        if kind == "op" and val in "+-":
            toks.next()
            right = _term(toks, resolve)
            left = raw(ADD if val == "+" else SUB, left, right)
        else:
            return left


def _term(toks, resolve):
    left = _unary(toks, resolve)
    while True:
        kind, val, _ = toks.peek()
        if kind == "op" and val in "*/":
            toks.next()
            right = _unary(toks, resolve)
            left = raw(MUL if val == "*" else DIV, left, right)
        else:
            return left


def _unary(toks, resolve):
    kind, val, _ = toks.peek()
    if kind == "op" and val == "-":
        toks.next()
        return raw(NEG, _unary(toks, resolve))
    return _power(toks, resolve)


def _power(toks, resolve):
    base = _atom(toks, resolve)
    kind, val, _ = toks.peek()
    if kind == "op" and val == "^":
        tok = toks.next()
        exp_tok = toks.peek()
        exponent = _unary(toks, resolve)
        k = _constant_value(exponent)
        if k is None or k != int(k):
            raise toks.error("exponent must be an integer constant", exp_tok, NonIntegerExponent)
        del tok
        return raw(POW, base, payload=int(k))
    return base


def _constant_value(e: Expr):
    """Fold a variable-free exponent subtree; None when it has variables."""
    vals = {}
    for n in postorder([e]):
        if n.kind == "const":
            vals[n] = n.payload
        elif n.kind == NEG:
            vals[n] = -vals[n.args[0]]
        elif n.kind == POW:
            vals[n] = vals[n.args[0]] ** n.payload
        elif n.kind in (ADD, SUB, MUL, DIV):
            a, b = (vals[x] for x in n.args)
            try:
                vals[n] = {ADD: a + b, SUB: a - b, MUL: a * b,
                           DIV: a / b if b else float("nan")}[n.kind]
            except OverflowError:
                return None
        else:
            return None
    v = vals[e]
    return None if v != v else v


def _atom(toks, resolve):
    tok = toks.next()
    kind, val, _ = tok
    if kind == "num":
        return const(float(val))
    if kind == "op" and val == "(":
        e = _expr(toks, resolve)
        toks.expect(")")
        return e
    if kind == "ident":
        if val in FUNCTIONS:
            nxt = toks.peek()
            if nxt[0] == "op" and nxt[1] == "(":
                toks.next()
                arg = _expr(toks, resolve)
                toks.expect(")")
                return raw(val, arg)
            raise toks.error(f"function {val!r} needs a parenthesized argument")
        order = 0
        nxt = toks.peek()
        if nxt[0] == "op" and nxt[1] == "@":
            toks.next()
            ktok = toks.next()
            if ktok[0] != "num" or not ktok[1].isdigit() or int(ktok[1]) < 1:
                raise toks.error("jet suffix must be a positive integer", ktok)
            order = int(ktok[1])
        target = resolve(val, order)
        if target is None:
            suffix = f"@{order}" if order else ""
            raise toks.error(f"unknown identifier {val + suffix!r}", tok, UnknownIdentifier)
        if isinstance(target, (int, float)):
            if order:
                raise toks.error(f"parameter {val!r} cannot carry a jet suffix", tok)
            return const(float(target))
        return var(target)
    if kind == "end":
        raise toks.error("unexpected end of input", tok)
    raise toks.error(f"unexpected {val!r}", tok)
