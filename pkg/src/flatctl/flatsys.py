"""System definitions: the file format, validation, and the two bundled systems."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .expr import Expr, ParseError, parse
from .expr.core import cos, const, free_vars, linsolve, mul, sin, var
from .jets import JetRegistry, JetVar, MultiIndex, sort_vars
from .sampling import SampleBox

CRANE_DEFAULTS = {"mL": 1.0, "mT": 5.0, "mB": 10.0, "J": 0.01, "r": 0.1, "g": 9.81}
CRANE_STATES = ("xT", "yT", "phi", "alpha", "beta",
                "vxT", "vyT", "omega_phi", "omega_alpha", "omega_beta")


class SystemDefinitionError(ValueError):
    """Invalid system description; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        self.line = line
        self.offset = offset
        where = ""
        if line is not None:
            where = f"line {line}"
            if offset is not None:
                where += f", byte {offset}"
            where += ": "
        super().__init__(where + message)


@dataclass
class FlatSystemDef:
    name: str
    registry: JetRegistry
    dynamics: dict  # JetVar -> Expr
    outputs: list  # Expr per flat-output component
    params: dict = field(default_factory=dict)
    R: MultiIndex | None = None
    hints: dict = field(default_factory=dict)  # stage -> [output index (1-based)]
    box: SampleBox = field(default_factory=SampleBox)

    @property
    def n(self) -> int:
        return self.registry.n

    @property
    def m(self) -> int:
        return self.registry.m

    @property
    def states(self) -> list[JetVar]:
        return self.registry.states

    @property
    def inputs(self) -> list[JetVar]:
        return self.registry.inputs

    def f(self, i: int) -> Expr:
        return self.dynamics[self.registry.x(i)]

    def validate(self) -> "FlatSystemDef":
        reg = self.registry
        if len(self.outputs) != reg.m:
            raise SystemDefinitionError(
                f"{len(self.outputs)} flat-output components for {reg.m} inputs")
        missing = [x.name for x in reg.states if x not in self.dynamics]
        if missing:
            raise SystemDefinitionError("missing dynamics for " + ", ".join(missing))
        allowed = set(reg.states) | set(reg.inputs)
        for what, exprs in (("dynamics", list(self.dynamics.values())), ("flat output", self.outputs)):
            for e in exprs:
                bad = [v.name for v in sort_vars(free_vars(e)) if v not in allowed]
                if bad:
                    raise SystemDefinitionError(
                        f"{what} may only use states and inputs, found {', '.join(bad)}")
        if self.R is not None and len(self.R) != reg.m:
            raise SystemDefinitionError(f"declared R has {len(self.R)} entries for {reg.m} outputs")
        for stage, outs in self.hints.items():
            for j in outs:
                if not 1 <= j <= reg.m:
                    raise SystemDefinitionError(f"hint for stage {stage} names unknown output y{j}")
        return self


# --- file format -------------------------------------------------------------

_SECTION = re.compile(r"^\[(\w+)\]\s*(.*)$")
_SECTIONS = ("system", "states", "inputs", "params", "dynamics", "flat_output",
             "declare", "hints", "box")
_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def _split_names(s: str) -> list[str]:
    return [t for t in re.split(r"[\s,]+", s.strip()) if t]


def load_system(source, *, params: Mapping[str, float] | None = None) -> FlatSystemDef:
    """Load a system from a path or from the text of a definition.

    ``params`` overrides values given in the ``[params]`` section.
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and not source.lstrip().startswith("[")):
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as err:
            raise SystemDefinitionError(f"cannot read {path}: {err.strerror}") from None
    else:
        text = source
    return parse_system(text, params=params)


def parse_system(text: str, params: Mapping[str, float] | None = None) -> FlatSystemDef:
    sections: dict[str, list[tuple[int, str, int]]] = {}
    current = None
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        m = _SECTION.match(stripped)
        if m:
            current = m.group(1)
            if current not in _SECTIONS:
                raise SystemDefinitionError(f"unknown section [{current}]", lineno)
            if current in sections:
                raise SystemDefinitionError(f"duplicate section [{current}]", lineno)
            sections[current] = []
            rest = m.group(2).strip()
            if rest:
                col = raw_line.index(rest)
                sections[current].append((lineno, rest, len(raw_line[:col].encode())))
            continue
        if current is None:
            raise SystemDefinitionError("content before the first section", lineno)
        col = raw_line.index(stripped)
        sections[current].append((lineno, stripped, len(raw_line[:col].encode())))

    for req in ("states", "inputs", "dynamics", "flat_output"):
        if req not in sections:
            raise SystemDefinitionError(f"missing section [{req}]")

    name = "system"
    for lineno, s, _ in sections.get("system", []):
        k, _, v = s.partition("=")
        if k.strip() != "name" or not v.strip():
            raise SystemDefinitionError("expected name=<id> in [system]", lineno)
        name = v.strip()

    states = [t for _, s, _ in sections["states"] for t in _split_names(s)]
    inputs = [t for _, s, _ in sections["inputs"] for t in _split_names(s)]
    ident = re.compile(r"[A-Za-z][A-Za-z0-9_]*$")
    for t in states + inputs:
        if not ident.match(t):
            raise SystemDefinitionError(f"invalid identifier {t!r}")
    if not states or not inputs:
        raise SystemDefinitionError("need at least one state and one input")

    pvals: dict[str, float] = {}
    for lineno, s, _ in sections.get("params", []):
        for item in _split_names(s.replace(" = ", "=").replace("= ", "=").replace(" =", "=")):
            k, eq, v = item.partition("=")
            if not eq or not ident.match(k):
                raise SystemDefinitionError(f"expected key=value, got {item!r}", lineno)
            try:
                pvals[k] = float(v)
            except ValueError:
                raise SystemDefinitionError(f"parameter {k} is not a number", lineno) from None
    if params:
        unknown = set(params) - set(pvals)
        if unknown:
            raise SystemDefinitionError("unknown parameter(s) " + ", ".join(sorted(unknown)))
        pvals.update({k: float(v) for k, v in params.items()})

    try:
        reg = JetRegistry(states, inputs, pvals)
    except ValueError as err:
        raise SystemDefinitionError(str(err)) from None

    def expr_at(lineno, rhs_text, base_offset):
        try:
            return parse(rhs_text, reg)
        except ParseError as err:
            raise SystemDefinitionError(err.message, lineno, base_offset + err.offset) from None

    dynamics: dict = {}
    for lineno, s, off in sections["dynamics"]:
        m = re.match(r"([A-Za-z][A-Za-z0-9_]*)'\s*=\s*", s)
        if not m:
            raise SystemDefinitionError("expected <state>' = <expr>", lineno)
        if m.group(1) not in states:
            raise SystemDefinitionError(f"{m.group(1)!r} is not a declared state", lineno)
        xv = reg.x(states.index(m.group(1)) + 1)
        if xv in dynamics:
            raise SystemDefinitionError(f"duplicate dynamics for {m.group(1)}", lineno)
        dynamics[xv] = expr_at(lineno, s[m.end():], off + len(s[:m.end()].encode()))

    outputs: dict[int, Expr] = {}
    for lineno, s, off in sections["flat_output"]:
        m = re.match(r"y(\d+)\s*=\s*", s)
        if not m:
            raise SystemDefinitionError("expected y<j> = <expr>", lineno)
        j = int(m.group(1))
        if j in outputs:
            raise SystemDefinitionError(f"duplicate output y{j}", lineno)
        outputs[j] = expr_at(lineno, s[m.end():], off + len(s[:m.end()].encode()))
    if sorted(outputs) != list(range(1, len(outputs) + 1)):
        raise SystemDefinitionError("flat outputs must be numbered y1..ym without gaps")

    R = None
    for lineno, s, _ in sections.get("declare", []):
        m = re.match(r"R\s*=\s*\(([^)]*)\)\s*$", s)
        if not m:
            raise SystemDefinitionError("expected R = (r1,...,rm)", lineno)
        try:
            R = MultiIndex(int(t) for t in _split_names(m.group(1)))
        except ValueError:
            raise SystemDefinitionError("R entries must be nonnegative integers", lineno) from None

    hints: dict[int, list[int]] = {}
    for lineno, s, _ in sections.get("hints", []):
        m = re.match(r"stage(\d+)_outputs\s*=\s*(.*)$", s)
        if not m:
            raise SystemDefinitionError("expected stage<i>_outputs = y<a>,y<b>", lineno)
        outs = []
        for t in _split_names(m.group(2)):
            mm = re.match(r"y(\d+)$", t)
            if not mm:
                raise SystemDefinitionError(f"bad output name {t!r}", lineno)
            outs.append(int(mm.group(1)))
        hints[int(m.group(1))] = outs

    overrides = {}
    for lineno, s, _ in sections.get("box", []):
        m = re.match(rf"([A-Za-z][A-Za-z0-9_]*)\s*=\s*({_NUMBER})\s*,\s*({_NUMBER})$", s)
        if not m or m.group(1) not in states + inputs:
            raise SystemDefinitionError("expected <state or input> = lo,hi", lineno)
        lo, hi = float(m.group(2)), float(m.group(3))
        if not lo < hi:
            raise SystemDefinitionError("box interval must have lo < hi", lineno)
        overrides[m.group(1)] = (lo, hi)

    sysdef = FlatSystemDef(name=name, registry=reg, dynamics=dynamics,
                           outputs=[outputs[j] for j in sorted(outputs)], params=pvals,
                           R=R, hints=hints, box=SampleBox(overrides=overrides))
    return sysdef.validate()


# --- bundled systems ---------------------------------------------------------

def builtin_academic() -> FlatSystemDef:
    text = resources.files("flatctl").joinpath("systems/academic.sys").read_text(encoding="utf-8")
    return parse_system(text)


def crane_mass_matrix(state: Sequence[Expr], p: Mapping[str, float]):
    """Generalized mass matrix and remaining terms of the crane's Lagrange equations.

    ``state`` is (xT, yT, phi, alpha, beta) followed by their rates.  Returns
    ``(M, c)`` such that the equations read ``M q'' + c = (u1, u2, u3, 0, 0)``,
    with the two swing equations divided by mL.
    """
    xT, yT, ph, al, be, _, _, dph, dal, dbe = state
    mL, mT, mB, J, r, g = (const(p[k]) for k in ("mL", "mT", "mB", "J", "r", "g"))
    sa, ca, sb, cb = sin(al), cos(al), sin(be), cos(be)
    rph = r * ph
    Z = const(0.0)
    M = [
        [mL + mT, Z, mL * r * sb, Z, mL * r * ph * cb],
        [Z, mL + mT + mB, mL * r * sa * cb, mL * rph * ca * cb, -(mL * rph * sa * sb)],
        [mL * r * sb, mL * r * sa * cb, J + mL * r * r, Z, Z],
        [Z, rph * ca * cb, Z, (rph * cb) ** 2, Z],
        [rph * cb, -(rph * sa * sb), Z, Z, rph ** 2],
    ]
    c = [
        mL * r * dbe * (2 * cb * dph - ph * sb * dbe),
        -(mL * r * (sa * (ph * cb * (dal ** 2 + dbe ** 2) + 2 * sb * dbe * dph)
                    + 2 * ca * dal * (ph * sb * dbe - cb * dph))),
        -(mL * r * (rph * (dbe ** 2 + (cb * dal) ** 2) + g * ca * cb)),
        rph * cb * (2 * r * dal * (cb * dph - ph * sb * dbe) + g * sa),
        rph * (2 * r * dbe * dph + rph * sb * cb * dal ** 2 + ca * sb * g),
    ]
    return M, c


def builtin_crane(params: Mapping[str, float] | None = None) -> FlatSystemDef:
    """Gantry crane with hoist; accelerations are linear-solve nodes of M q'' = u - c."""
    p = dict(CRANE_DEFAULTS)
    if params:
        unknown = set(params) - set(p)
        if unknown:
            raise SystemDefinitionError("unknown crane parameter(s) " + ", ".join(sorted(unknown)))
        p.update({k: float(v) for k, v in params.items()})
    for k, v in p.items():
        if not v > 0:
            raise SystemDefinitionError(f"crane parameter {k} must be positive")
    reg = JetRegistry(CRANE_STATES, ("u1", "u2", "u3"), p)
    X = [var(x) for x in reg.states]
    U = [var(u) for u in reg.inputs]
    M, c = crane_mass_matrix(X, p)
    zero = const(0.0)
    tau = [U[0] - c[0], U[1] - c[1], U[2] - c[2], zero - c[3], zero - c[4]]
    acc = linsolve(M, tau)
    dynamics = {}
    for i in range(5):
        dynamics[reg.x(i + 1)] = X[5 + i]
        dynamics[reg.x(6 + i)] = acc[i]
    r = const(p["r"])
    xT, yT, ph, al, be = X[:5]
    outputs = [
        xT + mul(r * ph, sin(be)),
        yT + r * ph * sin(al) * cos(be),
        r * ph * cos(al) * cos(be),
    ]
    box = SampleBox(overrides={"alpha": (-1.0, 1.0), "beta": (-1.0, 1.0), "phi": (1.0, 10.0)})
    sysdef = FlatSystemDef(name="crane", registry=reg, dynamics=dynamics, outputs=outputs,
                           params=p, R=MultiIndex((4, 4, 4)), hints={1: [3]}, box=box)
    return sysdef.validate()


def chain_of_integrators(n: int = 2) -> FlatSystemDef:
    """x1' = x2, ..., xn' = u with y = x1."""
    lines = ["[system]", "name = chain", "[states]", " ".join(f"x{i}" for i in range(1, n + 1)),
             "[inputs]", "u", "[dynamics]"]
    lines += [f"x{i}' = x{i + 1}" for i in range(1, n)] + [f"x{n}' = u"]
    lines += ["[flat_output]", "y1 = x1", "[declare]", f"R = ({n})"]
    return parse_system("\n".join(lines) + "\n")


def get_system(source: str, params: Mapping[str, float] | None = None) -> FlatSystemDef:
    """Resolve ``builtin:academic``, ``builtin:crane`` or a file path."""
    if source == "builtin:academic":
        if params:
            raise SystemDefinitionError("the academic system has no parameters")
        return builtin_academic()
    if source == "builtin:crane":
        return builtin_crane(params)
    if source.startswith("builtin:"):
        raise SystemDefinitionError(f"unknown builtin system {source!r}")
    return load_system(Path(source), params=params)
