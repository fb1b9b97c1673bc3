"""Command-line frontend: ``flatctl analyze | synthesize | simulate | verify SOURCE``."""
from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from .expr import ParseError, describe
from .expr.printer import format_number
from .flatsys import FlatSystemDef, SystemDefinitionError, get_system
from .jets import DerivativeCapExceeded
from .kappa import PlanInvariantError, ProcedureError, StagePlan, check_plan, run_procedure
from .sampling import DEFAULT_SEED, SamplingError
from .scenarios import (Scenario, apply_reference_overrides, default_scenario, reference_smoothness,
                        run_verification, seeded_signs)
from .sim import SimConfig, SingularFeedback, consistent_state, simulate_closed_loop
from .track import (GainError, GainSet, TrackingError, parse_signal, required_orders,
                    synthesize_symbolic_law, tracking_law)

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_EXPR_SIZE = 400


class InputError(ValueError):
    pass


# --- configuration -------------------------------------------------------------

def resolve_seed(arg) -> int:
    if arg is not None:
        return int(arg)
    env = os.environ.get("FLATCTL_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"FLATCTL_SEED is not an integer: {env!r}") from None
    return DEFAULT_SEED


def _floats(text: str) -> list:
    text = text.strip().strip('"\'').strip("[]()")
    return [complex(p.replace(" ", "").replace("i", "j")) if ("j" in p or "i" in p) else float(p)
            for p in text.split(",") if p.strip()]


def _read_ini(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as err:
        raise InputError(f"cannot read {path}: {err.strerror}") from None
    except configparser.Error as err:
        raise InputError(f"{path}: {err}") from None
    return cp


def _output_key(key: str, m: int) -> tuple[int, str]:
    name, _, attr = key.partition(".")
    if not (name.startswith("y") and name[1:].isdigit()):
        raise InputError(f"unknown key {key!r}; expected y<j> or y<j>.poles / y<j>.coeffs")
    j = int(name[1:])
    if not 1 <= j <= m:
        raise InputError(f"{key}: output index out of range 1..{m}")
    return j, attr


def load_gains(path, plan: StagePlan) -> GainSet:
    if path is None:
        return GainSet.from_spec(plan.kappa)
    cp = _read_ini(path)
    poles, coeffs = {}, {}
    if cp.has_section("gains"):
        for key, val in cp.items("gains"):
            j, attr = _output_key(key, plan.system.m)
            try:
                vals = _floats(val)
            except ValueError:
                raise InputError(f"{key}: cannot parse {val!r}") from None
            if attr == "poles":
                poles[j] = vals
            elif attr == "coeffs":
                coeffs[j] = [float(v.real) if isinstance(v, complex) else v for v in vals]
            else:
                raise InputError(f"{key}: expected .poles or .coeffs")
    try:
        return GainSet.from_spec(plan.kappa, poles=poles, coeffs=coeffs)
    except GainError as err:
        raise InputError(str(err)) from None


def load_references(path, m: int, smooth: int) -> dict:
    if path is None:
        return {}
    cp = _read_ini(path)
    out = {}
    if cp.has_section("reference"):
        for key, val in cp.items("reference"):
            j, attr = _output_key(key, m)
            if attr:
                raise InputError(f"{key}: reference keys are y<j>")
            try:
                out[j] = parse_signal(val.strip().strip('"\''), smooth)
            except ValueError as err:
                raise InputError(f"{key}: {err}") from None
    return out


def parse_params(items) -> dict:
    out = {}
    for it in items or []:
        k, sep, v = it.partition("=")
        if not sep:
            raise InputError(f"--param expects name=value, got {it!r}")
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise InputError(f"--param {k}: not a number") from None
    return out


# --- reports -------------------------------------------------------------------

def _tuple(vals) -> str:
    return "(" + ",".join(str(v) for v in vals) + ")"


def _names(prefix: str, idx) -> str:
    return ",".join(f"{prefix}{i}" for i in idx)


def analyze_report(plan: StagePlan) -> str:
    sysdef = plan.system
    lines = [f"system: {sysdef.name} (n={sysdef.n}, m={sysdef.m})", f"seed: {plan.seed}"]
    for st in plan.stages:
        lines.append(f"stage {st.index}: remaining outputs {_names('y', st.remaining_outputs)}; "
                     f"remaining inputs {_names('u', st.remaining_inputs)}")
        lines.append(f"  K = {_tuple(st.K)}, m = {st.rank}")
        lines.append(f"  selected outputs {_names('y', st.outputs)} with kappa {_tuple(st.kappa)}; "
                     f"eliminated inputs {_names('u', st.inputs)}; "
                     f"{'affine' if st.affine else 'implicit'} solve")
        for v, row in zip(st.v, st.rows):
            lines.append(f"  {v.name} = {describe(row, REPORT_EXPR_SIZE)}")
    kap = plan.kappa
    lines.append(f"kappa (stage form): {plan.kappa_report()}")
    lines.append(f"kappa: {_tuple(kap)}")
    ok = abs(kap) == sysdef.n
    lines.append(f"|kappa| = {abs(kap)}, n = {sysdef.n}: {'confirmed' if ok else 'MISMATCH'}")
    if sysdef.R is not None:
        le = kap <= sysdef.R
        lines.append(f"kappa <= R = {_tuple(sysdef.R)}: {'confirmed' if le else 'VIOLATED'}")
    else:
        lines.append(f"R not declared; jets used imply R >= {_tuple(required_orders(plan))}")
    for d in plan.diagnostics:
        lines.append(f"diagnostic: {d}")
    return "\n".join(lines) + "\n"


def plan_dump(plan: StagePlan) -> dict:
    sysdef = plan.system
    stages = []
    for st in plan.stages:
        stages.append({
            "index": st.index,
            "remaining_outputs": list(st.remaining_outputs),
            "remaining_inputs": list(st.remaining_inputs),
            "K": list(st.K),
            "rank": st.rank,
            "outputs": list(st.outputs),
            "kappa": list(st.kappa),
            "inputs": list(st.inputs),
            "new_inputs": [v.name for v in st.v],
            "rows": [describe(r, REPORT_EXPR_SIZE) for r in st.rows],
            "affine": st.affine,
            "ys": {f"y{j}": [describe(e, REPORT_EXPR_SIZE) for e in ys] for j, ys in sorted(st.ys.items())},
        })
    fb = plan.feedback
    return {
        "system": sysdef.name,
        "n": sysdef.n,
        "m": sysdef.m,
        "seed": plan.seed,
        "states": [x.name for x in sysdef.states],
        "inputs": [u.name for u in sysdef.inputs],
        "R": None if sysdef.R is None else list(sysdef.R),
        "kappa": list(plan.kappa),
        "kappa_report": plan.kappa_report(),
        "stages": stages,
        "feedback": {u.name: describe(e, REPORT_EXPR_SIZE) for u, e in zip(fb.inputs, fb.exprs)},
        "diagnostics": list(plan.diagnostics),
    }


def synthesize_report(plan: StagePlan, law) -> str:
    lines = ["feedback (u in terms of x and new-input jets):"]
    fb = plan.feedback
    for u, e in zip(fb.inputs, fb.exprs):
        lines.append(f"  {u.name} = {describe(e, REPORT_EXPR_SIZE)}")
    gains = law.equations.gains
    lines.append("tracking gains (a0..a[kappa-1]):")
    for j in range(1, plan.system.m + 1):
        lines.append(f"  y{j}: " + ", ".join(format_number(float(a)) for a in gains.coeffs[j]))
    lines.append(f"tracking equations (R = {_tuple(law.R)}):")
    for v, e in law.equations.equations:
        lines.append(f"  {v.name} = {describe(e, REPORT_EXPR_SIZE)}")
    if all(st.affine for st in plan.stages):
        lines.append("tracking law (u in terms of x and reference jets):")
        try:
            exprs = synthesize_symbolic_law(plan, gains, law.R)
        except TrackingError as err:
            lines.append(f"  unavailable: {err}")
        else:
            for u, e in zip(fb.inputs, exprs):
                lines.append(f"  {u.name} = {describe(e, REPORT_EXPR_SIZE)}")
    else:
        lines.append("tracking law: evaluated numerically through implicit stage solves")
    return "\n".join(lines) + "\n"


def plot_description(trace, csv_name: str) -> str:
    n, m = trace.x.shape[1], trace.y.shape[1]
    lines = [f"data: {csv_name}", "x-axis: t [s]"]
    for j in range(1, m + 1):
        lines.append(f"panel output y{j}: y{j} (solid), yd{j} (dashed)")
    lines.append("panel errors: " + ", ".join(f"e{j}" for j in range(1, m + 1)))
    lines.append("panel inputs: " + ", ".join(f"u{j} = {name}" for j, name in enumerate(trace.input_names, 1)))
    lines.append("panel states: " + ", ".join(f"x{i} = {name}" for i, name in enumerate(trace.state_names, 1)))
    for ev in trace.events:
        lines.append(f"event: {ev}")
    return "\n".join(lines) + "\n"


# --- commands ------------------------------------------------------------------

def _emit(text: str, out_dir, filename: str):
    sys.stdout.write(text)
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / filename).write_text(text, encoding="utf-8", newline="\n")


def _write(out_dir, filename: str, text: str) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    p = d / filename
    p.write_text(text, encoding="utf-8", newline="\n")
    return p


def _load(args) -> FlatSystemDef:
    return get_system(args.source, parse_params(args.param))


def _plan(args, sysdef) -> StagePlan:
    plan = run_procedure(sysdef, seed=args.seed)
    check_plan(plan)
    return plan


def _law(args, plan):
    gains = load_gains(args.gains, plan)
    R = plan.system.R
    if R is None:
        R = required_orders(plan)
    return tracking_law(plan, gains, R)


def _scenario(args, law) -> Scenario:
    sc = default_scenario(law, t_end=args.t_end, dt=args.dt)
    refs = load_references(args.ref, law.plan.system.m, reference_smoothness(law))
    if refs:
        apply_reference_overrides(sc, refs)
    if args.tol_io is not None:
        sc.tol_io = args.tol_io
    if args.tol_err is not None:
        sc.tol_err = args.tol_err
    return sc


def cmd_analyze(args) -> int:
    sysdef = _load(args)
    plan = _plan(args, sysdef)
    _emit(analyze_report(plan), args.out, "analyze.txt")
    if args.out is not None:
        _write(args.out, "plan.json", json.dumps(plan_dump(plan), indent=2) + "\n")
    if args.json:
        sys.stdout.write(json.dumps(plan_dump(plan), indent=2) + "\n")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    sysdef = _load(args)
    plan = _plan(args, sysdef)
    law = _law(args, plan)
    _emit(synthesize_report(plan, law), args.out, "synthesize.txt")
    return EXIT_OK


def cmd_simulate(args) -> int:
    sysdef = _load(args)
    plan = _plan(args, sysdef)
    law = _law(args, plan)
    sc = _scenario(args, law)
    x0 = consistent_state(law, sc.refs, sc.x_guess)
    if args.perturb:
        signs = seeded_signs(args.seed, sysdef.n, 1)
        x0 = [a + args.perturb * s for a, s in zip(x0, signs)]
    trace = simulate_closed_loop(law, sc.refs, SimConfig(sc.t_end, sc.dt, x0=x0))
    out = Path(args.out or ".")
    csv_path = _write(out, "trace.csv", trace.to_csv())
    _write(out, "trace_plot.txt", plot_description(trace, csv_path.name))
    e_max = ", ".join("%.3e" % v for v in np.max(np.abs(trace.e), axis=0))
    sys.stdout.write(f"system: {sysdef.name}\nsteps: {len(trace.t) - 1} (dt={sc.dt:g}, t_end={sc.t_end:g})\n"
                     f"max |e|: [{e_max}]\nwrote {csv_path}\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    sysdef = _load(args)
    plan = _plan(args, sysdef)
    law = _law(args, plan)
    sc = _scenario(args, law)
    results, singular = run_verification(plan, law, sc, args.seed)
    lines = [f"system: {sysdef.name}", f"seed: {args.seed}",
             f"kappa: {plan.kappa_report()} -> {_tuple(plan.kappa)}",
             f"scenario: dt={sc.dt:g}, t_end={sc.t_end:g}, error horizon={sc.err_horizon:g}, "
             f"perturbation={sc.perturbation:g}"]
    lines += [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append("result: " + ("PASS" if not failed else "FAIL (" + ", ".join(failed) + ")"))
    _emit("\n".join(lines) + "\n", args.out, "verify.txt")
    if singular:
        return EXIT_NUMERIC
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "synthesize": cmd_synthesize,
            "simulate": cmd_simulate, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flatctl", description="Quasi-static feedback linearization of flat systems.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("source", help="system file, builtin:academic or builtin:crane")
    p.add_argument("--seed", type=int, default=None, help="sampling seed (default: $FLATCTL_SEED or built-in)")
    p.add_argument("--dt", type=float, default=None, help="integration step [s]")
    p.add_argument("--t-end", type=float, default=None, help="simulation horizon [s]")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--gains", default=None, help="file with a [gains] section")
    p.add_argument("--ref", default=None, help="file with a [reference] section")
    p.add_argument("--tol-io", type=float, default=None, help="input-output check tolerance")
    p.add_argument("--tol-err", type=float, default=None, help="error-dynamics check tolerance")
    p.add_argument("--perturb", type=float, default=0.0, help="simulate: seeded initial offset per state")
    p.add_argument("--param", action="append", help="override a system parameter, name=value")
    p.add_argument("--json", action="store_true", help="analyze: also print the plan dump")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.seed = resolve_seed(args.seed)
        if args.dt is not None and not args.dt > 0:
            raise InputError("--dt must be positive")
        if args.t_end is not None and args.dt is not None and not args.t_end >= args.dt:
            raise InputError("--t-end must be at least --dt")
        return COMMANDS[args.command](args)
    except (InputError, SystemDefinitionError, ParseError, GainError, FileNotFoundError) as err:
        print(f"flatctl: input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except PlanInvariantError as err:
        print(f"flatctl: plan check failed: {err}", file=sys.stderr)
        return EXIT_VERIFY
    except (SingularFeedback, ProcedureError, DerivativeCapExceeded, SamplingError, TrackingError,
            ArithmeticError) as err:
        print(f"flatctl: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
