"""Symbolic scalar expressions."""
from .algebra import Affine, NotAffine, affine_decompose, collect, gauss_solve, solve_affine, tidy
from .core import (ONE, ZERO, Expr, SubstitutionCycle, add, as_expr, const, cos, dag_size,
                   derivative, derivative_all, differentiate, div, exp, free_vars, free_vars_all,
                   implicit, linsolve, log, mul, neg, power, raw, simplify, sin, sqrt,
                   structural_key, sub, substitute, substitute_all, tan, tree_size, var)
from .numeric import (Compiled, EvaluationError, NewtonFailure, SingularMatrixError,
                      compile_exprs, compile_program, evaluate, evaluate_all, evaluate_many)
from .parse import NonIntegerExponent, ParseError, UnknownIdentifier, parse
from .printer import describe, to_string

__all__ = [
    "Affine", "Compiled", "EvaluationError", "Expr", "NewtonFailure", "NonIntegerExponent",
    "NotAffine", "ONE", "ParseError", "SingularMatrixError", "SubstitutionCycle",
    "UnknownIdentifier", "ZERO", "add", "affine_decompose", "as_expr", "collect",
    "compile_exprs", "compile_program", "const", "cos", "dag_size", "derivative",
    "derivative_all", "describe", "differentiate", "div", "evaluate", "evaluate_all",
    "evaluate_many", "exp", "free_vars", "free_vars_all", "gauss_solve", "implicit",
    "linsolve", "log", "mul", "neg", "parse", "power", "raw", "simplify", "sin",
    "solve_affine", "sqrt", "structural_key", "sub", "substitute", "substitute_all", "tan",
    "tidy", "to_string", "tree_size", "var",
]
