"""Seeded random sample points for generic-rank and dependence tests."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .expr import EvaluationError, compile_exprs
from .expr.core import free_vars_all
from .jets import JetVar, sort_vars

DEFAULT_SEED = 20240611
DEFAULT_INTERVAL = (-0.9, 0.9)
MAX_RESAMPLES = 50


@dataclass(frozen=True)
class SampleBox:
    """Per-variable sampling intervals keyed by base name (all jet orders)."""

    default: tuple = DEFAULT_INTERVAL
    overrides: Mapping[str, tuple] = field(default_factory=dict)

    def interval(self, v: JetVar) -> tuple:
        if v.order == 0 and v.base in self.overrides:
            return self.overrides[v.base]
        return self.default


def sample_value(v: JetVar, seed: int, index: int, attempt: int, box: SampleBox) -> float:
    lo, hi = box.interval(v)
    tag = zlib.crc32(v.name.encode())
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index, attempt, tag]))
    return float(rng.uniform(lo, hi))


def sample_point(variables: Iterable[JetVar], seed: int, index: int, attempt: int = 0,
                 box: SampleBox | None = None) -> dict:
    box = box or SampleBox()
    return {v: sample_value(v, seed, index, attempt, box) for v in variables}


class SamplingError(RuntimeError):
    pass


def sample_evaluations(exprs: Sequence, n: int = 7, seed: int = DEFAULT_SEED,
                       box: SampleBox | None = None, extra_vars: Iterable[JetVar] = ()):
    """Evaluate ``exprs`` at ``n`` seeded points.

    A point whose evaluation hits a domain error is redrawn (up to 50 times).
    Returns ``(points, values)`` with ``values[i]`` a list aligned with exprs.
    """
    variables = sort_vars(set(free_vars_all(exprs)) | set(extra_vars))
    fn = compile_exprs(list(exprs), variables)
    points, values = [], []
    for i in range(n):
        last = None
        for attempt in range(MAX_RESAMPLES + 1):
            p = sample_point(variables, seed, i, attempt, box)
            try:
                vals = fn([p[v] for v in variables])
            except (EvaluationError, ArithmeticError, ValueError) as err:
                last = err
                continue
            points.append(p)
            values.append(vals)
            break
        else:
            raise SamplingError(f"no valid sample point after {MAX_RESAMPLES} resamples: {last}")
    return points, values
