"""Slice sampling updates: scalar, and over stored estimator randomness.

slice_linear is the textbook one-dimensional kernel: draw a height under the
(log) density, place a width-w interval uniformly around the current point,
optionally step out, then propose uniformly and shrink the bracket toward the
current point on rejection. The db variants run the same scalar walk over a
perturbation magnitude: slice_reflective_db moves uniform variates along a
random Gaussian direction through the reflection map (step width fixed at 1,
no step-out, so a unit-cube diameter is always reachable), and
slice_elliptical_db rotates Gaussian variates along a random ellipse, with
the angle bracket shrinking toward zero. Both accept in one target
evaluation per proposal and flatten the accepted lazy view into a concrete
db, so the caller's chain state stays free of view chains.

All kernels hand back the log target value at the accepted point; callers
use it to keep their cached estimate coherent without re-evaluating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Callable

import numpy as np

from apmcmc.random_db import (
    BaseSpace,
    RandomDb,
    perturb_elliptical,
    perturb_reflective,
)

__all__ = [
    "SliceConfig",
    "SliceOutcome",
    "DbSliceOutcome",
    "slice_linear",
    "slice_reflective_db",
    "slice_elliptical_db",
]

_NEG_INF = float("-inf")


@dataclass(frozen=True)
class SliceConfig:
    """Tuning knobs shared by the slice kernels.

    collapse_width=None resolves to 1e-12 * w: narrower brackets are treated
    as a collapse onto the current point, which the noisy-target kernels rely
    on instead of looping forever.
    """

    w: float = 1.0
    step_out: bool = False
    max_shrink: int = 100
    collapse_width: float | None = None

    def __post_init__(self) -> None:
        if not (self.w > 0.0):
            raise ValueError("slice width w must be positive")
        if self.max_shrink < 1:
            raise ValueError("max_shrink must be at least 1")
        if self.collapse_width is not None and not (self.collapse_width > 0.0):
            raise ValueError("collapse_width must be positive")

    @property
    def resolved_collapse_width(self) -> float:
        return self.collapse_width if self.collapse_width is not None else 1e-12 * self.w


@dataclass(frozen=True)
class SliceOutcome:
    new_point: float
    n_evals: int
    moved: bool
    collapsed: bool
    log_f: float


@dataclass(frozen=True)
class DbSliceOutcome:
    new_db: Any
    n_evals: int
    moved: bool
    collapsed: bool
    log_f: float


def _log_unit(rng: np.random.Generator) -> float:
    u = rng.random()
    return math.log(u) if u > 0.0 else _NEG_INF


def _slice_scalar(
    target: Callable[[float], tuple[float, Any]],
    x0: float,
    lf0: float,
    cfg: SliceConfig,
    rng: np.random.Generator,
    trace: list | None = None,
):
    """Shared engine; target returns (log density, payload).

    Returns (x, log_f, payload, n_evals, moved, collapsed); on collapse the
    input point is returned with payload None.
    """
    if lf0 == _NEG_INF or math.isnan(lf0):
        raise ValueError("slice sampling requires a finite log density at the current point")
    n_evals = 0
    log_h = lf0 + _log_unit(rng)
    u2 = cfg.w * rng.random()
    xmin = x0 - u2
    xmax = xmin + cfg.w
    if cfg.step_out:
        lf, _ = target(xmin)
        n_evals += 1
        while lf > log_h:
            xmin -= cfg.w
            lf, _ = target(xmin)
            n_evals += 1
        lf, _ = target(xmax)
        n_evals += 1
        while lf > log_h:
            xmax += cfg.w
            lf, _ = target(xmax)
            n_evals += 1
    collapse_width = cfg.resolved_collapse_width
    for _ in range(cfg.max_shrink):
        if xmax - xmin < collapse_width:
            break
        x = xmin + rng.random() * (xmax - xmin)
        lf, payload = target(x)
        n_evals += 1
        if trace is not None:
            trace.append((xmin, xmax, x))
        if lf > log_h:
            return x, lf, payload, n_evals, x != x0, False
        if x < x0:
            xmin = x
        elif x > x0:
            xmax = x
        else:
            break  # proposal landed exactly on x0: numerically exhausted
    return x0, lf0, None, n_evals, False, True


def slice_linear(
    log_f: Callable[[float], float],
    x0: float,
    cfg: SliceConfig,
    rng: np.random.Generator,
    log_f_x0: float | None = None,
    trace: list | None = None,
) -> SliceOutcome:
    """One slice update of a scalar coordinate.

    log_f_x0 passes a cached value for the current point; without it the
    kernel spends one evaluation recomputing it (and counts it in n_evals).
    """
    n0 = 0
    if log_f_x0 is None:
        log_f_x0 = log_f(float(x0))
        n0 = 1
    x, lf, _, n_evals, moved, collapsed = _slice_scalar(
        lambda x: (log_f(x), None), float(x0), float(log_f_x0), cfg, rng, trace
    )
    return SliceOutcome(x, n0 + n_evals, moved, collapsed, lf)


def slice_reflective_db(
    log_f_of_db: Callable[[Any], float],
    db: RandomDb,
    cfg: SliceConfig,
    rng: np.random.Generator,
    log_f_db: float | None = None,
) -> DbSliceOutcome:
    """Slice-sample the uniform variates along a random reflected direction.

    The scalar walk runs over the step magnitude z from z=0 with unit width
    and no step-out; every proposal evaluates the target through a lazy
    reflected view, and the accepted view is flattened.
    """
    if db.space is not BaseSpace.UNIT_UNIFORM:
        raise ValueError("slice_reflective_db requires a UNIT_UNIFORM db")
    n0 = 0
    if log_f_db is None:
        log_f_db = log_f_of_db(db)
        n0 = 1
    nu = RandomDb.fresh(db.ctx, BaseSpace.STANDARD_NORMAL)
    walk_cfg = replace(cfg, w=1.0, step_out=False)

    def target(z: float):
        view = perturb_reflective(db, nu, z)
        return log_f_of_db(view), view

    _, lf, view, n_evals, moved, collapsed = _slice_scalar(
        target, 0.0, float(log_f_db), walk_cfg, rng
    )
    if collapsed or view is None:
        return DbSliceOutcome(db, n0 + n_evals, False, collapsed, float(log_f_db))
    return DbSliceOutcome(view.flatten(), n0 + n_evals, moved, False, lf)


def slice_elliptical_db(
    log_f_of_db: Callable[[Any], float],
    db: RandomDb,
    rng: np.random.Generator,
    max_shrink: int = 100,
    log_f_db: float | None = None,
) -> DbSliceOutcome:
    """Slice-sample Gaussian variates along a random ellipse.

    Draws a fresh auxiliary Gaussian db, an initial angle uniform on
    [0, 2*pi] with bracket [angle - 2*pi, angle], and shrinks the bracket
    toward zero on rejection. No free step-size parameter.
    """
    if db.space is not BaseSpace.STANDARD_NORMAL:
        raise ValueError("slice_elliptical_db requires a STANDARD_NORMAL db")
    n0 = 0
    if log_f_db is None:
        log_f_db = log_f_of_db(db)
        n0 = 1
    if log_f_db == _NEG_INF or math.isnan(log_f_db):
        raise ValueError("slice sampling requires a finite log density at the current point")
    nu = RandomDb.fresh(db.ctx, BaseSpace.STANDARD_NORMAL)
    log_h = float(log_f_db) + _log_unit(rng)
    angle = 2.0 * math.pi * rng.random()
    lo = angle - 2.0 * math.pi
    hi = angle
    n_evals = 0
    for _ in range(max_shrink):
        view = perturb_elliptical(db, nu, angle)
        lf = log_f_of_db(view)
        n_evals += 1
        if lf > log_h:
            return DbSliceOutcome(view.flatten(), n0 + n_evals, True, False, lf)
        if angle < 0.0:
            lo = angle
        else:
            hi = angle
        angle = lo + rng.random() * (hi - lo)
    return DbSliceOutcome(db, n0 + n_evals, False, True, float(log_f_db))
