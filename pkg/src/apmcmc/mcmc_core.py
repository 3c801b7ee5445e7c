"""Transition kernels over (parameters, stored randomness) chain states.

A chain state bundles theta, the random db feeding the density
estimator, and the cached log estimate at that pair.  Keeping the
randomness in the state turns the noisy estimate into a deterministic
surface that ordinary MCMC machinery can walk:

* ``pm_mh_step`` is the classic joint update: propose theta, redraw
  the db, accept on the estimate ratio.  Over-estimates make it stick.
* ``mi_u_step`` / ``ss_u_step`` refresh only the db, leaving theta
  alone; their invariant measure reweights the base randomness by the
  estimate.
* ``mh_theta_step`` / ``ss_theta_step`` move theta with the db
  clamped, so every proposal sees the same noise realisation.
* alternating a u-update with a theta-update gives the composed
  kernels ("apm-mi+mh" and friends in ``build_kernel``).
* ``noisy_slice_step`` is the cautionary kernel: slice sampling where
  every proposal draws fresh noise while the height sticks to the
  cached estimate.  It targets the right marginal but pays for it in
  evaluations when the cached estimate is high.

Every kernel returns the input state object unchanged on rejection
and keeps the cached log estimate bit-exact with a re-evaluation at
(theta, db); tests enforce both properties.
"""

import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Optional

import numpy as np

from apmcmc.random_db import BaseSpace, RandomDb
from apmcmc.slice_kernels import (
    SliceConfig,
    _log_unit,
    _slice_scalar,
    slice_elliptical_db,
    slice_linear,
    slice_reflective_db,
)

_NEG_INF = float("-inf")

KERNEL_NAMES = (
    "pm-mh",
    "noisy-ss",
    "apm-mi+mh",
    "apm-mi+ss",
    "apm-ss+mh",
    "apm-ss+ss",
)


@dataclass(frozen=True)
class ChainState:
    """Parameters, their stored randomness, and the cached log estimate."""

    theta: np.ndarray
    db: Any
    log_f_hat: float

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "log_f_hat", float(self.log_f_hat))


@dataclass(frozen=True)
class StepInfo:
    """What one kernel application did: flags and evaluation count."""

    accepted_u: Optional[bool]
    accepted_theta: Optional[bool]
    n_evals: int


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    theta: np.ndarray
    log_f_hat: float
    accepted_u: Optional[bool]
    accepted_theta: Optional[bool]
    n_estimator_evals: int  # cumulative over the chain so far


@dataclass(frozen=True)
class ProposalConfig:
    """Spherical (or per-coordinate) Gaussian random-walk width."""

    sigma: Any = 0.5

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim > 1 or not np.all(sigma > 0.0):
            raise ValueError("sigma must be a positive scalar or 1-d vector")
        object.__setattr__(self, "sigma", sigma if sigma.ndim else float(sigma))


@dataclass(frozen=True)
class AdaptationConfig:
    """Burn-in step-size tuning toward an acceptance band.

    Every ``window`` iterations the windowed acceptance rate is
    compared to [target_low, target_high]; the proposal width scales
    down below the band, up above it, and freezes for good after
    ``adapt_iters`` iterations.
    """

    adapt_iters: int
    target_low: float = 0.15
    target_high: float = 0.3
    scale_up: float = 1.1
    scale_down: float = 0.9
    window: int = 100

    def __post_init__(self):
        if not (0.0 < self.target_low < self.target_high < 1.0):
            raise ValueError("need 0 < target_low < target_high < 1")
        if not (self.scale_up > 1.0 > self.scale_down > 0.0):
            raise ValueError("need scale_up > 1 > scale_down > 0")
        if self.adapt_iters < 0:
            raise ValueError("adapt_iters must be >= 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")


def _safe_eval(estimator, theta, db):
    value = float(estimator.evaluate(theta, db))
    return _NEG_INF if math.isnan(value) else value


def _accept(rng, log_ratio):
    # accept iff log(U) <= log_ratio; ties accept, U == 0 accepts a
    # finite ratio (measure-zero, and log would overflow)
    if log_ratio >= 0.0:
        return True
    if log_ratio == _NEG_INF:
        return False
    u = rng.random()
    return u <= 0.0 or math.log(u) <= log_ratio


def pm_mh_step(state, estimator, prop, rng):
    """Joint update: fresh theta proposal and fresh randomness together.

    The symmetric Gaussian proposal cancels in the ratio, so the
    decision compares the fresh estimate against the cached one.  On
    rejection both survive untouched, which is exactly what makes
    over-estimated states sticky.
    """
    theta_p = state.theta + prop.sigma * rng.standard_normal(state.theta.size)
    db_p = state.db.resample()
    lf_p = _safe_eval(estimator, theta_p, db_p)
    if _accept(rng, lf_p - state.log_f_hat):
        return ChainState(theta_p, db_p, lf_p), StepInfo(True, True, 1)
    return state, StepInfo(False, False, 1)


def mi_u_step(state, estimator, rng):
    """Refresh the stored randomness at fixed theta.

    A zero-width theta proposal: accept the fresh db on the plain
    estimate ratio.  Leaves the randomness conditional invariant.
    """
    db_p = state.db.resample()
    lf_p = _safe_eval(estimator, state.theta, db_p)
    if _accept(rng, lf_p - state.log_f_hat):
        return ChainState(state.theta, db_p, lf_p), StepInfo(True, None, 1)
    return state, StepInfo(False, None, 1)


def ss_u_step(state, estimator, cfg, rng):
    """Slice-sample the stored randomness at fixed theta.

    Dispatches on the estimator's base space: reflective moves for
    uniform randomness, elliptical moves for Gaussian randomness.
    """
    def target(db):
        return _safe_eval(estimator, state.theta, db)

    if estimator.base_space is BaseSpace.UNIT_UNIFORM:
        out = slice_reflective_db(
            target, state.db, cfg, rng, log_f_db=state.log_f_hat
        )
    else:
        out = slice_elliptical_db(
            target, state.db, rng, max_shrink=cfg.max_shrink,
            log_f_db=state.log_f_hat,
        )
    if out.new_db is state.db:
        return state, StepInfo(False, None, out.n_evals)
    new_state = ChainState(state.theta, out.new_db, out.log_f)
    return new_state, StepInfo(out.moved, None, out.n_evals)


def mh_theta_step(state, estimator, prop, rng):
    """Random-walk update of theta with the randomness clamped.

    Every proposal is scored against the same stored noise, so this is
    plain MH on the deterministic surface theta -> f_hat(theta; u).
    The db is untouched either way.
    """
    theta_p = state.theta + prop.sigma * rng.standard_normal(state.theta.size)
    lf_p = _safe_eval(estimator, theta_p, state.db)
    if _accept(rng, lf_p - state.log_f_hat):
        return ChainState(theta_p, state.db, lf_p), StepInfo(None, True, 1)
    return state, StepInfo(None, False, 1)


def ss_theta_step(state, estimator, cfg, rng, mode="coordinate"):
    """Slice-sample theta on the clamped surface.

    mode "coordinate" runs one slice update per coordinate in order;
    mode "random" slices along a single normalized random direction.
    """
    if mode not in ("coordinate", "random"):
        raise ValueError(f"unknown slice mode {mode!r}")
    theta = np.array(state.theta)
    log_f = state.log_f_hat
    n_evals = 0
    moved_any = False
    if mode == "coordinate":
        for i in range(theta.size):
            def coord_target(v, i=i):
                t = theta.copy()
                t[i] = v
                return _safe_eval(estimator, t, state.db)

            out = slice_linear(
                coord_target, theta[i], cfg, rng, log_f_x0=log_f
            )
            theta[i] = out.new_point
            log_f = out.log_f
            n_evals += out.n_evals
            moved_any = moved_any or out.moved
    else:
        direction = rng.standard_normal(theta.size)
        direction /= float(np.linalg.norm(direction))

        def line_target(t):
            return _safe_eval(estimator, theta + t * direction, state.db)

        out = slice_linear(line_target, 0.0, cfg, rng, log_f_x0=log_f)
        if out.moved:
            theta = theta + out.new_point * direction
            log_f = out.log_f
        n_evals = out.n_evals
        moved_any = out.moved
    if not moved_any:
        return state, StepInfo(None, False, n_evals)
    return ChainState(theta, state.db, log_f), StepInfo(None, True, n_evals)


def noisy_slice_step(state, estimator, cfg, rng, mode="coordinate"):
    """Slice sampling where every proposal draws fresh randomness.

    The state is the pair (theta, estimate): the height is cut under
    the stored estimate, each proposal is scored with a brand-new db,
    and an accepted proposal carries its db into the state.  When the
    stored estimate sits far above typical fresh ones the bracket
    shrinks all the way down without moving; the stored pair is then
    redrawn in place (fresh estimates at the current theta until one
    clears a fresh height), so a single over-estimate cannot pin the
    chain, at the price of yet more evaluations.  Both loops stop
    after max_shrink evaluations.
    """
    if mode not in ("coordinate", "random"):
        raise ValueError(f"unknown slice mode {mode!r}")
    theta = np.array(state.theta)
    log_f = state.log_f_hat
    db = state.db
    n_evals = 0
    changed = False

    def refresh_pair():
        nonlocal log_f, db, n_evals, changed
        log_h = log_f + _log_unit(rng)
        for _ in range(cfg.max_shrink):
            db_fresh = db.resample()
            lf = _safe_eval(estimator, theta, db_fresh)
            n_evals += 1
            if lf > log_h:
                log_f = lf
                db = db_fresh
                changed = True
                return

    def run_line(x0, make_theta):
        nonlocal theta, log_f, db, n_evals, changed

        def target(v):
            db_fresh = db.resample()
            return _safe_eval(estimator, make_theta(v), db_fresh), db_fresh

        x, lf, payload, n, _, _ = _slice_scalar(
            target, float(x0), log_f, cfg, rng
        )
        n_evals += n
        if payload is not None:
            theta = make_theta(x)
            log_f = lf
            db = payload
            changed = True
        else:
            refresh_pair()

    if mode == "coordinate":
        for i in range(theta.size):
            def make_theta(v, i=i):
                t = theta.copy()
                t[i] = v
                return t

            run_line(theta[i], make_theta)
    else:
        direction = rng.standard_normal(theta.size)
        direction /= float(np.linalg.norm(direction))
        base = theta

        def make_theta(t):
            return base + t * direction

        run_line(0.0, make_theta)
    if not changed:
        return state, StepInfo(False, False, n_evals)
    return ChainState(theta, db, log_f), StepInfo(changed, changed, n_evals)


@dataclass(frozen=True)
class Kernel:
    """A named transition kernel with a uniform call signature.

    ``step(state, estimator, rng, prop)`` ignores ``prop`` when the
    kernel has no random-walk stage.  ``surrogate_step`` is the
    frozen-randomness stand-in used during the adaptive phase (only
    the joint kernel needs one: its honest acceptance rate is wrecked
    by noise, so tuning runs against the clamped surface instead).
    """

    name: str
    step: Callable
    uses_proposal: bool
    surrogate_step: Optional[Callable] = None


def build_kernel(
    name,
    u_slice=None,
    theta_slice=None,
    theta_slice_mode="coordinate",
):
    """Construct one of the named kernels.

    The name grammar is "pm-mh", "noisy-ss", or "apm-U+T" with U in
    {mi, ss} and T in {mh, ss}: the u-update is named first, then the
    theta-update.
    """
    u_slice = u_slice if u_slice is not None else SliceConfig()
    theta_slice = theta_slice if theta_slice is not None else SliceConfig()
    if theta_slice_mode not in ("coordinate", "random"):
        raise ValueError(f"unknown slice mode {theta_slice_mode!r}")

    if name == "pm-mh":
        def step(state, estimator, rng, prop):
            return pm_mh_step(state, estimator, prop, rng)

        def surrogate(state, estimator, rng, prop):
            return mh_theta_step(state, estimator, prop, rng)

        return Kernel(name, step, True, surrogate)

    if name == "noisy-ss":
        def step(state, estimator, rng, prop):
            return noisy_slice_step(
                state, estimator, theta_slice, rng, mode=theta_slice_mode
            )

        return Kernel(name, step, False)

    parts = name.split("+")
    if (
        len(parts) == 2
        and parts[0] in ("apm-mi", "apm-ss")
        and parts[1] in ("mh", "ss")
    ):
        u_name, theta_name = parts[0][4:], parts[1]

        def u_stage(state, estimator, rng, prop):
            if u_name == "mi":
                return mi_u_step(state, estimator, rng)
            return ss_u_step(state, estimator, u_slice, rng)

        def theta_stage(state, estimator, rng, prop):
            if theta_name == "mh":
                return mh_theta_step(state, estimator, prop, rng)
            return ss_theta_step(
                state, estimator, theta_slice, rng, mode=theta_slice_mode
            )

        def step(state, estimator, rng, prop):
            mid, info_u = u_stage(state, estimator, rng, prop)
            out, info_t = theta_stage(mid, estimator, rng, prop)
            return out, StepInfo(
                info_u.accepted_u,
                info_t.accepted_theta,
                info_u.n_evals + info_t.n_evals,
            )

        return Kernel(name, step, theta_name == "mh")

    raise ValueError(
        f"kernel name {name!r} does not match "
        "\"pm-mh | noisy-ss | apm-(mi|ss)+(mh|ss)\""
    )


def adapt_step_size(history, prop, cfg):
    """One tuning decision from a window of acceptance flags."""
    history = list(history)
    if not history:
        return prop
    rate = sum(map(bool, history)) / len(history)
    if rate < cfg.target_low:
        return replace(prop, sigma=prop.sigma * cfg.scale_down)
    if rate > cfg.target_high:
        return replace(prop, sigma=prop.sigma * cfg.scale_up)
    return prop


def init_chain_state(estimator, theta0, ctx, max_retries=100):
    """Build the initial state: fresh randomness, finite estimate.

    Resamples the db up to ``max_retries`` times if the estimate comes
    back -inf (a theta outside the support never recovers and ends in
    a ValueError).
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    db = RandomDb.fresh(ctx, estimator.base_space)
    for _ in range(max_retries):
        log_f = _safe_eval(estimator, theta0, db)
        if log_f > _NEG_INF:
            return ChainState(theta0, db, log_f)
        db = db.resample()
    raise ValueError(
        f"no finite estimate after {max_retries} fresh draws at theta={theta0!r}"
    )


@dataclass
class RunResult:
    records: list
    final_state: ChainState
    final_proposal: ProposalConfig


def run_chain(
    kernel,
    estimator,
    init,
    n_iters,
    rng,
    thin=1,
    burn_in=0,
    proposal=None,
    adaptation=None,
    recorder=None,
):
    """Drive a kernel for n_iters iterations, recording thinned states.

    Iterations are 1-based; iteration i is recorded when i > burn_in
    and (i - burn_in) is a multiple of thin.  ``recorder`` (a list, by
    default a fresh one) receives TraceRecords as they happen, so a
    crashed run leaves its partial trace behind in the caller's hands.

    When adaptation is configured the proposal width is tuned during
    the first adapt_iters iterations (which must lie inside burn_in)
    using the theta-stage acceptance flags; a kernel that declares a
    frozen-randomness surrogate runs it during that phase and the
    state gets one fresh redraw when the honest kernel resumes.
    """
    if isinstance(kernel, Kernel):
        kern = kernel
    else:
        kern = Kernel("custom", kernel, True)
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if thin < 1 or burn_in < 0 or burn_in >= n_iters + 1:
        raise ValueError("bad thin/burn_in")
    prop = proposal if proposal is not None else ProposalConfig()
    adapting = (
        adaptation is not None
        and adaptation.adapt_iters > 0
        and kern.uses_proposal
    )
    if adapting and adaptation.adapt_iters > burn_in:
        raise ValueError("adapt_iters must not exceed burn_in")
    records = recorder if recorder is not None else []
    state = init
    cum_evals = 0
    window = []
    use_surrogate = adapting and kern.surrogate_step is not None
    for i in range(1, n_iters + 1):
        in_adapt = adapting and i <= adaptation.adapt_iters
        if use_surrogate and i == adaptation.adapt_iters + 1:
            # adaptation ran on frozen randomness; redraw before the
            # honest kernel takes over
            db = state.db.resample()
            log_f = _safe_eval(estimator, state.theta, db)
            retries = 0
            while log_f == _NEG_INF and retries < 100:
                db = db.resample()
                log_f = _safe_eval(estimator, state.theta, db)
                retries += 1
            cum_evals += 1 + retries
            state = ChainState(state.theta, db, log_f)
        step_fn = (
            kern.surrogate_step if (use_surrogate and in_adapt) else kern.step
        )
        state, info = step_fn(state, estimator, rng, prop)
        cum_evals += info.n_evals
        if in_adapt:
            if info.accepted_theta is not None:
                window.append(info.accepted_theta)
            if len(window) >= adaptation.window:
                prop = adapt_step_size(window, prop, adaptation)
                window.clear()
        if i > burn_in and (i - burn_in) % thin == 0:
            records.append(
                TraceRecord(
                    iter=i,
                    theta=np.array(state.theta),
                    log_f_hat=state.log_f_hat,
                    accepted_u=info.accepted_u,
                    accepted_theta=info.accepted_theta,
                    n_estimator_evals=cum_evals,
                )
            )
    return RunResult(records, state, prop)


def records_to_arrays(records):
    """Stack a record list into plain arrays for analysis and CSV."""
    n = len(records)
    if n == 0:
        return {
            "iter": np.zeros(0, dtype=np.int64),
            "theta": np.zeros((0, 0)),
            "log_f_hat": np.zeros(0),
            "accepted_u": np.zeros(0, dtype=bool),
            "accepted_theta": np.zeros(0, dtype=bool),
            "n_estimator_evals": np.zeros(0, dtype=np.int64),
        }
    return {
        "iter": np.array([r.iter for r in records], dtype=np.int64),
        "theta": np.stack([r.theta for r in records]),
        "log_f_hat": np.array([r.log_f_hat for r in records]),
        "accepted_u": np.array(
            [bool(r.accepted_u) for r in records], dtype=bool
        ),
        "accepted_theta": np.array(
            [bool(r.accepted_theta) for r in records], dtype=bool
        ),
        "n_estimator_evals": np.array(
            [r.n_estimator_evals for r in records], dtype=np.int64
        ),
    }
