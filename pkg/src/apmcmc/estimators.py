"""Unbiased density estimators driven by a keyed random db.

Every estimator here exposes the same two-piece surface: a
``base_space`` saying which base distribution its randomness comes
from, and ``evaluate(theta, db)`` returning an unbiased log density
estimate.  The crucial contract is that evaluate is a pure function of
(theta, db): all randomness is read from the db under fixed keys, so
replaying the same db gives the same float back bit for bit.  That is
what lets the samplers clamp, perturb, or resample the noise as a
first-class state variable instead of burying it in an RNG stream.

A point outside the prior support evaluates to -inf rather than
raising; kernels treat that as certain rejection.
"""

import math
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr, logsumexp

from apmcmc.models.gp_probit import (
    CovarianceError,
    GpProbitModel,
    gp_covariance,
    gp_laplace_fit,
)
from apmcmc.models.ising import (
    IsingSpec,
    cftp_exact_sample,
    gibbs_sweep,
    lattice_stats,
)
from apmcmc.random_db import BaseSpace

LOG_2PI = math.log(2.0 * math.pi)


@runtime_checkable
class LogEstimator(Protocol):
    base_space: BaseSpace

    def evaluate(self, theta, db) -> float: ...


class CountingEstimator:
    """Wrapper that counts density evaluations, for cost accounting."""

    def __init__(self, inner):
        self.inner = inner
        self.n_evals = 0

    @property
    def base_space(self):
        return self.inner.base_space

    def evaluate(self, theta, db):
        self.n_evals += 1
        return self.inner.evaluate(theta, db)


class ToyGaussianEstimator:
    """Noisy estimate of a standard normal density over theta.

    The db supplies u ~ N(0, I); the estimate uses x = u + theta and
    only ever looks at the db through that sum, so shifting theta and
    counter-shifting u leaves the value untouched.  Averaged over u the
    estimate is exactly the N(0, I) density at theta, and at theta = 0
    the noise vanishes identically.
    """

    base_space = BaseSpace.STANDARD_NORMAL

    def __init__(self, dim=5):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim

    def evaluate(self, theta, db):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have shape ({self.dim},)")
        x = db.block((), self.dim) + theta
        resid = x - theta
        log_prior_at_zero = -0.5 * self.dim * LOG_2PI - 0.5 * float(theta @ theta)
        # grouped so the two quadratics cancel exactly when theta == 0
        return log_prior_at_zero + 0.5 * (float(resid @ resid) - float(x @ x))


def _ratio_term(d_j, d_h, s_j, s_h):
    # shared by the one-shot and bridged Ising estimators so the
    # zero-bridge case reproduces the one-shot value bit for bit
    return d_j * s_j + d_h * s_h


class DiIsEstimator:
    """Importance-sampled posterior estimate for the Ising coupling.

    The partition function ratio Z(ref) / Z(theta) is estimated with a
    single exact lattice draw at theta taken from the db, reweighted to
    the fixed reference parameters.  Multiplying by the data likelihood
    and the flat box prior gives an unbiased estimate of the
    unnormalised posterior at theta.
    """

    base_space = BaseSpace.UNIT_UNIFORM

    def __init__(self, spec: IsingSpec, theta_ref, key_base=(), max_depth=1 << 20):
        self.spec = spec
        self.ref_j = float(theta_ref[0])
        self.ref_h = float(theta_ref[1])
        self.key_base = tuple(key_base)
        self.max_depth = max_depth
        self._y_j, self._y_h = lattice_stats(spec.y)

    def evaluate(self, theta, db):
        t_j, t_h = float(theta[0]), float(theta[1])
        if not self.spec.in_prior_box(t_j, t_h):
            return -math.inf
        x = cftp_exact_sample(
            self.spec.width,
            self.spec.height,
            t_j,
            t_h,
            db,
            key_base=self.key_base,
            max_depth=self.max_depth,
        )
        s_j, s_h = lattice_stats(x)
        data_term = t_j * self._y_j + t_h * self._y_h
        return data_term + _ratio_term(self.ref_j - t_j, self.ref_h - t_h, s_j, s_h)


class AisEstimator:
    """Bridged version of the Ising posterior estimate.

    The exact draw at theta is pushed toward the reference parameters
    through ``n_bridges`` intermediate heat-bath sweeps on a linear
    parameter path, accumulating the annealed importance weight as it
    goes.  More bridges cost more sweeps but shrink the weight
    variance when theta sits far from the reference.  With zero
    bridges this is exactly the one-shot estimator.

    Key layout: the exact draw consumes keys under (1,) and bridge
    sweep k consumes the block (0, k), so the two stages never collide.
    """

    base_space = BaseSpace.UNIT_UNIFORM

    def __init__(self, spec: IsingSpec, theta_ref, n_bridges, max_depth=1 << 20):
        if n_bridges < 0:
            raise ValueError("n_bridges must be >= 0")
        self.spec = spec
        self.ref_j = float(theta_ref[0])
        self.ref_h = float(theta_ref[1])
        self.n_bridges = int(n_bridges)
        self.max_depth = max_depth
        self._y_j, self._y_h = lattice_stats(spec.y)

    def evaluate(self, theta, db):
        t_j, t_h = float(theta[0]), float(theta[1])
        if not self.spec.in_prior_box(t_j, t_h):
            return -math.inf
        w, h = self.spec.width, self.spec.height
        x = np.array(
            cftp_exact_sample(
                w, h, t_j, t_h, db, key_base=(1,), max_depth=self.max_depth
            )
        )
        steps = self.n_bridges + 1
        d_j = (self.ref_j - t_j) / steps
        d_h = (self.ref_h - t_h) / steps
        log_weight = 0.0
        for k in range(1, steps):
            s_j, s_h = lattice_stats(x)
            log_weight += _ratio_term(d_j, d_h, s_j, s_h)
            frac = k / steps
            bridge_j = t_j + frac * (self.ref_j - t_j)
            bridge_h = t_h + frac * (self.ref_h - t_h)
            gibbs_sweep(x, db.block((0, k), w * h), bridge_j, bridge_h)
        s_j, s_h = lattice_stats(x)
        log_weight += _ratio_term(d_j, d_h, s_j, s_h)
        return t_j * self._y_j + t_h * self._y_h + log_weight


class GpIsEstimator:
    """Importance-sampled marginal likelihood for the gp classifier.

    theta = (sigma, tau) are the covariance variance and lengthscale.
    The latent integral is estimated with ``n_importance`` draws from
    the gaussian fit at the posterior mode; the fit itself is
    deterministic in theta and cached, so repeat evaluations at the
    same hyperparameters (the common case inside a chain) skip the
    Newton iteration.  The db supplies the standard normal seeds of
    the importance draws in one fixed-size block, which keeps the
    evaluation footprint identical across theta.
    """

    base_space = BaseSpace.STANDARD_NORMAL

    def __init__(self, model: GpProbitModel, n_importance=64, cache_size=8):
        if n_importance < 1:
            raise ValueError("n_importance must be >= 1")
        self.model = model
        self.n_importance = int(n_importance)
        self.cache_size = cache_size
        self._fits = {}

    def _log_prior(self, sigma, tau):
        shape, rate = self.model.prior_shape, self.model.prior_rate
        const = shape * math.log(rate) - math.lgamma(shape)
        lp = 0.0
        for v in (sigma, tau):
            lp += const + (shape - 1.0) * math.log(v) - rate * v
        return lp

    def _fit(self, sigma, tau):
        key = (sigma, tau)
        fit = self._fits.get(key)
        if fit is None:
            k = gp_covariance(self.model.x, sigma, tau, self.model.jitter)
            try:
                fit = gp_laplace_fit(k, self.model.y)
            except np.linalg.LinAlgError:
                raise CovarianceError(sigma, tau) from None
            if len(self._fits) >= self.cache_size:
                self._fits.pop(next(iter(self._fits)))
            self._fits[key] = fit
        return fit

    def evaluate(self, theta, db):
        sigma, tau = float(theta[0]), float(theta[1])
        if sigma <= 0.0 or tau <= 0.0:
            return -math.inf
        fit = self._fit(sigma, tau)
        n = self.model.n_points
        z = db.block((), self.n_importance * n).reshape(self.n_importance, n)
        f = fit.mode + z @ fit.chol_s.T
        loglik = log_ndtr(self.model.y * f).sum(axis=1)
        white = solve_triangular(fit.chol_k, f.T, lower=True)
        log_prior_f = (
            -0.5 * np.sum(white * white, axis=0)
            - 0.5 * fit.log_det_k
            - 0.5 * n * LOG_2PI
        )
        log_q = (
            -0.5 * np.sum(z * z, axis=1) - 0.5 * fit.log_det_s - 0.5 * n * LOG_2PI
        )
        log_mean = float(logsumexp(loglik + log_prior_f - log_q)) - math.log(
            self.n_importance
        )
        return log_mean + self._log_prior(sigma, tau)
