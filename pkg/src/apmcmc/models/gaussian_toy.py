"""Closed forms for the shifted-gaussian demonstration target.

The target is a 5-d standard normal over theta estimated through a
deliberately noisy channel: a draw u ~ N(0, I) enters the log estimate
as

    log f_hat(theta; u) = -(d/2) log(2 pi) - theta.theta - theta.u

whose mean over u is exactly the N(0, I) density at theta.  Everything
about this construction is tractable, which is the point: the chain's
marginal, the conditional of theta given clamped randomness, the
conditional of u given theta, and the noise level are all available in
closed form below and serve as references for sampler checks.
"""

import math

import numpy as np

DIM = 5
LOG_2PI = math.log(2.0 * math.pi)


def exact_log_marginal(theta):
    """Log density of the true target, a standard normal."""
    theta = np.asarray(theta, dtype=np.float64)
    return -0.5 * theta.size * LOG_2PI - 0.5 * float(theta @ theta)


def clamped_conditional(u):
    """Mean and common variance of theta given clamped randomness u.

    With u held fixed the unnormalised density exp(-theta.theta -
    theta.u) is a product of independent gaussians N(-u/2, 1/2).
    """
    u = np.asarray(u, dtype=np.float64)
    return -0.5 * u, 0.5


def aux_conditional_mean(theta):
    """Mean of u given theta (each coordinate has unit variance)."""
    return -np.asarray(theta, dtype=np.float64)


def estimator_noise_sd(theta):
    """Standard deviation of log f_hat over fresh u at fixed theta."""
    theta = np.asarray(theta, dtype=np.float64)
    return float(np.sqrt(theta @ theta))
