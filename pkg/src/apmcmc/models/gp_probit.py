"""Gaussian process binary classifier with a probit link.

Latent function values f over the n training inputs get a zero-mean
gaussian prior with squared-exponential covariance

    K[a, b] = sigma * exp(-||x_a - x_b||^2 / (2 tau^2))

(sigma is the variance, not an amplitude) plus a small diagonal jitter
proportional to sigma.  Labels y in {-1, +1} couple to the latents
through P(y_i | f_i) = Phi(y_i f_i).  Both hyperparameters carry
Gamma(shape=1, rate=0.1) priors.

The marginal likelihood over f is intractable, so downstream code
estimates it by importance sampling from the gaussian fit at the
posterior mode (Newton iteration, at most 100 steps with step
halving).  This module holds the deterministic pieces: covariance
construction, the mode fit, synthetic data generation, and CSV
ingestion for external datasets.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import log_ndtr, ndtr

LOG_2PI = math.log(2.0 * math.pi)


class CovarianceError(RuntimeError):
    """Covariance matrix was not positive definite even after jitter."""

    def __init__(self, sigma, tau):
        self.sigma = sigma
        self.tau = tau
        super().__init__(
            f"covariance not positive definite at sigma={sigma!r}, tau={tau!r}"
        )


@dataclass(frozen=True)
class GpProbitModel:
    """Classification problem bundle: inputs, labels, prior settings."""

    x: np.ndarray
    y: np.ndarray
    prior_shape: float = 1.0
    prior_rate: float = 0.1
    jitter: float = 1e-8

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int8)
        if x.ndim != 2:
            raise ValueError("inputs must be a (n, d) array")
        if y.shape != (x.shape[0],):
            raise ValueError("need one label per input row")
        if not np.all(np.abs(y) == 1):
            raise ValueError("labels must be -1 or +1")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n_points(self):
        return self.x.shape[0]


def gp_covariance(x, sigma, tau, jitter=1e-8):
    """Squared-exponential covariance with diagonal jitter.

    ``sigma`` scales the whole matrix (it is the marginal variance) and
    the jitter scales with it so conditioning does not degrade as
    sigma grows.
    """
    x = np.asarray(x, dtype=np.float64)
    d2 = cdist(x, x, "sqeuclidean")
    k = sigma * np.exp(-0.5 * d2 / (tau * tau))
    k[np.diag_indices_from(k)] += jitter * sigma
    return k


@dataclass(frozen=True)
class LaplaceFit:
    """Gaussian fit at the latent posterior mode.

    ``chol_k`` and ``chol_s`` are lower-triangular factors of the prior
    covariance and of the fit covariance (K^-1 + W)^-1; the log
    determinants come along because every importance weight needs them.
    """

    mode: np.ndarray
    chol_k: np.ndarray
    chol_s: np.ndarray
    log_det_k: float
    log_det_s: float
    n_newton: int


def _probit_parts(y, f):
    # returns (log likelihood, gradient, newton weights), all stable for
    # z far into the left tail via the log-cdf ratio
    z = y * f
    lcdf = log_ndtr(z)
    r = np.exp(-0.5 * z * z - 0.5 * LOG_2PI - lcdf)
    return float(lcdf.sum()), y * r, r * (z + r)


def gp_laplace_fit(k, y, max_iter=100, tol=1e-9):
    """Find the latent posterior mode by damped Newton iteration.

    The objective log P(y | f) - f' K^-1 f / 2 is concave, so full
    Newton steps are halved until the objective does not decrease.
    Raises np.linalg.LinAlgError when K has no Cholesky factor and
    RuntimeError if the gradient has not levelled off within
    ``max_iter`` iterations.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    chol_k = cholesky(k, lower=True)
    f = np.zeros(n)
    alpha = np.zeros(n)
    loglik, grad_lik, w = _probit_parts(y, f)
    obj = loglik
    eye = np.eye(n)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = grad_lik - alpha
        if float(np.max(np.abs(grad))) < tol:
            converged = True
            break
        sw = np.sqrt(w)
        b = eye + sw[:, None] * k * sw[None, :]
        chol_b = cholesky(b, lower=True)
        kg = k @ grad
        v = cho_solve((chol_b, True), sw * kg)
        step = kg - k @ (sw * v)
        # halve until the concave objective stops decreasing
        t = 1.0
        while True:
            f_try = f + t * step
            alpha_try = cho_solve((chol_k, True), f_try)
            loglik_try, grad_lik_try, w_try = _probit_parts(y, f_try)
            obj_try = loglik_try - 0.5 * float(f_try @ alpha_try)
            if obj_try >= obj or t < 1e-10:
                break
            t *= 0.5
        if obj_try < obj:
            # no ascent direction left at float precision
            converged = float(np.max(np.abs(grad))) < 1e-6
            break
        gained = obj_try - obj
        f, alpha, obj = f_try, alpha_try, obj_try
        loglik, grad_lik, w = loglik_try, grad_lik_try, w_try
        if gained <= 1e-13 * (1.0 + abs(obj)):
            # objective is flat at float precision; the gradient test
            # above can stay out of reach when K is ill-conditioned
            converged = float(np.max(np.abs(grad_lik - alpha))) < 1e-6
            break
    else:
        converged = float(np.max(np.abs(grad_lik - alpha))) < 1e-6
    if not converged:
        raise RuntimeError(f"newton did not converge in {max_iter} iterations")

    _, _, w = _probit_parts(y, f)
    sw = np.sqrt(w)
    b = eye + sw[:, None] * k * sw[None, :]
    chol_b = cholesky(b, lower=True)
    v = solve_triangular(chol_b, sw[:, None] * k, lower=True)
    s = k - v.T @ v
    s = 0.5 * (s + s.T)
    try:
        chol_s = cholesky(s, lower=True)
    except Exception:
        s[np.diag_indices_from(s)] += 1e-12 * float(np.mean(np.diag(s)))
        chol_s = cholesky(s, lower=True)
    return LaplaceFit(
        mode=f,
        chol_k=chol_k,
        chol_s=chol_s,
        log_det_k=2.0 * float(np.sum(np.log(np.diag(chol_k)))),
        log_det_s=2.0 * float(np.sum(np.log(np.diag(chol_s)))),
        n_newton=it,
    )


def gp_synthetic_data(n_points, n_features, sigma, tau, seed):
    """Draw a classification dataset from the model itself.

    Inputs are uniform on [-1, 1]^d, latents come from the gp prior,
    labels flip probit coins at the latents.  Returns (x, y, f).
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n_points, n_features))
    k = gp_covariance(x, sigma, tau)
    f = cholesky(k, lower=True) @ rng.standard_normal(n_points)
    y = np.where(rng.random(n_points) < ndtr(f), 1, -1).astype(np.int8)
    return x, y, f


def load_csv_dataset(path):
    """Read (x, y) from a CSV whose last column holds the labels.

    A non-numeric first row is treated as a header.  Labels may be
    -1/+1 or 0/1; zeros are remapped to -1.  Everything else is an
    error.
    """
    rows = []
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                if line_no == 1:
                    continue  # header
                raise ValueError(
                    f"{path}: non-numeric value on line {line_no}"
                ) from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: inconsistent column counts {sorted(widths)}")
    if widths.pop() < 2:
        raise ValueError(f"{path}: need at least one feature column")
    data = np.asarray(rows, dtype=np.float64)
    x, labels = data[:, :-1], data[:, -1]
    if set(np.unique(labels)) <= {0.0, 1.0}:
        y = np.where(labels > 0.5, 1, -1).astype(np.int8)
    elif set(np.unique(labels)) <= {-1.0, 1.0}:
        y = labels.astype(np.int8)
    else:
        raise ValueError(f"{path}: labels must be -1/+1 or 0/1")
    return x, y
