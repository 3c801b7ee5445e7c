"""Estimator contract checks: unbiasedness, purity, exact reductions."""

import math

import numpy as np
import pytest
from scipy.linalg import cholesky
from scipy.special import ndtr
from scipy.stats import gamma as gamma_dist

import apmcmc.estimators as est_mod
from apmcmc.estimators import (
    AisEstimator,
    CountingEstimator,
    CovarianceError,
    DiIsEstimator,
    GpIsEstimator,
    ToyGaussianEstimator,
)
from apmcmc.models.gp_probit import GpProbitModel, gp_covariance
from apmcmc.models.ising import (
    IsingSpec,
    ising_enumerate_logZ,
    lattice_stats,
)
from apmcmc.random_db import BaseSpace, RandomDb, SeedContext


def fresh(seed, space):
    return RandomDb.fresh(SeedContext(seed), space)


def mean_within_3se(values, target):
    values = np.asarray(values)
    se = values.std(ddof=1) / math.sqrt(values.size)
    err = abs(values.mean() - target)
    assert err < 3.0 * se, f"mean off by {err:.4g}, 3se={3 * se:.4g}"


SPEC_3X3 = IsingSpec(3, 3, np.array(
    [[1, -1, 1], [1, 1, -1], [-1, 1, 1]], dtype=np.int8
))


class TestToyGaussian:
    def test_zero_theta_is_exact_for_every_db(self):
        estimator = ToyGaussianEstimator()
        want = -2.5 * math.log(2.0 * math.pi)
        theta = np.zeros(5)
        for seed in range(50):
            db = fresh(seed, BaseSpace.STANDARD_NORMAL)
            assert estimator.evaluate(theta, db) == want

    def test_unbiased_at_fixed_theta(self):
        estimator = ToyGaussianEstimator()
        theta = np.array([0.4, -0.3, 0.2, 0.0, 0.6])
        target = math.exp(
            -2.5 * math.log(2 * math.pi) - 0.5 * float(theta @ theta)
        )
        db = fresh(1234, BaseSpace.STANDARD_NORMAL)
        values = np.empty(100_000)
        for i in range(values.size):
            values[i] = math.exp(estimator.evaluate(theta, db))
            db = db.resample()
        mean_within_3se(values, target)

    def test_noise_enters_only_through_the_shifted_sum(self):
        # strip the explicit theta terms from the estimate and what
        # remains must be a function of x = u + theta alone, so two
        # (theta, u) pairs with equal sums must agree on it
        estimator = ToyGaussianEstimator()
        theta_a = np.array([0.5, -0.2, 0.1, 0.9, -0.4])
        delta = np.array([0.3, 0.3, -0.7, 0.0, 1.1])
        theta_b = theta_a - delta
        db_a = fresh(9, BaseSpace.STANDARD_NORMAL)
        u_a = db_a.block((), 5)
        x = u_a + theta_a
        db_b = RandomDb.fresh(SeedContext(10), BaseSpace.STANDARD_NORMAL)
        db_b.set_block((), u_a + delta)

        def sum_part(theta, db):
            lp0 = -2.5 * math.log(2 * math.pi) - 0.5 * float(theta @ theta)
            resid = x - theta
            log_n_x_theta = -2.5 * math.log(2 * math.pi) - 0.5 * float(
                resid @ resid
            )
            return estimator.evaluate(theta, db) - lp0 + log_n_x_theta

        a = sum_part(theta_a, db_a)
        b = sum_part(theta_b, db_b)
        assert a == pytest.approx(b, abs=1e-10)
        log_n_x = -2.5 * math.log(2 * math.pi) - 0.5 * float(x @ x)
        assert a == pytest.approx(log_n_x, abs=1e-10)

    def test_matches_explicit_formula(self):
        estimator = ToyGaussianEstimator()
        theta = np.array([1.0, 0.5, -0.5, 0.25, 2.0])
        db = fresh(77, BaseSpace.STANDARD_NORMAL)
        u = db.block((), 5)
        want = (
            -2.5 * math.log(2 * math.pi)
            - float(theta @ theta)
            - float(theta @ u)
        )
        assert estimator.evaluate(theta, db) == pytest.approx(want, abs=1e-12)

    def test_dim_validation(self):
        estimator = ToyGaussianEstimator(dim=3)
        db = fresh(0, BaseSpace.STANDARD_NORMAL)
        with pytest.raises(ValueError, match="shape"):
            estimator.evaluate(np.zeros(5), db)


class TestDiIs:
    def test_outside_prior_box(self):
        estimator = DiIsEstimator(SPEC_3X3, (0.3, 0.1))
        db = fresh(1, BaseSpace.UNIT_UNIFORM)
        for theta in [(-0.01, 0.0), (0.41, 0.0), (0.2, -1.2), (0.2, 1.01)]:
            assert estimator.evaluate(np.array(theta), db) == -math.inf

    def test_replay_and_footprint_stability(self):
        estimator = DiIsEstimator(SPEC_3X3, (0.3, 0.1))
        db = fresh(2, BaseSpace.UNIT_UNIFORM)
        theta = np.array([0.25, -0.05])
        v1 = estimator.evaluate(theta, db)
        footprint = db.materialized()
        v2 = estimator.evaluate(theta, db)
        assert v1 == v2
        assert db.materialized() == footprint

    def test_unbiased_partition_ratio(self):
        theta = np.array([0.2, -0.1])
        ref = (0.3, 0.1)
        estimator = DiIsEstimator(SPEC_3X3, ref)
        target = math.exp(
            ising_enumerate_logZ(3, 3, *ref)
            - ising_enumerate_logZ(3, 3, *theta)
        )
        y_j, y_h = lattice_stats(SPEC_3X3.y)
        data_term = theta[0] * y_j + theta[1] * y_h
        db = fresh(31, BaseSpace.UNIT_UNIFORM)
        values = np.empty(20_000)
        for i in range(values.size):
            values[i] = math.exp(estimator.evaluate(theta, db) - data_term)
            db = db.resample()
        mean_within_3se(values, target)


class TestAis:
    def test_at_reference_weight_is_exactly_zero(self):
        estimator = AisEstimator(SPEC_3X3, (0.3, 0.1), n_bridges=4)
        y_j, y_h = lattice_stats(SPEC_3X3.y)
        db = fresh(5, BaseSpace.UNIT_UNIFORM)
        got = estimator.evaluate(np.array([0.3, 0.1]), db)
        assert got == 0.3 * y_j + 0.1 * y_h

    def test_zero_bridges_reproduces_one_shot_bitwise(self):
        ref = (0.3, 0.1)
        bridged = AisEstimator(SPEC_3X3, ref, n_bridges=0)
        one_shot = DiIsEstimator(SPEC_3X3, ref, key_base=(1,))
        theta = np.array([0.15, -0.2])
        db = fresh(6, BaseSpace.UNIT_UNIFORM)
        for _ in range(30):
            assert bridged.evaluate(theta, db) == one_shot.evaluate(theta, db)
            db = db.resample()

    def test_unbiased_partition_ratio_with_bridges(self):
        theta = np.array([0.1, -0.3])
        ref = (0.3, 0.1)
        estimator = AisEstimator(SPEC_3X3, ref, n_bridges=8)
        target = math.exp(
            ising_enumerate_logZ(3, 3, *ref)
            - ising_enumerate_logZ(3, 3, *theta)
        )
        y_j, y_h = lattice_stats(SPEC_3X3.y)
        data_term = theta[0] * y_j + theta[1] * y_h
        db = fresh(32, BaseSpace.UNIT_UNIFORM)
        values = np.empty(20_000)
        for i in range(values.size):
            values[i] = math.exp(estimator.evaluate(theta, db) - data_term)
            db = db.resample()
        mean_within_3se(values, target)

    def test_bridges_cut_weight_variance_far_from_reference(self):
        # the zero-bridge weight variance is exactly enumerable:
        # E[W^2] = Z(2 ref - theta) / Z(theta).  Far from the reference
        # it is astronomically heavy-tailed (no empirical estimate from
        # a feasible sample count gets near it), so compare the bridged
        # empirical variance against the exact value
        theta = np.array([0.05, -0.6])
        ref = (0.35, 0.3)
        z_theta = ising_enumerate_logZ(3, 3, *theta)
        mean_w = math.exp(ising_enumerate_logZ(3, 3, *ref) - z_theta)
        second_moment = math.exp(
            ising_enumerate_logZ(3, 3, 2 * ref[0] - theta[0], 2 * ref[1] - theta[1])
            - z_theta
        )
        var_0_exact = second_moment - mean_w**2
        y_j, y_h = lattice_stats(SPEC_3X3.y)
        data_term = theta[0] * y_j + theta[1] * y_h
        estimator = AisEstimator(SPEC_3X3, ref, n_bridges=8)
        db = fresh(33, BaseSpace.UNIT_UNIFORM)
        vals = np.empty(4000)
        for i in range(vals.size):
            vals[i] = math.exp(estimator.evaluate(theta, db) - data_term)
            db = db.resample()
        assert vals.var(ddof=1) < var_0_exact / 100.0

    def test_rejects_negative_bridges(self):
        with pytest.raises(ValueError, match=">= 0"):
            AisEstimator(SPEC_3X3, (0.3, 0.1), n_bridges=-1)


def two_point_model():
    x = np.array([[0.0], [0.7]])
    y = np.array([1, -1], dtype=np.int8)
    return GpProbitModel(x, y)


def gauss_hermite_marginal(model, sigma, tau, n_nodes=80):
    # exact-to-quadrature P(y | sigma, tau) for one or two points
    k = gp_covariance(model.x, sigma, tau, model.jitter)
    chol = cholesky(k, lower=True)
    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    n = model.n_points
    if n == 1:
        f = chol[0, 0] * math.sqrt(2.0) * nodes
        vals = ndtr(model.y[0] * f)
        return float(weights @ vals) / math.sqrt(math.pi)
    total = 0.0
    for i in range(n_nodes):
        z = np.empty(2)
        z[0] = math.sqrt(2.0) * nodes[i]
        f0 = chol[0, 0] * z[0]
        zs = math.sqrt(2.0) * nodes
        f1 = chol[1, 0] * z[0] + chol[1, 1] * zs
        vals = ndtr(model.y[0] * f0) * ndtr(model.y[1] * f1)
        total += weights[i] * float(weights @ vals)
    return total / math.pi


class TestGpIs:
    def test_prior_matches_scipy(self):
        model = two_point_model()
        estimator = GpIsEstimator(model, n_importance=4)
        for sigma, tau in [(1.0, 0.5), (3.3, 2.0), (0.2, 0.05)]:
            want = gamma_dist.logpdf(sigma, a=1.0, scale=10.0) + gamma_dist.logpdf(
                tau, a=1.0, scale=10.0
            )
            assert estimator._log_prior(sigma, tau) == pytest.approx(
                want, abs=1e-12
            )

    def test_outside_support(self):
        estimator = GpIsEstimator(two_point_model(), n_importance=2)
        db = fresh(3, BaseSpace.STANDARD_NORMAL)
        assert estimator.evaluate(np.array([0.0, 1.0]), db) == -math.inf
        assert estimator.evaluate(np.array([1.0, -0.5]), db) == -math.inf

    def test_single_point_marginal_is_half(self):
        # P(y) = integral Phi(f) N(f; 0, k) df = 1/2 by symmetry
        model = GpProbitModel(np.array([[0.3]]), np.array([1], dtype=np.int8))
        estimator = GpIsEstimator(model, n_importance=4)
        theta = np.array([1.3, 0.7])
        lp = estimator._log_prior(*theta)
        db = fresh(41, BaseSpace.STANDARD_NORMAL)
        values = np.empty(10_000)
        for i in range(values.size):
            values[i] = math.exp(estimator.evaluate(theta, db) - lp)
            db = db.resample()
        mean_within_3se(values, 0.5)

    def test_two_point_marginal_matches_quadrature(self):
        model = two_point_model()
        estimator = GpIsEstimator(model, n_importance=8)
        theta = np.array([1.5, 0.6])
        target = gauss_hermite_marginal(model, *theta)
        lp = estimator._log_prior(*theta)
        db = fresh(42, BaseSpace.STANDARD_NORMAL)
        values = np.empty(20_000)
        for i in range(values.size):
            values[i] = math.exp(estimator.evaluate(theta, db) - lp)
            db = db.resample()
        mean_within_3se(values, target)

    def test_replay_and_fixed_footprint(self):
        model = two_point_model()
        estimator = GpIsEstimator(model, n_importance=8)
        db = fresh(43, BaseSpace.STANDARD_NORMAL)
        theta = np.array([2.0, 0.4])
        v1 = estimator.evaluate(theta, db)
        assert db.materialized() == {(): 16}
        v2 = estimator.evaluate(theta, db)
        assert v1 == v2
        assert db.materialized() == {(): 16}
        # a different theta reads the same keys
        estimator.evaluate(np.array([0.9, 1.1]), db)
        assert db.materialized() == {(): 16}

    def test_laplace_fit_is_cached(self, monkeypatch):
        calls = {"n": 0}
        real = est_mod.gp_laplace_fit

        def counting(*args, **kwargs):
            calls["n"] += 1
            return real(*args, **kwargs)

        monkeypatch.setattr(est_mod, "gp_laplace_fit", counting)
        estimator = GpIsEstimator(two_point_model(), n_importance=4)
        theta = np.array([1.2, 0.8])
        db = fresh(44, BaseSpace.STANDARD_NORMAL)
        estimator.evaluate(theta, db)
        estimator.evaluate(theta, db.resample())
        estimator.evaluate(theta, db.resample())
        assert calls["n"] == 1
        estimator.evaluate(np.array([1.3, 0.8]), db)
        assert calls["n"] == 2

    def test_covariance_error_carries_theta(self):
        x = np.array([[0.5], [0.5]])
        y = np.array([1, -1], dtype=np.int8)
        model = GpProbitModel(x, y, jitter=0.0)
        estimator = GpIsEstimator(model, n_importance=2)
        db = fresh(45, BaseSpace.STANDARD_NORMAL)
        with pytest.raises(CovarianceError) as info:
            estimator.evaluate(np.array([1.0, 0.3]), db)
        assert info.value.sigma == 1.0
        assert info.value.tau == 0.3


class TestCounting:
    def test_counts_and_delegates(self):
        inner = ToyGaussianEstimator()
        counted = CountingEstimator(inner)
        assert counted.base_space is BaseSpace.STANDARD_NORMAL
        db = fresh(50, BaseSpace.STANDARD_NORMAL)
        theta = np.zeros(5)
        v = counted.evaluate(theta, db)
        assert v == inner.evaluate(theta, db)
        assert counted.n_evals == 1
        counted.evaluate(theta, db)
        assert counted.n_evals == 2
