"""Random-intercept marginal likelihood: quadrature oracles, derivatives and the optimizer."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from meanaic.criterion import ModelSpec, select
from meanaic.glm import ClusterData, Family, fit_cluster
from meanaic.marginal import (
    MarginalControl,
    fit_marginal,
    gauss_hermite_log_integral,
    maic_select,
    marginal_loglik,
    marginal_score,
)
from meanaic.simulation import Scenario, generate_dataset, lattice

POIS = Family.POISSON
BERN = Family.BERNOULLI
GAUS = Family.GAUSSIAN


def _sim(seed=0, K=20, n=80, beta1=0.2, s0=0.3, s1=0.005, replicate=0):
    s = Scenario(K=K, cluster_sizes=(n,), beta1=beta1, sigma0_sq=s0, sigma1_sq=s1, base_seed=seed, replicates=1)
    return generate_dataset(s, replicate)


def _bernoulli_data(rng, K=6, n=15):
    out = []
    for i in range(K):
        x = rng.normal(size=n)
        b = rng.normal(0, 0.7)
        y = rng.binomial(1, 1 / (1 + np.exp(-(-0.2 + b + 0.8 * x))))
        out.append(ClusterData(i, y, np.column_stack([np.ones(n), x])))
    return out


# --------------------------------------------------------------------- #
# quadrature oracles
# --------------------------------------------------------------------- #


class TestQuadratureOracles:
    def test_lognormal_moment_adaptive(self):
        s2 = 0.4
        lf = lambda b: b - 0.5 * b**2 / s2 - 0.5 * np.log(2 * np.pi * s2)
        assert gauss_hermite_log_integral(lf, s2, 1 / s2, 20) == pytest.approx(s2 / 2, abs=1e-10)

    @pytest.mark.parametrize("s2", [0.005, 0.3, 1.5])
    def test_lognormal_moment_centred_at_zero(self, s2):
        # not adapted to the mode; the rule is still exact to 1e-10 for exp(b)
        lf = lambda b: b - 0.5 * b**2 / s2 - 0.5 * np.log(2 * np.pi * s2)
        assert gauss_hermite_log_integral(lf, 0.0, 1 / s2, 20) == pytest.approx(s2 / 2, abs=1e-10)

    def test_zero_variance_is_pooled_glm(self):
        data = _sim(seed=1)
        model = ModelSpec((1, 2))
        beta = np.array([0.25, 0.2, -0.05])
        pooled = sum(float(np.sum(POIS.logpdf(c.y, c.X @ beta))) for c in data)
        assert marginal_loglik(data, model, beta, 0.0) == pytest.approx(pooled, abs=1e-10)

    @pytest.mark.parametrize("instance", range(20))
    def test_gaussian_matches_closed_form(self, instance):
        rng = np.random.default_rng(100 + instance)
        K = int(rng.integers(2, 6))
        data = []
        for i in range(K):
            n = int(rng.integers(2, 12))
            X = np.column_stack([np.ones(n), rng.normal(size=n)])
            data.append(ClusterData(i, X @ [1.0, 0.5] + rng.normal(0, 1.0, size=n) + rng.normal(0, 0.8), X))
        beta = rng.normal(size=2)
        s2, phi = rng.uniform(0.05, 2.0), rng.uniform(0.2, 2.0)
        closed = sum(
            stats.multivariate_normal(c.X @ beta, phi * np.eye(c.n) + s2 * np.ones((c.n, c.n))).logpdf(c.y) for c in data
        )
        got = marginal_loglik(data, ModelSpec((1,), GAUS), beta, s2, dispersion=phi)
        assert got == pytest.approx(closed, abs=1e-8)

    def test_bernoulli_matches_adaptive_integration(self):
        rng = np.random.default_rng(7)
        data = _bernoulli_data(rng)
        beta, s2 = np.array([-0.1, 0.7]), 0.5
        per = marginal_loglik(data, ModelSpec((1,), BERN), beta, s2, per_cluster=True)
        for c, value in zip(data, per):
            f = lambda b: math.exp(
                float(np.sum(BERN.logpdf(c.y, c.X @ beta + b))) + stats.norm.logpdf(b, 0, math.sqrt(s2))
            )
            ref, _ = integrate.quad(f, -12, 12, epsabs=0, epsrel=1e-12, limit=200)
            assert value == pytest.approx(math.log(ref), abs=1e-9)

    def test_node_count_converged(self):
        data = _sim(seed=2, n=80, s0=0.3)
        model = ModelSpec((1,))
        beta = np.array([0.3, 0.2])
        a = marginal_loglik(data, model, beta, 0.3, nodes=10, per_cluster=True)
        b = marginal_loglik(data, model, beta, 0.3, nodes=25, per_cluster=True)
        assert np.max(np.abs(a - b)) < 1e-6

    def test_fast_path_equals_generic(self):
        data = _sim(seed=3)
        model = ModelSpec((1, 2))
        fast = fit_marginal(data, model)
        slow = fit_marginal(data, model, MarginalControl(generic=True))
        assert fast.marginal_loglik == pytest.approx(slow.marginal_loglik, abs=1e-8)
        np.testing.assert_allclose(fast.beta_hat, slow.beta_hat, atol=1e-6)

    def test_argument_checks(self):
        data = _sim()
        with pytest.raises(ValueError):
            marginal_loglik(data, ModelSpec((1,)), [0.0, 0.0], -0.1)
        with pytest.raises(ValueError):
            marginal_loglik(data, ModelSpec((1,)), [0.0, 0.0], 0.1, nodes=0)
        with pytest.raises(ValueError):
            marginal_loglik(data, ModelSpec((1,)), [0.0], 0.1)


# --------------------------------------------------------------------- #
# derivatives
# --------------------------------------------------------------------- #


def _central_difference(data, model, theta, family, h=1e-5):
    def f(t):
        p = len(theta) - (2 if family is GAUS else 1)
        phi = math.exp(t[p + 1]) if family is GAUS else 1.0
        return marginal_loglik(data, model, t[:p], math.exp(t[p]), dispersion=phi)

    return np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(len(theta))])


class TestScore:
    @pytest.mark.parametrize("seed", range(4))
    def test_poisson_score(self, seed):
        rng = np.random.default_rng(seed)
        data = _sim(seed=seed, K=8, n=40)
        model = ModelSpec((1, 2))
        beta = np.array([0.3, 0.2, 0.0]) + rng.normal(0, 0.1, 3)
        s2 = rng.uniform(0.05, 0.8)
        g = marginal_score(data, model, beta, s2)
        fd = _central_difference(data, model, np.append(beta, math.log(s2)), POIS)
        np.testing.assert_allclose(g, fd, rtol=1e-3, atol=1e-6)

    def test_bernoulli_score(self):
        data = _bernoulli_data(np.random.default_rng(8))
        model = ModelSpec((1,), BERN)
        beta, s2 = np.array([0.1, 0.5]), 0.4
        g = marginal_score(data, model, beta, s2)
        fd = _central_difference(data, model, np.append(beta, math.log(s2)), BERN)
        np.testing.assert_allclose(g, fd, rtol=1e-3, atol=1e-6)

    def test_gaussian_score(self):
        rng = np.random.default_rng(9)
        data = []
        for i in range(5):
            X = np.column_stack([np.ones(8), rng.normal(size=8)])
            data.append(ClusterData(i, X @ [0.5, 1.0] + rng.normal(size=8) + rng.normal(), X))
        model = ModelSpec((1,), GAUS)
        beta, s2, phi = np.array([0.4, 0.9]), 0.7, 1.2
        g = marginal_score(data, model, beta, s2, dispersion=phi)
        fd = _central_difference(data, model, np.array([*beta, math.log(s2), math.log(phi)]), GAUS)
        np.testing.assert_allclose(g, fd, rtol=1e-3, atol=1e-6)


# --------------------------------------------------------------------- #
# fitting
# --------------------------------------------------------------------- #


class TestFit:
    def test_maic_formula(self):
        fit = fit_marginal(_sim(seed=4), ModelSpec((1,)))
        assert fit.mAIC == pytest.approx(-2 * fit.marginal_loglik + 2 * 3, rel=1e-14)
        assert fit.sigma0_sq_hat >= 0 and fit.converged

    def test_estimate_is_stationary(self):
        data = _sim(seed=5)
        fit = fit_marginal(data, ModelSpec((1,)))
        assert not fit.boundary
        g = marginal_score(data, ModelSpec((1,)), fit.beta_hat, fit.sigma0_sq_hat)
        assert np.max(np.abs(g)) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_dominates_boundary_model(self, seed):
        data = _sim(seed=seed, s0=0.005)
        model = ModelSpec((1, 2))
        fit = fit_marginal(data, model)
        pooled = fit_cluster(ClusterData("all", np.concatenate([c.y for c in data]), np.vstack([c.X for c in data])), model)
        assert fit.marginal_loglik >= pooled.max_loglik - 1e-6

    def test_zero_variance_data_recovers_pooled(self):
        data = _sim(seed=6, s0=0.0, s1=0.0)
        model = ModelSpec((1,))
        fit = fit_marginal(data, model)
        allc = ClusterData("all", np.concatenate([c.y for c in data]), np.vstack([c.X for c in data]))
        pooled = fit_cluster(allc, model)
        se = np.sqrt(np.diag(np.linalg.inv(-pooled.hessian * allc.n)))
        assert fit.sigma0_sq_hat < 0.01
        assert np.all(np.abs(fit.beta_hat - pooled.beta_hat) <= 2 * se)

    def test_variance_recovered_at_large_clusters(self):
        hits = 0
        reps = 20
        for r in range(reps):
            fit = fit_marginal(_sim(seed=7, n=320, s0=0.3, replicate=r), ModelSpec((1,)))
            hits += 0.1 <= fit.sigma0_sq_hat <= 0.6
        assert hits / reps >= 0.9

    def test_gaussian_fit_matches_closed_form_optimum(self):
        rng = np.random.default_rng(10)
        data = []
        for i in range(10):
            X = np.column_stack([np.ones(12), rng.normal(size=12)])
            data.append(ClusterData(i, X @ [1.0, -0.4] + rng.normal(0, 0.6) + rng.normal(size=12), X))
        model = ModelSpec((1,), GAUS)
        fit = fit_marginal(data, model)
        g = marginal_score(data, model, fit.beta_hat, fit.sigma0_sq_hat, dispersion=fit.dispersion)
        assert np.max(np.abs(g)) < 1e-4
        assert fit.mAIC == pytest.approx(-2 * fit.marginal_loglik + 2 * 4)


class TestSelection:
    def test_single_model(self):
        report = maic_select(_sim(seed=8), [ModelSpec((2,))])
        assert report.best == 0 and report.criterion == "mAIC-RI"

    def test_true_slope_beats_null_at_larger_effect(self):
        wins = 0
        reps = 40
        for r in range(reps):
            data = _sim(seed=9, beta1=0.4, s0=0.005, s1=0.005, replicate=r)
            report = maic_select(data, [ModelSpec(()), ModelSpec((1,))])
            wins += report.per_model[1].value < report.per_model[0].value
        assert wins / reps >= 0.95

    def test_criteria_disagree_under_large_slope_variance(self):
        for r in range(50):
            data = _sim(seed=10, s0=0.15, s1=1.5, replicate=r)
            a = select(data, lattice()).best_model
            b = maic_select(data, lattice()).best_model
            if a != b:
                assert a.active_columns == (1,)
                return
        pytest.fail("no disagreement in 50 replicates")

    def test_worker_count_invariant(self):
        data = _sim(seed=11)
        a = maic_select(data, lattice(), workers=1)
        b = maic_select(data, lattice(), workers=4)
        assert a.values.tobytes() == b.values.tobytes()
