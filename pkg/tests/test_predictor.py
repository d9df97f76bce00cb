from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats

from oracles import random_problem, random_sites, se_kernel
from sepgp.ep import SiteFactors, init_sites, reconstruct
from sepgp.kernel import Hyperparameters, build_bundle
from sepgp.predictor import _probit_arg, evaluate, predict_latent, predict_proba
from sepgp.probit import log_phi


def model_for(hyper, sites=None, X=None):
    X = np.empty((0, hyper.d)) if X is None else X
    b = build_bundle(X, hyper)
    sites = init_sites(b.n) if sites is None else sites
    return SimpleNamespace(hyper=hyper, bundle=b, posterior=reconstruct(b, sites))


class TestLatent:
    def test_zero_sites_give_prior(self):
        _, _, h = random_problem()
        pred = predict_latent(np.random.default_rng(0).standard_normal((7, 2)), model_for(h))
        np.testing.assert_allclose(pred.mean, 0.0, atol=1e-15)
        np.testing.assert_allclose(pred.variance, h.amplitude, rtol=1e-10)

    def test_scalar_case(self):
        h = Hyperparameters(np.zeros(1), 0.0, np.log(0.5), np.zeros((1, 1)))
        X = np.array([[0.0]])
        model = model_for(h, SiteFactors(np.array([2.0]), np.array([1.0]), np.zeros(1)), X)
        Kmm = 1.5 + model.bundle.jitter
        # the posterior over the one inducing value
        u = 1.0 / Kmm
        prec = 1 / Kmm + u * 2.0 * u
        S, mu = 1 / prec, (u * 1.0) / prec
        x = np.array([0.8])
        k = np.exp(-0.32)
        pred = predict_latent(x, model)
        assert pred.mean.shape == ()
        assert pred.mean == pytest.approx(k / Kmm * mu, rel=1e-12)
        assert pred.variance == pytest.approx(1 - k * k / Kmm + k * k * S / Kmm ** 2, rel=1e-12)

    def test_monte_carlo(self):
        X, _, h = random_problem(n=15, m=4, seed=2)
        model = model_for(h, random_sites(15, seed=2), X)
        x = np.array([[0.3, -0.4]])
        pred = predict_latent(x, model)
        rng = np.random.default_rng(0)
        q = model.posterior
        Kmm = model.bundle.Kmm
        k = se_kernel(x, h.inducing_points, h)[0]
        w = np.linalg.solve(Kmm, k)
        fbar = rng.multivariate_normal(q.mu, q.sigma, size=10 ** 6)
        cond_var = h.amplitude - k @ w
        f = fbar @ w + np.sqrt(cond_var) * rng.standard_normal(10 ** 6)
        assert pred.mean[0] == pytest.approx(f.mean(), abs=4 * f.std() / 1e3)
        assert pred.variance[0] == pytest.approx(f.var(), rel=1e-2)

    def test_batch_matches_pointwise(self):
        X, _, h = random_problem(n=15, m=4, seed=3)
        model = model_for(h, random_sites(15), X)
        pts = np.random.default_rng(1).standard_normal((9, 2))
        batch = predict_latent(pts, model)
        for i, p in enumerate(pts):
            single = predict_latent(p, model)
            assert single.mean == pytest.approx(batch.mean[i], rel=1e-12, abs=1e-15)
            assert single.variance == pytest.approx(batch.variance[i], rel=1e-12)

    def test_stale_bundle(self):
        _, _, h = random_problem()
        model = model_for(h)
        model.bundle = build_bundle(np.empty((0, 2)), h)
        with pytest.raises(RuntimeError):
            predict_latent(np.zeros(2), model)


class TestProba:
    def test_probit_of_one(self):
        p = stats.norm.cdf(1.0)
        assert p == pytest.approx(0.841345, abs=1e-6)
        pred = SimpleNamespace(mean=np.array([np.sqrt(2.0)]), variance=np.array([1.0]))
        assert _probit_arg(pred)[0] == pytest.approx(1.0)

    def test_in_unit_interval_and_symmetric(self):
        X, _, h = random_problem(n=15, m=4, seed=4)
        sites = random_sites(15)
        model = model_for(h, sites, X)
        flipped = sites.copy()
        flipped.mu = -flipped.mu
        other = model_for(h, flipped, X)
        pts = np.random.default_rng(2).standard_normal((20, 2)) * 3
        p, p2 = predict_proba(pts, model), predict_proba(pts, other)
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p + p2, 1.0, rtol=1e-12)

    def test_monotone_in_mean(self):
        X, _, h = random_problem(n=15, m=4)
        sites = random_sites(15)
        vals = []
        for c in (0.5, 1.0, 2.0):
            s = sites.copy()
            s.mu = c * np.abs(s.mu)
            vals.append(predict_latent(np.zeros(2), model_for(h, s, X)))
        # scaling every site mean scales the latent mean and leaves the variance alone
        np.testing.assert_allclose([v.variance for v in vals], vals[0].variance, rtol=1e-12)
        means = np.array([float(v.mean) for v in vals])
        probs = np.array([float(stats.norm.cdf(_probit_arg(v))) for v in vals])
        np.testing.assert_array_equal(np.argsort(means), np.argsort(probs))
        assert np.all(np.diff(means) != 0)


class TestEvaluate:
    def test_uninformed_model(self):
        _, _, h = random_problem()
        model = model_for(h)
        X = np.random.default_rng(0).standard_normal((10, 2))
        y = np.array([1, -1] * 5)
        rep = evaluate(model, X, y)
        assert rep.avg_neg_log_likelihood == pytest.approx(np.log(2), rel=1e-12)
        assert rep.error_rate == 0.5  # ties predict +1
        assert rep.n_test == 10

    def test_empty(self):
        _, _, h = random_problem()
        with pytest.raises(ValueError):
            evaluate(model_for(h), np.empty((0, 2)), np.empty(0))

    def test_far_tail_finite(self):
        pred_args = np.array([-30.0, -10.0, 30.0])
        assert np.all(np.isfinite(log_phi(pred_args)))
