import numpy as np
import pytest

from oracles import naive_log_zq, random_problem, random_sites
from sepgp.ep import init_sites, reconstruct, run_ep
from sepgp.kernel import build_bundle, contract_gradient
from sepgp.objective import (
    InconsistentStateError,
    grad_log_Zq,
    log_Zq,
    objective_and_gradient,
    prior_gradient,
    site_gradient_weights,
    stochastic_grad,
)


def converged(n=20, m=5, d=2, seed=0):
    X, y, h = random_problem(n=n, m=m, d=d, seed=seed)
    b = build_bundle(X, h)
    sites, q, _, ok = run_ep(b, y, rho=0.5, tol=1e-12, max_sweeps=2000)
    assert ok
    return X, y, h, b, sites, q


def frozen_log_zq(X, y, h, sites):
    b = build_bundle(X, h)
    return log_Zq(b, sites, reconstruct(b, sites), y).log_Zq


class TestLogZq:
    def test_zero_sites(self):
        X, y, h = random_problem(n=9)
        b = build_bundle(X, h)
        s = init_sites(9)
        rep = log_Zq(b, s, reconstruct(b, s), y)
        assert rep.log_Zq == pytest.approx(-9 * np.log(2), rel=1e-12)
        assert rep.prior_terms == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_naive_oracle(self, seed):
        X, y, h = random_problem(n=12, m=4, seed=seed)
        sites = random_sites(12, seed=seed)
        b = build_bundle(X, h)
        rep = log_Zq(b, sites, reconstruct(b, sites), y)
        assert rep.log_Zq == pytest.approx(naive_log_zq(X, y, h, sites), rel=1e-8)

    def test_report_identity(self):
        X, y, h, b, sites, q = converged()
        rep = log_Zq(b, sites, q, y)
        assert rep.log_Zq == pytest.approx(rep.prior_terms + rep.per_site_log_Ztilde.sum(),
                                           rel=1e-14)
        assert rep.per_site_log_Ztilde.shape == (20,)

    def test_label_mirror_symmetry(self):
        X, y, h = random_problem(n=10, m=3)
        b = build_bundle(X, h)
        sites = random_sites(10)
        flipped = sites.copy()
        flipped.mu = -flipped.mu
        a = log_Zq(b, sites, reconstruct(b, sites), y).log_Zq
        c = log_Zq(b, flipped, reconstruct(b, flipped), -y).log_Zq
        assert a == pytest.approx(c, rel=1e-12)

    def test_inconsistent_state(self):
        X, y, h = random_problem(n=6, m=3)
        b = build_bundle(X, h)
        s = init_sites(6)
        q = reconstruct(b, s)
        s.nu[0] = 1e12
        with pytest.raises(InconsistentStateError, match="sites"):
            log_Zq(b, s, q, y)

    def test_stale_posterior(self):
        X, y, h = random_problem()
        s = init_sites(20)
        q = reconstruct(build_bundle(X, h), s)
        with pytest.raises(RuntimeError, match="stale"):
            log_Zq(build_bundle(X, h), s, q, y)


class TestGradient:
    def test_frozen_site_finite_differences(self):
        X, y, h, b, sites, q = converged(seed=3)
        g = grad_log_Zq(b, sites, q, y)
        v = h.to_vector()
        for j in range(h.size):
            e = np.zeros_like(v)
            e[j] = 1e-6
            fd = (frozen_log_zq(X, y, h.with_vector(v + e), sites)
                  - frozen_log_zq(X, y, h.with_vector(v - e), sites)) / 2e-6
            assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-7), j

    def test_objective_and_gradient_agree(self):
        X, y, h, b, sites, q = converged(seed=1)
        rep, g = objective_and_gradient(b, sites, q, y)
        assert rep.log_Zq == log_Zq(b, sites, q, y).log_Zq
        np.testing.assert_array_equal(g, grad_log_Zq(b, sites, q, y))

    def test_no_data_gives_prior_gradient_of_zero(self):
        # without sites the posterior is the prior and M vanishes
        X, y, h = random_problem(n=5, m=3)
        b = build_bundle(np.empty((0, 2)), h)
        s = init_sites(0)
        g = grad_log_Zq(b, s, reconstruct(b, s), np.empty(0))
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_split_into_prior_and_sites(self):
        X, y, h, b, sites, q = converged(seed=2)
        G_nm, gd, B = site_gradient_weights(b, sites, q, y)
        total = prior_gradient(b, q) + contract_gradient(b, G_nm, gd, B)
        np.testing.assert_allclose(total, grad_log_Zq(b, sites, q, y), rtol=1e-10, atol=1e-12)


class TestStochasticGradient:
    def test_full_batch_is_exact(self):
        X, y, h, b, sites, q = converged(seed=4)
        np.testing.assert_allclose(stochastic_grad(b, sites, q, y, 20), grad_log_Zq(b, sites, q, y),
                                   rtol=1e-12, atol=1e-12)

    def test_exact_cover_average(self):
        X, y, h, b, sites, q = converged(n=24, seed=5)
        perm = np.random.default_rng(0).permutation(24)
        parts = []
        for idx in np.split(perm, 4):
            bb = b.with_rows(X[idx])
            parts.append(stochastic_grad(bb, sites.subset(idx), q, y[idx], 24))
        np.testing.assert_allclose(np.mean(parts, axis=0), grad_log_Zq(b, sites, q, y),
                                   rtol=1e-10, atol=1e-10)

    def test_empty_batch(self):
        X, y, h = random_problem()
        b = build_bundle(np.empty((0, 2)), h)
        s = init_sites(0)
        with pytest.raises(ValueError):
            stochastic_grad(b, s, reconstruct(b, s), np.empty(0), 10)
