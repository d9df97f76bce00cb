import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from oracles import (
    dense_cavity,
    dense_parts,
    dense_posterior,
    random_problem,
    random_sites,
    tilted_moments,
)
from sepgp.ep import (
    CavityScalars,
    ReconstructionError,
    SiteFactors,
    cavities,
    cavity,
    init_sites,
    moment_mismatch,
    parallel_sweep,
    posterior_from_aggregates,
    reconstruct,
    run_ep,
    site_update,
)
from sepgp.kernel import Hyperparameters, build_bundle
from sepgp.probit import inv_mills, log_phi


class TestProbit:
    @pytest.mark.parametrize("z", [-40.0, -30.0, -10.0, -6.5, -1.0, 0.0, 2.0, 9.0])
    def test_log_phi_high_precision(self, z):
        mpmath.mp.dps = 50
        ref = float(mpmath.log(mpmath.ncdf(z)))
        assert log_phi(z) == pytest.approx(ref, rel=1e-13)

    @pytest.mark.parametrize("z", [-38.0, -25.0, -7.0, -0.5, 0.0, 3.0, 12.0])
    def test_inverse_mills_high_precision(self, z):
        mpmath.mp.dps = 50
        ref = float(mpmath.npdf(z) / mpmath.ncdf(z))
        assert inv_mills(np.array([z]))[0] == pytest.approx(ref, rel=1e-12)


class TestSites:
    def test_init_all_zero(self):
        s = init_sites(3)
        assert s.n == 3
        assert not (s.nu.any() or s.mu.any() or s.log_s.any())

    def test_dict_round_trip(self):
        s = random_sites(7)
        back = SiteFactors.from_dict(s.to_dict())
        np.testing.assert_array_equal(back.nu, s.nu)
        np.testing.assert_array_equal(back.mu, s.mu)


class TestReconstruct:
    def test_zero_sites_give_prior_exactly(self):
        X, _, h = random_problem()
        b = build_bundle(X, h)
        q = reconstruct(b, init_sites(X.shape[0]))
        assert not q.mu.any()
        assert np.array_equal(q.sigma, b.Kmm)

    def test_scalar_example(self):
        # Kmm = [1] and upsilon = [0.5]: Knm = Kmm upsilon = 0.5
        h = Hyperparameters(np.zeros(1), 0.0, np.log(1e-300), np.zeros((1, 1)))
        b = build_bundle(np.zeros((1, 1)), h)
        b.Kmm[:] = 1.0
        b.chol[:] = 1.0
        b.Knm[:] = 0.5
        b.upsilon[:] = 0.5
        q = reconstruct(b, SiteFactors(np.array([2.0]), np.array([1.0]), np.zeros(1)))
        np.testing.assert_allclose(q.sigma, [[2 / 3]], rtol=1e-14)
        np.testing.assert_allclose(q.mu, [1 / 3], rtol=1e-14)

    def test_dense_oracle(self):
        X, _, h = random_problem(n=30, m=5, seed=4)
        sites = random_sites(30, seed=1)
        Kmm, Knm, U, s = dense_parts(X, h)
        mean, Sigma = dense_posterior(Kmm, U, sites.nu, sites.mu)
        q = reconstruct(build_bundle(X, h), sites)
        np.testing.assert_allclose(q.sigma, Sigma, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(q.mu, mean, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(q.sigma, q.sigma.T, atol=1e-10)
        np.linalg.cholesky(q.sigma)

    def test_rank_one_inclusion_matches_woodbury(self):
        X, _, h = random_problem(n=10, m=4, seed=5)
        b = build_bundle(X, h)
        sites = random_sites(10, seed=2)
        before = reconstruct(b, sites)
        more = sites.copy()
        more.nu[3] += 0.7
        after = reconstruct(b, more)
        u = b.upsilon[:, 3]
        Su = before.sigma @ u
        expected = before.sigma - 0.7 * np.outer(Su, Su) / (1 + 0.7 * u @ Su)
        np.testing.assert_allclose(after.sigma, expected, atol=1e-10)

    def test_indefinite_precision_reports_sites(self):
        X, _, h = random_problem(n=10, m=4)
        b = build_bundle(X, h)
        sites = init_sites(10)
        sites.nu[2] = -1e6
        with pytest.raises(ReconstructionError) as exc:
            reconstruct(b, sites)
        assert 2 in exc.value.indices

    def test_natural_parameters(self):
        X, _, h = random_problem(n=10, m=3)
        q = reconstruct(build_bundle(X, h), random_sites(10))
        eta, lam = q.natural()
        np.testing.assert_allclose(-2 * lam @ q.mu, eta, rtol=1e-8)


class TestCavity:
    def test_zero_site_cavity_is_posterior(self):
        X, _, h = random_problem(n=10, m=4)
        b = build_bundle(X, h)
        sites = random_sites(10)
        sites.nu[4] = sites.mu[4] = 0.0
        q = reconstruct(b, sites)
        c = cavity(q, b, sites, 4)
        u = b.upsilon[:, 4]
        assert c.a == pytest.approx(u @ q.mu, rel=1e-12)
        assert c.b == pytest.approx(1 + b.fitc_diag[4] + u @ q.sigma @ u, rel=1e-12)

    def test_single_site_cavity_is_prior(self):
        X, _, h = random_problem(n=1, m=1)
        b = build_bundle(X, h)
        sites = SiteFactors(np.array([1.5]), np.array([0.8]), np.zeros(1))
        c = cavity(reconstruct(b, sites), b, sites, 0)
        u = b.upsilon[0, 0]
        assert c.a == pytest.approx(0.0, abs=1e-14)
        assert c.cav_var == pytest.approx(u * b.Kmm[0, 0] * u, rel=1e-12)

    def test_dense_downdate_oracle(self):
        X, _, h = random_problem(n=15, m=5, seed=6)
        sites = random_sites(15, seed=3)
        b = build_bundle(X, h)
        q = reconstruct(b, sites)
        c = cavities(b, q, sites)
        Kmm, Knm, U, s = dense_parts(X, h)
        mean, Sigma = dense_posterior(Kmm, U, sites.nu, sites.mu)
        for i in range(15):
            cm, cS = dense_cavity(mean, Sigma, U[:, i], sites.nu[i], sites.mu[i])
            u = U[:, i]
            assert c.a[i] == pytest.approx(u @ cm, rel=1e-8, abs=1e-10)
            assert c.b[i] == pytest.approx(1 + s[i] + u @ cS @ u, rel=1e-8)
            assert c.proj_var[i] == pytest.approx(u @ Sigma @ u, rel=1e-8)

    def test_stale_removal_vectors(self):
        # a site built along v_old is removed correctly even when the bundle's upsilon differs
        X, _, h = random_problem(n=8, m=3, seed=7)
        b = build_bundle(X, h)
        rng = np.random.default_rng(0)
        V = b.upsilon + 0.05 * rng.standard_normal(b.upsilon.shape)
        sites = random_sites(8, seed=4)
        P = V @ np.diag(sites.nu) @ V.T
        q = posterior_from_aggregates(b, b.Kmm @ P @ b.Kmm, b.Kmm @ (V @ sites.mu))
        c = cavities(b, q, sites, removal=V)
        Kinv = np.linalg.inv(b.Kmm)
        for i in range(8):
            prec = Kinv + P - sites.nu[i] * np.outer(V[:, i], V[:, i])
            S = np.linalg.inv(prec)
            cm = S @ (V @ sites.mu - sites.mu[i] * V[:, i])
            u = b.upsilon[:, i]
            assert c.a[i] == pytest.approx(u @ cm, rel=1e-7, abs=1e-9)
            assert c.cav_var[i] == pytest.approx(u @ S @ u, rel=1e-7)

    def test_invalid_cavity_flagged(self):
        X, _, h = random_problem(n=5, m=2)
        b = build_bundle(X, h)
        sites = init_sites(5)
        q = reconstruct(b, sites)
        sites.nu[1] = 1e12  # inconsistent with q on purpose
        c = cavities(b, q, sites)
        assert not c.valid[1]
        assert c.valid[[0, 2, 3, 4]].all()


def _scalar_cav(a, b, vc):
    return CavityScalars(np.array([a]), np.array([b]), np.nan, np.nan, np.array([vc]),
                         np.array([True]))


class TestSiteUpdate:
    def test_symmetric_probit(self):
        up = site_update(_scalar_cav(0.0, 2.0, 0.5), 1.0, 1.0, 0.0, 0.0)
        assert np.exp(up.log_z[0]) == pytest.approx(0.5, abs=1e-15)

    def test_spec_example_values(self):
        # a=0, b=2, y=+1, cavity variance 0.5: alpha = N(0)/Phi(0)/sqrt(2)
        up = site_update(_scalar_cav(0.0, 2.0, 0.5), 1.0, 1.0, 0.0, 0.0)
        r = stats.norm.pdf(0) / 0.5
        alpha, beta = r / np.sqrt(2), r * r / 2
        assert alpha == pytest.approx(0.56419, abs=1e-5)
        assert up.nu[0] == pytest.approx(beta / (1 - 0.5 * beta), rel=1e-14)
        assert up.mu[0] == pytest.approx(alpha / (1 - 0.5 * beta), rel=1e-14)

    def test_alpha_is_derivative_of_log_z(self):
        a, b, h = 0.3, 1.7, 1e-5
        dlog = (log_phi(-(a + h) / np.sqrt(b)) - log_phi(-(a - h) / np.sqrt(b))) / (2 * h)
        z = -a / np.sqrt(b)
        alpha = inv_mills(np.array([z]))[0] * -1 / np.sqrt(b)
        assert alpha == pytest.approx(dlog, rel=1e-8)

    @given(a=st.floats(-4, 4), vc=st.floats(0.05, 3.0), s=st.floats(0.0, 1.0),
           y=st.sampled_from([-1.0, 1.0]))
    @settings(max_examples=30, deadline=None)
    def test_moment_matching_against_quadrature(self, a, vc, s, y):
        z, mean_t, var_t = tilted_moments(a, vc, y, s)
        up = site_update(_scalar_cav(a, 1 + s + vc, vc), y, 1.0, 0.0, 0.0)
        nu = 1 / var_t - 1 / vc
        mu = mean_t / var_t - a / vc
        assert up.nu[0] == pytest.approx(nu, rel=1e-6, abs=1e-9)
        assert up.mu[0] == pytest.approx(mu, rel=1e-6, abs=1e-9)
        assert up.log_z[0] == pytest.approx(np.log(z), rel=1e-8, abs=1e-10)

    def test_site_integrates_to_z_against_cavity(self):
        a, vc, s, y = 0.4, 0.8, 0.3, -1.0
        up = site_update(_scalar_cav(a, 1 + s + vc, vc), y, 1.0, 0.0, 0.0)
        nu, mu, log_s = up.nu[0], up.mu[0], up.log_s[0]
        f = lambda u: np.exp(log_s - 0.5 * nu * u * u + mu * u) * stats.norm.pdf(u, a, np.sqrt(vc))
        val = integrate.quad(f, -30, 30, epsabs=0, epsrel=1e-12)[0]
        assert np.log(val) == pytest.approx(up.log_z[0], rel=1e-9)

    def test_zero_damping_keeps_site(self):
        up = site_update(_scalar_cav(1.0, 2.0, 0.5), 1.0, 0.0, 0.3, -0.2, 0.1)
        assert (up.nu[0], up.mu[0]) == (0.3, -0.2)

    @given(rho=st.floats(0.0, 1.0), old_nu=st.floats(-0.5, 2.0), old_mu=st.floats(-2, 2))
    @settings(max_examples=50, deadline=None)
    def test_damping_is_convex_blend(self, rho, old_nu, old_mu):
        cav = _scalar_cav(0.7, 1.9, 0.6)
        new = site_update(cav, 1.0, 1.0, old_nu, old_mu)
        up = site_update(cav, 1.0, rho, old_nu, old_mu)
        lo, hi = sorted([old_nu, new.nu[0]])
        assert lo - 1e-12 <= up.nu[0] <= hi + 1e-12
        lo, hi = sorted([old_mu, new.mu[0]])
        assert lo - 1e-12 <= up.mu[0] <= hi + 1e-12

    def test_invalid_cavity_skipped(self):
        cav = CavityScalars(np.array([np.nan]), np.array([np.nan]), 0, 0, np.array([np.nan]),
                            np.array([False]))
        up = site_update(cav, 1.0, 0.5, 0.2, 0.1, 0.05)
        assert up.skipped[0]
        assert (up.nu[0], up.mu[0], up.log_s[0]) == (0.2, 0.1, 0.05)

    def test_far_tail_stays_finite(self):
        cav = CavityScalars(np.array([-60.0]), np.array([2.0]), 0, 0, np.array([1.0]),
                            np.array([True]))
        up = site_update(cav, 1.0, 1.0, 0.0, 0.0)
        assert np.isfinite([up.nu[0], up.mu[0], up.log_s[0], up.log_z[0]]).all()

    def test_bad_damping(self):
        with pytest.raises(ValueError):
            site_update(_scalar_cav(0, 2, 0.5), 1.0, 1.5, 0.0, 0.0)


class TestSweeps:
    def test_zero_damping_is_identity(self):
        X, y, h = random_problem()
        b = build_bundle(X, h)
        sites = random_sites(20)
        q = reconstruct(b, sites)
        res = parallel_sweep(b, sites, q, y, 0.0)
        np.testing.assert_array_equal(res.sites.nu, sites.nu)
        np.testing.assert_allclose(res.posterior.sigma, q.sigma, rtol=1e-14)

    def test_single_instance_sweep_is_sequential_update(self):
        X, y, h = random_problem(n=1, m=1)
        b = build_bundle(X, h)
        sites = init_sites(1)
        res = parallel_sweep(b, sites, reconstruct(b, sites), y, 1.0)
        c = cavity(reconstruct(b, sites), b, sites, 0)
        up = site_update(c, y[0], 1.0, 0.0, 0.0)
        assert res.sites.nu[0] == pytest.approx(up.nu[0], rel=1e-14)

    def test_fixed_point_moments(self):
        X, y, h = random_problem(n=20, m=5, seed=8)
        b = build_bundle(X, h)
        sites, q, sweeps, ok = run_ep(b, y, rho=0.5, tol=1e-10, max_sweeps=500)
        assert ok
        _, _, sweeps6, ok6 = run_ep(b, y, rho=0.5, tol=1e-6, max_sweeps=200)
        assert ok6
        assert moment_mismatch(b, sites, q, y).max() < 1e-6

    def test_stale_bundle_rejected(self):
        X, y, h = random_problem()
        b1, b2 = build_bundle(X, h), build_bundle(X, h)
        sites = init_sites(20)
        with pytest.raises(RuntimeError, match="stale"):
            parallel_sweep(b2, sites, reconstruct(b1, sites), y, 0.5)

    def test_deterministic(self):
        X, y, h = random_problem()
        b = build_bundle(X, h)
        r1 = run_ep(b, y, max_sweeps=5)
        r2 = run_ep(b, y, max_sweeps=5)
        np.testing.assert_array_equal(r1[0].nu, r2[0].nu)
        np.testing.assert_array_equal(r1[1].mu, r2[1].mu)
