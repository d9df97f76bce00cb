"""Expectation propagation over the inducing values with rank-one site factors.

Site ``i`` contributes ``exp(-nu_i/2 (v_i' f)^2 + mu_i v_i' f)`` where
``v_i = Kmm^{-1} k_i`` and ``k_i`` is the i-th row of ``Knm``. Posterior
natural parameters are kept in the kernel-column basis: with
``A = sum nu_i k_i k_i'`` and ``b = sum mu_i k_i`` one has
``Sigma = Kmm (Kmm + A)^{-1} Kmm`` and ``mu = Kmm (Kmm + A)^{-1} b``, which
avoids ever forming ``Kmm^{-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .kernel import KernelBundle
from .probit import inv_mills, log_phi

__all__ = [
    "SiteFactors",
    "PosteriorApprox",
    "CavityScalars",
    "SiteUpdate",
    "SweepResult",
    "ReconstructionError",
    "init_sites",
    "site_aggregates",
    "posterior_from_aggregates",
    "reconstruct",
    "cavity",
    "cavities",
    "site_update",
    "parallel_sweep",
    "run_ep",
    "moment_mismatch",
]

CAVITY_EPS = 1e-10


class ReconstructionError(np.linalg.LinAlgError):
    """The combined site precision made the posterior precision indefinite."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = np.asarray(indices, dtype=int)


@dataclass
class SiteFactors:
    nu: np.ndarray
    mu: np.ndarray
    log_s: np.ndarray

    @property
    def n(self) -> int:
        return self.nu.size

    def copy(self) -> "SiteFactors":
        return SiteFactors(self.nu.copy(), self.mu.copy(), self.log_s.copy())

    def subset(self, idx) -> "SiteFactors":
        return SiteFactors(self.nu[idx].copy(), self.mu[idx].copy(), self.log_s[idx].copy())

    def to_dict(self) -> dict:
        return {"nu": self.nu.tolist(), "mu": self.mu.tolist(), "log_s": self.log_s.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "SiteFactors":
        arrs = [np.asarray(doc[k], dtype=float) for k in ("nu", "mu", "log_s")]
        if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
            raise ValueError("site parameter arrays differ in length")
        return cls(*arrs)


def init_sites(n: int) -> SiteFactors:
    """Uninformative sites, so that the posterior starts at the prior."""
    return SiteFactors(np.zeros(n), np.zeros(n), np.zeros(n))


@dataclass(eq=False)
class PosteriorApprox:
    """Gaussian ``q(f_bar) = N(mu, Sigma)`` together with its factorized form.

    ``chol`` is the lower Cholesky factor of ``Kmm + precision`` and
    ``weights`` equals ``Kmm^{-1} mu``.
    """

    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray
    weights: np.ndarray
    precision: np.ndarray
    linear: np.ndarray
    bundle_version: int

    @property
    def m(self) -> int:
        return self.mu.size

    def solve(self, B):
        """``(Kmm + precision)^{-1} B``."""
        return linalg.cho_solve((self.chol, True), B, check_finite=False)

    def natural(self):
        """``(Sigma^{-1} mu, -Sigma^{-1} / 2)``."""
        prec = np.linalg.inv(self.sigma)
        return prec @ self.mu, -0.5 * prec


def site_aggregates(Knm, nu, mu):
    """Site natural parameters summed in the kernel-column basis: ``(K' diag(nu) K, K' mu)``."""
    return Knm.T @ (nu[:, None] * Knm), Knm.T @ mu


def posterior_from_aggregates(bundle: KernelBundle, precision, linear,
                              nu_hint=None) -> PosteriorApprox:
    precision = 0.5 * (precision + precision.T)
    K = bundle.Kmm
    if not np.any(precision):
        chol = bundle.chol
    else:
        try:
            chol = linalg.cholesky(K + precision, lower=True, check_finite=False)
        except linalg.LinAlgError:
            bad = np.flatnonzero(nu_hint < 0) if nu_hint is not None else ()
            raise ReconstructionError(
                "posterior precision is not positive definite", bad) from None
    weights = linalg.cho_solve((chol, True), linear, check_finite=False)
    if chol is bundle.chol:
        sigma = K.copy()
    else:
        V = linalg.solve_triangular(chol, K, lower=True, check_finite=False)
        sigma = V.T @ V
        sigma = 0.5 * (sigma + sigma.T)
    return PosteriorApprox(K @ weights, sigma, chol, weights, precision, np.asarray(linear, float),
                           bundle.version)


def reconstruct(bundle: KernelBundle, sites: SiteFactors) -> PosteriorApprox:
    """Multiply all sites into the prior ``N(0, Kmm)``."""
    if sites.n != bundle.n:
        raise ValueError(f"{sites.n} sites for a bundle with {bundle.n} rows")
    A, b = site_aggregates(bundle.Knm, sites.nu, sites.mu)
    return posterior_from_aggregates(bundle, A, b, nu_hint=sites.nu)


@dataclass
class CavityScalars:
    """Projected cavity quantities for one or many sites.

    ``a`` is the cavity mean of ``v_i' f``, ``cav_var`` its variance,
    ``b = 1 + s_i + cav_var``; ``proj_mean``/``proj_var`` are the same
    projections under ``q``. ``valid`` is False where the cavity is undefined.
    """

    a: np.ndarray
    b: np.ndarray
    proj_var: np.ndarray
    proj_mean: np.ndarray
    cav_var: np.ndarray
    valid: np.ndarray


def cavities(bundle: KernelBundle, posterior: PosteriorApprox, sites: SiteFactors,
             idx=None, removal=None) -> CavityScalars:
    """Cavity scalars for the sites in ``idx`` (all sites by default).

    ``removal`` optionally gives, column by column, the projection vectors the
    current sites were built with when they differ from the bundle's ``upsilon``.
    """
    if idx is None:
        idx = np.arange(bundle.n)
    k = bundle.Knm[idx]
    nu, mu = sites.nu[idx], sites.mu[idx]
    F = posterior.solve(k.T)
    v = np.einsum("ij,ji->i", k, F)
    p = k @ posterior.weights
    if removal is None:
        t = 1.0 - nu * v
        cross, p_old = v, p
    else:
        SU = posterior.sigma @ removal
        v_old = np.einsum("ji,ji->i", removal, SU)
        cross = np.einsum("ji,ji->i", bundle.upsilon[:, idx], SU)
        p_old = removal.T @ posterior.mu
        t = 1.0 - nu * v_old
    valid = t > CAVITY_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        cav_var = np.where(valid, v + nu * cross ** 2 / t, np.nan)
        a = np.where(valid, p + cross * (nu * p_old - mu) / t, np.nan)
    b = 1.0 + bundle.fitc_diag[idx] + cav_var
    valid &= b > 0
    return CavityScalars(a, b, v, p, cav_var, valid)


def cavity(posterior: PosteriorApprox, bundle: KernelBundle, sites: SiteFactors,
           i: int) -> CavityScalars:
    """Scalar cavity quantities for a single site."""
    c = cavities(bundle, posterior, sites, np.array([i]))
    return CavityScalars(*(float(x[0]) if x.dtype != bool else bool(x[0])
                           for x in (c.a, c.b, c.proj_var, c.proj_mean, c.cav_var, c.valid)))


@dataclass
class SiteUpdate:
    nu: np.ndarray
    mu: np.ndarray
    log_s: np.ndarray
    log_z: np.ndarray
    skipped: np.ndarray


def site_update(cav: CavityScalars, y, rho: float, old_nu, old_mu, old_log_s=None) -> SiteUpdate:
    """Moment-matching update of the rank-one sites, blended with damping ``rho``.

    ``log_z`` is ``log Phi(y a / sqrt(b))``; ``log_s`` makes the damped site
    integrate to ``Z`` against its cavity. Skipped sites keep their old values.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"damping must lie in [0, 1], got {rho}")
    a = np.atleast_1d(np.asarray(cav.a, dtype=float))
    b = np.atleast_1d(np.asarray(cav.b, dtype=float))
    vc = np.atleast_1d(np.asarray(cav.cav_var, dtype=float))
    valid = np.atleast_1d(np.asarray(cav.valid, dtype=bool))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    old_nu = np.atleast_1d(np.asarray(old_nu, dtype=float))
    old_mu = np.atleast_1d(np.asarray(old_mu, dtype=float))
    old_log_s = np.zeros_like(old_nu) if old_log_s is None else np.atleast_1d(old_log_s)

    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        sb = np.sqrt(np.where(valid, b, 1.0))
        z = y * np.where(valid, a, 0.0) / sb
        log_z = log_phi(z)
        r = inv_mills(z)
        alpha = r * y / sb
        beta = r * (r + z) / b
        denom = 1.0 - vc * beta
        ok = valid & np.isfinite(beta) & (beta > 0) & (denom > 0)
        nu_new = beta / denom
        mu_new = (alpha + a * beta) / denom
        ok &= np.isfinite(nu_new) & np.isfinite(mu_new)
        nu = np.where(ok, rho * nu_new + (1 - rho) * old_nu, old_nu)
        mu = np.where(ok, rho * mu_new + (1 - rho) * old_mu, old_mu)
        g = 1.0 + nu * vc
        log_s = log_z + 0.5 * np.log(g) + 0.5 * (a * a * nu - mu * mu * vc - 2 * mu * a) / g
    log_s = np.where(ok, log_s, old_log_s)
    log_z = np.where(valid, log_z, np.nan)
    return SiteUpdate(nu, mu, log_s, log_z, ~ok)


@dataclass
class SweepResult:
    sites: SiteFactors
    posterior: PosteriorApprox
    log_z: np.ndarray
    n_skipped: int
    max_change: float


def parallel_sweep(bundle: KernelBundle, sites: SiteFactors, posterior: PosteriorApprox,
                   y, rho: float) -> SweepResult:
    """Refine every site against the same posterior, then reconstruct once."""
    if posterior.bundle_version != bundle.version:
        raise RuntimeError("posterior was built from a stale kernel bundle")
    cav = cavities(bundle, posterior, sites)
    up = site_update(cav, y, rho, sites.nu, sites.mu, sites.log_s)
    new = SiteFactors(up.nu, up.mu, up.log_s)
    post = reconstruct(bundle, new)
    change = np.abs(new.nu - sites.nu) + np.abs(new.mu - sites.mu)
    return SweepResult(new, post, up.log_z, int(up.skipped.sum()),
                       float(change.max()) if change.size else 0.0)


def run_ep(bundle: KernelBundle, y, sites: SiteFactors | None = None, rho: float = 0.5,
           tol: float = 1e-5, max_sweeps: int = 500):
    """Damped parallel sweeps until the largest site change drops below ``tol``.

    Returns ``(sites, posterior, n_sweeps, converged)``.
    """
    sites = init_sites(bundle.n) if sites is None else sites
    post = reconstruct(bundle, sites)
    for sweep in range(1, max_sweeps + 1):
        res = parallel_sweep(bundle, sites, post, y, rho)
        sites, post = res.sites, res.posterior
        if res.max_change < tol:
            return sites, post, sweep, True
    return sites, post, max_sweeps, False


def moment_mismatch(bundle: KernelBundle, sites: SiteFactors, posterior: PosteriorApprox, y):
    """Per-site gap between tilted and posterior moments along ``v_i``."""
    cav = cavities(bundle, posterior, sites)
    z = y * cav.a / np.sqrt(cav.b)
    r = inv_mills(z)
    alpha = r * y / np.sqrt(cav.b)
    beta = r * (r + z) / cav.b
    mean_t = cav.a + cav.cav_var * alpha
    var_t = cav.cav_var - cav.cav_var ** 2 * beta
    return np.maximum(np.abs(mean_t - cav.proj_mean), np.abs(var_t - cav.proj_var))
