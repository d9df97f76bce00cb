"""EP estimate of the log marginal likelihood and its gradient.

The gradient treats the sites as fixed and assumes matched moments, so it
consists of a prior term ``-1/2 tr(M dKmm)`` with
``M = Kmm^{-1} - Kmm^{-1} Sigma Kmm^{-1} - Kmm^{-1} mu mu' Kmm^{-1}`` plus the
direct derivative of every ``log Z_i`` with its cavity held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from .ep import PosteriorApprox, SiteFactors
from .kernel import KernelBundle, contract_gradient
from .probit import inv_mills, log_phi

__all__ = [
    "LogZqReport",
    "InconsistentStateError",
    "log_Zq",
    "grad_log_Zq",
    "objective_and_gradient",
    "stochastic_grad",
    "prior_M",
    "site_gradient_weights",
    "prior_gradient",
]


class InconsistentStateError(ValueError):
    """A site's cavity is undefined under the current posterior."""


@dataclass
class LogZqReport:
    log_Zq: float
    per_site_log_Ztilde: np.ndarray
    prior_terms: float


def _check_posterior(bundle, posterior):
    if posterior.bundle_version != bundle.version:
        raise RuntimeError("posterior was built from a stale kernel bundle")


def _site_quantities(bundle: KernelBundle, sites: SiteFactors, posterior: PosteriorApprox, y, idx):
    k = bundle.Knm[idx]
    nu, mt = sites.nu[idx], sites.mu[idx]
    F = posterior.solve(k.T)
    v = np.einsum("ij,ji->i", k, F)
    p = k @ posterior.weights
    t = 1.0 - nu * v
    bad = np.flatnonzero(t <= 0)
    if bad.size:
        raise InconsistentStateError(
            f"cavity undefined (1 - nu*v <= 0) for sites {np.asarray(idx)[bad][:10].tolist()}")
    vc = v / t
    a = p + vc * (nu * p - mt)
    b = 1.0 + bundle.fitc_diag[idx] + vc
    yy = np.asarray(y, dtype=float)[idx]
    sb = np.sqrt(b)
    z = yy * a / sb
    return dict(k=k, F=F, v=v, p=p, t=t, a=a, b=b, z=z, y=yy, nu=nu, mt=mt, sb=sb)


def _log_ztilde(q):
    nu, mt, v, p, t = q["nu"], q["mt"], q["v"], q["p"], q["t"]
    C = nu / t
    quad = -2.0 * mt * p + mt * mt * v + C * (p - mt * v) ** 2
    return log_phi(q["z"]) - 0.5 * np.log(t) + 0.5 * quad


def _prior_terms(bundle, posterior):
    logdet_post = 2.0 * float(np.log(np.diag(posterior.chol)).sum())
    return 0.5 * (bundle.logdet() - logdet_post) + 0.5 * float(posterior.linear @ posterior.weights)


def log_Zq(bundle: KernelBundle, sites: SiteFactors, posterior: PosteriorApprox, y,
           idx=None) -> LogZqReport:
    """``g(theta) - g(theta_prior) + sum_i log Ztilde_i`` at the current state.

    Every ``log Ztilde_i = log Z_i + g(theta_cavity_i) - g(theta)`` is expanded
    with the matrix determinant lemma and Woodbury identity so the cost is
    O(n m^2).
    """
    _check_posterior(bundle, posterior)
    idx = np.arange(bundle.n) if idx is None else idx
    per_site = _log_ztilde(_site_quantities(bundle, sites, posterior, y, idx))
    prior = _prior_terms(bundle, posterior)
    return LogZqReport(prior + float(np.sum(per_site)), per_site, prior)


def prior_M(bundle: KernelBundle, posterior: PosteriorApprox) -> np.ndarray:
    """``Kmm^{-1} - Kmm^{-1} Sigma Kmm^{-1} - Kmm^{-1} mu mu' Kmm^{-1}``."""
    eye = np.eye(bundle.m)
    Kinv = bundle.solve(eye)
    M = Kinv - posterior.solve(eye) - np.outer(posterior.weights, posterior.weights)
    return 0.5 * (M + M.T)


def site_gradient_weights(bundle, sites, posterior, y, idx=None, q=None):
    """Matrices whose contraction with kernel derivatives gives ``sum_i d log Z_i``.

    Returns ``(G_nm, g_diag, G_mm)`` for the rows in ``idx``; ``G_nm`` has one
    row per selected site and ``G_mm`` is symmetric.
    """
    idx = np.arange(bundle.n) if idx is None else idx
    if q is None:
        q = _site_quantities(bundle, sites, posterior, y, idx)
    alpha = inv_mills(q["z"]) * q["y"] / q["sb"]
    a, b, t = q["a"], q["b"], q["t"]
    # d log Z = gamma' d(upsilon) + delta ds with gamma = alpha mu_cav + 2 delta Sigma_cav upsilon
    delta = -0.5 * alpha * a / b
    coef = (alpha * (q["nu"] * q["p"] - q["mt"]) + 2.0 * delta) / t
    W = np.outer(posterior.weights, alpha) + q["F"] * coef
    U = bundle.upsilon[:, idx]
    G_nm = W.T - 2.0 * delta[:, None] * U.T
    B = (U * delta) @ U.T - U @ W.T
    return G_nm, delta, 0.5 * (B + B.T)


def _empty_rows(bundle):
    return bundle.with_rows(np.empty((0, bundle.hyper.d)))


def prior_gradient(bundle: KernelBundle, posterior: PosteriorApprox) -> np.ndarray:
    """The data-independent part ``-1/2 tr(M dKmm)`` for every parameter."""
    M = prior_M(bundle, posterior)
    empty = _empty_rows(bundle)
    return contract_gradient(empty, np.zeros((0, bundle.m)), np.zeros(0), -0.5 * M)


def objective_and_gradient(bundle: KernelBundle, sites: SiteFactors,
                           posterior: PosteriorApprox, y):
    """``(LogZqReport, gradient)`` sharing the per-site work."""
    _check_posterior(bundle, posterior)
    idx = np.arange(bundle.n)
    q = _site_quantities(bundle, sites, posterior, y, idx)
    per_site = _log_ztilde(q)
    prior = _prior_terms(bundle, posterior)
    G_nm, g_diag, B = site_gradient_weights(bundle, sites, posterior, y, idx, q=q)
    G_mm = B - 0.5 * prior_M(bundle, posterior)
    grad = contract_gradient(bundle, G_nm, g_diag, G_mm)
    return LogZqReport(prior + float(np.sum(per_site)), per_site, prior), grad


def grad_log_Zq(bundle: KernelBundle, sites: SiteFactors, posterior: PosteriorApprox, y):
    """Gradient of ``log Z_q`` with respect to every flat hyper-parameter."""
    return objective_and_gradient(bundle, sites, posterior, y)[1]


def stochastic_grad(batch_bundle: KernelBundle, batch_sites: SiteFactors,
                    posterior: PosteriorApprox, batch_y, n_total: int) -> np.ndarray:
    """Exact prior term plus the minibatch site sum scaled by ``n_total / |batch|``.

    ``batch_bundle`` holds the minibatch rows only, and ``batch_sites`` and
    ``batch_y`` are aligned with those rows.
    """
    _check_posterior(batch_bundle, posterior)
    nb = batch_bundle.n
    if nb == 0:
        raise ValueError("minibatch must be non-empty")
    scale = n_total / nb
    G_nm, g_diag, B = site_gradient_weights(batch_bundle, batch_sites, posterior, batch_y)
    G_mm = scale * B - 0.5 * prior_M(batch_bundle, posterior)
    return contract_gradient(batch_bundle, scale * G_nm, scale * g_diag, G_mm)

