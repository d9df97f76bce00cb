"""ARD squared-exponential kernel with amplitude and additive noise, plus FITC quantities.

All scale parameters live in log space. The flat parameter vector is laid out as
``[log lengthscales (d), log amplitude, log noise, inducing points (m*d, row-major)]``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import linalg

__all__ = [
    "Hyperparameters",
    "KernelBundle",
    "KernelError",
    "k_eval",
    "cross_kernel",
    "build_bundle",
    "grad_bundle",
    "contract_gradient",
    "initial_hyperparameters",
]

JITTER_REL = 1e-6
JITTER_MAX_REL = 1e-2
FITC_FLOOR = 1e-10

_bundle_counter = itertools.count()


class KernelError(np.linalg.LinAlgError):
    """Raised when the inducing covariance cannot be factorized."""


@dataclass
class Hyperparameters:
    log_lengthscales: np.ndarray
    log_amplitude: float
    log_noise: float
    inducing_points: np.ndarray

    def __post_init__(self):
        self.log_lengthscales = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float)).copy()
        self.inducing_points = np.atleast_2d(np.asarray(self.inducing_points, dtype=float)).copy()
        self.log_amplitude = float(self.log_amplitude)
        self.log_noise = float(self.log_noise)
        if self.inducing_points.shape[1] != self.log_lengthscales.size:
            raise ValueError("inducing points and length-scales disagree on dimension")
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("hyper-parameters must be finite")

    @property
    def d(self) -> int:
        return self.log_lengthscales.size

    @property
    def m(self) -> int:
        return self.inducing_points.shape[0]

    @property
    def size(self) -> int:
        return self.d + 2 + self.m * self.d

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def amplitude(self) -> float:
        return float(np.exp(self.log_amplitude))

    @property
    def noise(self) -> float:
        return float(np.exp(self.log_noise))

    # flat indexing of the xi_j parameters
    @property
    def amplitude_index(self) -> int:
        return self.d

    @property
    def noise_index(self) -> int:
        return self.d + 1

    def inducing_index(self, r: int, c: int) -> int:
        return self.d + 2 + r * self.d + c

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            self.log_lengthscales,
            [self.log_amplitude, self.log_noise],
            self.inducing_points.ravel(),
        ])

    def with_vector(self, vec) -> "Hyperparameters":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {vec.shape}")
        d = self.d
        return Hyperparameters(vec[:d], vec[d], vec[d + 1], vec[d + 2:].reshape(self.m, d))

    def copy(self) -> "Hyperparameters":
        return self.with_vector(self.to_vector())

    def to_dict(self) -> dict:
        return {
            "log_lengthscales": self.log_lengthscales.tolist(),
            "log_amplitude": self.log_amplitude,
            "log_noise": self.log_noise,
            "inducing_points": self.inducing_points.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Hyperparameters":
        return cls(doc["log_lengthscales"], doc["log_amplitude"], doc["log_noise"],
                   doc["inducing_points"])


def k_eval(x, x2, same_point: bool, hyper: Hyperparameters) -> float:
    """Covariance between two inputs; noise is added only when ``same_point``."""
    r = (np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)) / hyper.lengthscales
    value = hyper.amplitude * np.exp(-0.5 * np.dot(r, r))
    if same_point:
        value += hyper.noise
    return float(value)


def _sqdist(A, B, ell):
    A = A / ell
    B = B / ell
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def cross_kernel(A, B, hyper: Hyperparameters):
    """Noise-free covariance matrix between the rows of ``A`` and ``B``."""
    return hyper.amplitude * np.exp(-0.5 * _sqdist(np.asarray(A, float), np.asarray(B, float),
                                                   hyper.lengthscales))


@dataclass(eq=False)
class KernelBundle:
    """Kernel matrices for a block of inputs against the inducing set.

    ``Kmm`` holds signal covariance plus noise and jitter on the diagonal,
    ``Knm`` the noise-free cross covariance, ``kdiag`` the prior variances
    including noise, ``fitc_diag`` the FITC conditional variances ``s_i`` and
    ``upsilon`` the projections ``Kmm^{-1} K_{m i}`` as columns.
    """

    hyper: Hyperparameters
    X: np.ndarray
    Smm: np.ndarray
    Kmm: np.ndarray
    chol: np.ndarray
    jitter: float
    Knm: np.ndarray
    kdiag: np.ndarray
    fitc_diag: np.ndarray
    upsilon: np.ndarray
    version: int

    @property
    def n(self) -> int:
        return self.Knm.shape[0]

    @property
    def m(self) -> int:
        return self.Kmm.shape[0]

    def solve(self, B):
        """``Kmm^{-1} B`` via the cached Cholesky factor."""
        return linalg.cho_solve((self.chol, True), B, check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.log(np.diag(self.chol)).sum())

    def with_rows(self, X) -> "KernelBundle":
        """Bundle for other inputs sharing this bundle's inducing factorization."""
        return _rows_bundle(self.hyper, np.asarray(X, float), self.Smm, self.Kmm, self.chol,
                            self.jitter, self.version)


def _factor_inducing(hyper: Hyperparameters):
    Z = hyper.inducing_points
    Smm = cross_kernel(Z, Z, hyper)
    amp = hyper.amplitude
    base = Smm + hyper.noise * np.eye(hyper.m)
    rel = JITTER_REL
    while True:
        jitter = rel * amp
        Kmm = base + jitter * np.eye(hyper.m)
        try:
            chol = linalg.cholesky(Kmm, lower=True, check_finite=False)
            if np.all(np.isfinite(chol)):
                return Smm, Kmm, chol, jitter
        except linalg.LinAlgError:
            pass
        rel *= 10.0
        if rel > JITTER_MAX_REL * (1 + 1e-9):
            cond = np.linalg.cond(base) if np.all(np.isfinite(base)) else np.inf
            raise KernelError(
                f"inducing covariance not positive definite after jitter {JITTER_MAX_REL:g}*amplitude "
                f"(condition number {cond:.3g})"
            )


def _rows_bundle(hyper, X, Smm, Kmm, chol, jitter, version):
    Knm = cross_kernel(X, hyper.inducing_points, hyper)
    upsilon = linalg.cho_solve((chol, True), Knm.T, check_finite=False)
    kdiag = np.full(X.shape[0], hyper.amplitude + hyper.noise)
    fitc = kdiag - np.einsum("ij,ji->i", Knm, upsilon)
    fitc = np.maximum(fitc, FITC_FLOOR)
    return KernelBundle(hyper, X, Smm, Kmm, chol, jitter, Knm, kdiag, fitc, upsilon, version)


def build_bundle(X, hyper: Hyperparameters) -> KernelBundle:
    """Evaluate and factorize every kernel quantity needed for inference at ``X``."""
    if hyper.m < 1:
        raise ValueError("need at least one inducing point")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Smm, Kmm, chol, jitter = _factor_inducing(hyper)
    return _rows_bundle(hyper, X, Smm, Kmm, chol, jitter, next(_bundle_counter))


def grad_bundle(X, hyper: Hyperparameters, j: int, jitter: float | None = None):
    """Dense derivatives ``(dKmm, dKnm, dkdiag)`` with respect to flat parameter ``j``.

    The jitter is proportional to the amplitude, so it contributes to the
    amplitude derivative of ``Kmm``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = hyper.inducing_points
    n, m, d = X.shape[0], hyper.m, hyper.d
    if jitter is None:
        jitter = _factor_inducing(hyper)[3]
    Smm = cross_kernel(Z, Z, hyper)
    Snm = cross_kernel(X, Z, hyper)
    if j < d:
        ell2 = hyper.lengthscales[j] ** 2
        dmm = Smm * (Z[:, j, None] - Z[None, :, j]) ** 2 / ell2
        dnm = Snm * (X[:, j, None] - Z[None, :, j]) ** 2 / ell2
        return dmm, dnm, np.zeros(n)
    if j == hyper.amplitude_index:
        return Smm + jitter * np.eye(m), Snm, np.full(n, hyper.amplitude)
    if j == hyper.noise_index:
        return hyper.noise * np.eye(m), np.zeros((n, m)), np.full(n, hyper.noise)
    if not 0 <= j < hyper.size:
        raise IndexError(f"parameter index {j} out of range")
    r, c = divmod(j - d - 2, d)
    ell2 = hyper.lengthscales[c] ** 2
    dmm = np.zeros((m, m))
    row = Smm[r] * (Z[:, c] - Z[r, c]) / ell2
    dmm[r, :] = row
    dmm[:, r] = row
    dmm[r, r] = 0.0
    dnm = np.zeros((n, m))
    dnm[:, r] = Snm[:, r] * (X[:, c] - Z[r, c]) / ell2
    return dmm, dnm, np.zeros(n)


def contract_gradient(bundle: KernelBundle, G_nm, g_diag, G_mm) -> np.ndarray:
    """Gradient vector ``sum(G_nm*dKnm) + g_diag.dkdiag + sum(G_mm*dKmm)`` for every parameter.

    ``G_mm`` must be symmetric. Uses the structure of the squared-exponential
    derivatives so the cost is O(n m d + m^2 d).
    """
    hyper = bundle.hyper
    X, Z = bundle.X, hyper.inducing_points
    ell2 = hyper.lengthscales ** 2
    P = G_nm * bundle.Knm
    Q = G_mm * bundle.Smm
    Prow, Pcol = P.sum(1), P.sum(0)
    Qrow = Q.sum(1)

    g_ell = (Prow @ X ** 2 - 2.0 * np.einsum("ic,ic->c", X, P @ Z) + Pcol @ Z ** 2
             + 2.0 * (Qrow @ Z ** 2 - np.einsum("rc,rc->c", Z, Q @ Z))) / ell2
    trace_g = float(np.trace(G_mm))
    sum_diag = float(np.sum(g_diag))
    g_amp = P.sum() + Q.sum() + bundle.jitter * trace_g + hyper.amplitude * sum_diag
    g_noise = hyper.noise * (trace_g + sum_diag)
    g_Z = (P.T @ X - Pcol[:, None] * Z + 2.0 * (Q @ Z - Qrow[:, None] * Z)) / ell2
    return np.concatenate([g_ell, [g_amp, g_noise], g_Z.ravel()])


def initial_hyperparameters(X, inducing_points, seed: int = 0, max_points: int = 1000,
                            noise: float = 0.1) -> Hyperparameters:
    """Median-distance length-scales per dimension, unit amplitude, noise 0.1."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] > max_points:
        X = X[np.random.default_rng(seed).choice(X.shape[0], max_points, replace=False)]
    logs = np.zeros(X.shape[1])
    iu = np.triu_indices(X.shape[0], 1)
    for c in range(X.shape[1]):
        dist = np.abs(X[:, c, None] - X[None, :, c])[iu]
        med = np.median(dist) if dist.size else 0.0
        logs[c] = np.log(med) if med > 0 else 0.0
    return Hyperparameters(logs, 0.0, np.log(noise), inducing_points)
