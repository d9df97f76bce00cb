"""Numerically stable probit helpers."""

import numpy as np
from scipy import special

_SQRT2 = np.sqrt(2.0)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def log_phi(z):
    """``log Phi(z)``, accurate far into the lower tail."""
    return special.log_ndtr(z)


def phi(z):
    return special.ndtr(z)


def inv_mills(z):
    """Ratio ``N(z|0,1) / Phi(z)``.

    For negative arguments the scaled complementary error function keeps the
    ratio finite where both numerator and denominator underflow.
    """
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    neg = z < 0
    out[neg] = _SQRT_2_OVER_PI / special.erfcx(-z[neg] / _SQRT2)
    pos = ~neg
    out[pos] = np.exp(-0.5 * z[pos] ** 2) / np.sqrt(2 * np.pi) / special.ndtr(z[pos])
    return out
