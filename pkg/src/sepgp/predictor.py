"""Predictive distribution for new inputs and test-set metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .kernel import cross_kernel
from .probit import log_phi, phi

__all__ = ["LatentPrediction", "EvalReport", "predict_latent", "predict_proba", "evaluate"]


@dataclass
class LatentPrediction:
    mean: np.ndarray
    variance: np.ndarray


@dataclass
class EvalReport:
    error_rate: float
    avg_neg_log_likelihood: float
    n_test: int


def predict_latent(X_star, model) -> LatentPrediction:
    """Mean and variance of ``f(x*)`` under ``q``, for already standardized inputs.

    A single point gives 0-d arrays.
    """
    X_star = np.asarray(X_star, dtype=float)
    single = X_star.ndim == 1
    X_star = np.atleast_2d(X_star)
    bundle, post = model.bundle, model.posterior
    if post.bundle_version != bundle.version:
        raise RuntimeError("model posterior and kernel bundle disagree")
    k = cross_kernel(X_star, model.hyper.inducing_points, model.hyper)
    mean = k @ post.weights
    prior_part = linalg.solve_triangular(bundle.chol, k.T, lower=True, check_finite=False)
    post_part = linalg.solve_triangular(post.chol, k.T, lower=True, check_finite=False)
    var = model.hyper.amplitude - ((prior_part ** 2).sum(0) - (post_part ** 2).sum(0))
    var = np.maximum(var, 0.0)
    if single:
        return LatentPrediction(mean[0], var[0])
    return LatentPrediction(mean, var)


def _probit_arg(pred: LatentPrediction):
    return pred.mean / np.sqrt(pred.variance + 1.0)


def predict_proba(X_star, model):
    """Probability that the label is +1."""
    return phi(_probit_arg(predict_latent(X_star, model)))


def evaluate(model, X_test, y_test) -> EvalReport:
    """Error rate (ties predict +1) and average negative log predictive probability."""
    y_test = np.asarray(y_test, dtype=float)
    if y_test.size == 0:
        raise ValueError("empty test set")
    z = _probit_arg(predict_latent(np.atleast_2d(X_test), model))
    pred = np.where(z >= 0, 1.0, -1.0)
    return EvalReport(float(np.mean(pred != y_test)), float(-np.mean(log_phi(y_test * z))),
                      int(y_test.size))
