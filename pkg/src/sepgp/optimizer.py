"""Gradient-ascent step rules for the hyper-parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AdaptiveRate", "Adadelta", "make_optimizer", "optimizer_from_dict"]

RATE_MIN, RATE_MAX = 1e-10, 1e3


@dataclass
class AdaptiveRate:
    """Per-parameter learning rates grown by 2% while the gradient sign holds and halved on a flip.

    A zero gradient leaves the rate alone and resets the stored sign.
    """

    rates: np.ndarray
    signs: np.ndarray = None
    grow: float = 1.02
    shrink: float = 0.5

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float).copy()
        if self.signs is None:
            self.signs = np.zeros_like(self.rates)
        self.signs = np.asarray(self.signs, dtype=float).copy()

    @classmethod
    def create(cls, size: int, rate: float = 1e-2, rates=None) -> "AdaptiveRate":
        return cls(np.full(size, rate) if rates is None else np.asarray(rates, float))

    def step(self, grad) -> np.ndarray:
        grad = np.asarray(grad, dtype=float)
        if not np.all(np.isfinite(grad)):
            raise ValueError("non-finite gradient")
        s = np.sign(grad)
        same = (s * self.signs) > 0
        flip = (s * self.signs) < 0
        self.rates = np.where(same, self.rates * self.grow, self.rates)
        self.rates = np.where(flip, self.rates * self.shrink, self.rates)
        self.rates = np.clip(self.rates, RATE_MIN, RATE_MAX)
        self.signs = s
        return self.rates * grad

    def to_dict(self) -> dict:
        return {"kind": "adaptive", "rates": self.rates.tolist(), "signs": self.signs.tolist()}


@dataclass
class Adadelta:
    """ADADELTA with ascent sign convention."""

    accum_sq_grad: np.ndarray
    accum_sq_update: np.ndarray = None
    rho: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        self.accum_sq_grad = np.asarray(self.accum_sq_grad, dtype=float).copy()
        if self.accum_sq_update is None:
            self.accum_sq_update = np.zeros_like(self.accum_sq_grad)
        self.accum_sq_update = np.asarray(self.accum_sq_update, dtype=float).copy()

    @classmethod
    def create(cls, size: int, rho: float = 0.9, eps: float = 1e-5) -> "Adadelta":
        return cls(np.zeros(size), np.zeros(size), rho, eps)

    def step(self, grad) -> np.ndarray:
        grad = np.asarray(grad, dtype=float)
        if not np.all(np.isfinite(grad)):
            raise ValueError("non-finite gradient")
        rho, eps = self.rho, self.eps
        self.accum_sq_grad = rho * self.accum_sq_grad + (1 - rho) * grad ** 2
        delta = np.sqrt(self.accum_sq_update + eps) / np.sqrt(self.accum_sq_grad + eps) * grad
        self.accum_sq_update = rho * self.accum_sq_update + (1 - rho) * delta ** 2
        return delta

    def to_dict(self) -> dict:
        return {"kind": "adadelta", "accum_sq_grad": self.accum_sq_grad.tolist(),
                "accum_sq_update": self.accum_sq_update.tolist(), "rho": self.rho, "eps": self.eps}


def make_optimizer(kind: str, size: int, rates=None):
    if kind == "adaptive":
        return AdaptiveRate.create(size, rates=rates)
    if kind == "adadelta":
        return Adadelta.create(size)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_from_dict(doc: dict):
    kind = doc["kind"]
    if kind == "adaptive":
        return AdaptiveRate(doc["rates"], doc["signs"])
    if kind == "adadelta":
        return Adadelta(doc["accum_sq_grad"], doc["accum_sq_update"], doc["rho"], doc["eps"])
    raise ValueError(f"unknown optimizer {kind!r}")
