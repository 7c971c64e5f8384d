"""Online per-parameter mean/variance (Welford) and FIVA variance finalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA2_MIN = 1e-8
SIGMA2_MAX = 1e2

FIVA_G = "FIVA-G"
FIVA_P = "FIVA-P"


class WelfordAccumulator:
    """Running count, mean and sum of squared deviations over a vector stream.

    State is exactly one counter and two length-``size`` arrays, whatever the
    stream length.

    >>> acc = WelfordAccumulator(1)
    >>> for v in (1.0, 2.0, 3.0):
    ...     acc.update(np.array([v]))
    >>> acc.mean, acc.m2
    (array([2.]), array([2.]))
    """

    __slots__ = ("t", "mean", "m2")

    def __init__(self, size: int):
        self.t = 0
        self.mean = np.zeros(size)
        self.m2 = np.zeros(size)

    def update(self, x) -> "WelfordAccumulator":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.mean.shape:
            raise ValueError(f"expected a vector of shape {self.mean.shape}, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite value in Welford update")
        self.t += 1
        delta = x - self.mean
        self.mean += delta / self.t
        self.m2 += delta * (x - self.mean)
        return self

    def reset(self) -> None:
        self.t = 0
        self.mean.fill(0.0)
        self.m2.fill(0.0)

    def variance(self) -> np.ndarray:
        """Population variance ``m2 / t``."""
        if self.t == 0:
            raise ValueError("no data: variance of an empty stream")
        return self.m2 / self.t

    def state_arrays(self) -> tuple[np.ndarray, ...]:
        return (self.mean, self.m2)


def welford_update(acc: WelfordAccumulator, x) -> WelfordAccumulator:
    return acc.update(x)


def finalize_variance(acc: WelfordAccumulator) -> np.ndarray:
    return acc.variance()


@dataclass
class ClientVariance:
    sigma2: np.ndarray
    mode: str


def clamp(sigma2, lo: float = SIGMA2_MIN, hi: float = SIGMA2_MAX) -> np.ndarray:
    return np.clip(np.asarray(sigma2, dtype=np.float64), lo, hi)


def finalize_fiva_g(sigma2_prev, grad_var, T: int, eta: float, lo=SIGMA2_MIN, hi=SIGMA2_MAX) -> ClientVariance:
    """Parameter variance from gradient variance: ``prev + T * eta**2 * grad_var``.

    Treats the T gradient noises as independent, so their variances add.
    """
    sigma2_prev = np.asarray(sigma2_prev, dtype=np.float64)
    grad_var = np.asarray(grad_var, dtype=np.float64)
    if T < 1:
        raise ValueError("T must be >= 1")
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    if np.any(sigma2_prev < 0) or np.any(grad_var < 0):
        raise ValueError("variances must be non-negative")
    return ClientVariance(clamp(sigma2_prev + T * eta**2 * grad_var, lo, hi), FIVA_G)


def finalize_fiva_p(acc: WelfordAccumulator, lo=SIGMA2_MIN, hi=SIGMA2_MAX) -> ClientVariance:
    """Parameter variance read directly off the tracked parameter trajectory."""
    if acc.t < 2:
        raise ValueError("FIVA-P needs at least two tracked parameter vectors")
    return ClientVariance(clamp(acc.variance(), lo, hi), FIVA_P)


class VarianceTracker:
    """Per-client tracker: a Welford accumulator plus the finalized variance.

    These three parameter-sized arrays are the whole memory overhead of FIVA on
    a client.
    """

    def __init__(self, size: int, mode: str, lo: float = SIGMA2_MIN, hi: float = SIGMA2_MAX):
        if mode not in (FIVA_G, FIVA_P):
            raise ValueError(f"unknown variance mode {mode!r}")
        self.mode = mode
        self.lo, self.hi = lo, hi
        self.acc = WelfordAccumulator(size)
        self.sigma2 = np.ones(size)

    def reset(self) -> None:
        self.acc.reset()

    def observe(self, theta, grad) -> None:
        self.acc.update(grad if self.mode == FIVA_G else theta)

    def finalize(self, sigma2_prev, eta: float) -> np.ndarray:
        if self.mode == FIVA_G:
            out = finalize_fiva_g(sigma2_prev, self.acc.variance(), self.acc.t, eta, self.lo, self.hi)
        else:
            out = finalize_fiva_p(self.acc, self.lo, self.hi)
        self.sigma2[...] = out.sigma2
        return self.sigma2.copy()

    def state_arrays(self) -> tuple[np.ndarray, ...]:
        return (*self.acc.state_arrays(), self.sigma2)
