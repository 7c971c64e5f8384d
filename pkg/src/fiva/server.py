"""Server-side aggregation: FedAvg and inverse-variance (FIVA) averaging."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .welford import SIGMA2_MAX, SIGMA2_MIN, clamp

logger = logging.getLogger(__name__)

FEDAVG = "FedAvg"
FIVA = "FIVA"


@dataclass
class GlobalState:
    """Global parameter distribution (mean and diagonal variance) after ``round``."""

    theta: np.ndarray
    sigma2: np.ndarray
    round: int = 0

    @classmethod
    def initial(cls, theta, sigma2_init: float = 1.0) -> "GlobalState":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta.copy(), np.full_like(theta, sigma2_init), 0)

    def copy(self) -> "GlobalState":
        return GlobalState(self.theta.copy(), self.sigma2.copy(), self.round)


@dataclass
class ClientUpdate:
    """What a client sends after a round.

    ``mask`` marks the parameters the client actually trained (shared backbone
    plus its own head); ``None`` means all of them.
    """

    theta: np.ndarray
    sigma2: np.ndarray
    n: int
    mask: Optional[np.ndarray] = None
    client_id: str = ""


@dataclass
class AggregationConfig:
    strategy: str = FIVA
    lam: float = 0.95
    sigma2_min: float = SIGMA2_MIN
    sigma2_max: float = SIGMA2_MAX

    def __post_init__(self):
        if self.strategy not in (FEDAVG, FIVA):
            raise ValueError(f"unknown aggregation strategy {self.strategy!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("forgetting factor must lie in [0, 1]")
        if not 0.0 <= self.sigma2_min <= self.sigma2_max:
            raise ValueError("invalid variance clamp interval")


def _stack(updates: Sequence[ClientUpdate]):
    if not updates:
        raise ValueError("no client updates to aggregate")
    size = updates[0].theta.shape
    for u in updates:
        if u.theta.shape != size or u.sigma2.shape != size:
            raise ValueError("client updates have mismatched lengths")
        if u.n <= 0:
            raise ValueError("client sample counts must be positive")
    thetas = np.stack([u.theta for u in updates])
    sigma2 = np.stack([u.sigma2 for u in updates])
    masks = np.stack([np.ones(size, bool) if u.mask is None else u.mask for u in updates])
    return thetas, sigma2, masks


def relative_sizes(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Per-client, per-parameter sample share ``n_i / sum(n)``.

    The sum runs over the clients that own each parameter, so a head trained
    by a single client gets share 1 from it. Without masks this is the usual
    scalar share broadcast over parameters.
    """
    _, _, masks = _stack(updates)
    n = np.array([u.n for u in updates], dtype=np.float64)[:, None] * masks
    tot = n.sum(axis=0)
    return np.divide(n, tot, out=np.zeros_like(n), where=tot > 0)


def client_weight(n_hat, sigma2) -> np.ndarray:
    """Precision-scaled client weight ``n_hat / sigma2``."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("variances must be strictly positive (clamp first)")
    return np.asarray(n_hat, dtype=np.float64) / sigma2


def aggregate_mean(updates: Sequence[ClientUpdate], config: AggregationConfig, prev_theta=None) -> np.ndarray:
    """Weighted per-parameter mean of client parameters.

    Parameters owned by no client keep ``prev_theta``.
    """
    thetas, sigma2, masks = _stack(updates)
    n_hat = relative_sizes(updates)
    if config.strategy == FIVA:
        w = np.where(masks, client_weight(n_hat, np.where(masks, sigma2, 1.0)), 0.0)
    else:
        w = n_hat
    tot = w.sum(axis=0)
    owned = tot > 0
    out = np.zeros(thetas.shape[1]) if prev_theta is None else np.array(prev_theta, dtype=np.float64)
    out[owned] = (w * thetas).sum(axis=0)[owned] / tot[owned]
    return out


def aggregate_variance(updates: Sequence[ClientUpdate], prev_sigma2, config: AggregationConfig) -> np.ndarray:
    """Bayesian precision update with forgetting: ``(lam/prev + sum n_hat/sigma2)^-1``, clamped.

    FedAvg leaves the variance untouched.
    """
    prev_sigma2 = np.asarray(prev_sigma2, dtype=np.float64)
    if config.strategy == FEDAVG:
        return prev_sigma2.copy()
    precision = config.lam / prev_sigma2
    if updates:
        _, sigma2, masks = _stack(updates)
        n_hat = relative_sizes(updates)
        precision = precision + np.where(masks, n_hat / np.where(masks, sigma2, 1.0), 0.0).sum(axis=0)
    with np.errstate(divide="ignore"):
        out = 1.0 / precision
    return clamp(out, config.sigma2_min, config.sigma2_max)


def aggregate(updates: Sequence[ClientUpdate], prev: GlobalState, config: AggregationConfig) -> GlobalState:
    theta = aggregate_mean(updates, config, prev_theta=prev.theta)
    sigma2 = aggregate_variance(updates, prev.sigma2, config)
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("aggregated parameters are not finite")
    return GlobalState(theta, sigma2, prev.round + 1)


def broadcast(state: GlobalState, n_clients: int) -> list[GlobalState]:
    """Identical copies of the global distribution, one per client."""
    return [state.copy() for _ in range(n_clients)]
