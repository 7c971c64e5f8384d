"""Local client training: T mini-batch SGD steps with online variance tracking."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import nn
from .server import ClientUpdate, GlobalState
from .synthdata import ClientDataset
from .welford import FIVA_G, FIVA_P, SIGMA2_MAX, SIGMA2_MIN, VarianceTracker

logger = logging.getLogger(__name__)

NO_VARIANCE = "none"


@dataclass
class ClientConfig:
    """Local training hyperparameters of one client.

    ``total_steps`` is the PolyLR horizon (rounds * local_steps); ``momentum=0``
    gives plain SGD.
    """

    client_id: str
    n_samples: int
    local_steps: int = 20
    batch_size: int = 4
    lr: float = 0.01
    poly_exponent: float = 0.9
    total_steps: int = 600
    momentum: float = 0.99
    nesterov: bool = True
    variance_mode: str = FIVA_P
    seed: int = 0
    dropout: float = 0.0
    sigma2_min: float = SIGMA2_MIN
    sigma2_max: float = SIGMA2_MAX

    def __post_init__(self):
        if self.local_steps < 1 or self.batch_size < 1:
            raise ValueError("local_steps and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.variance_mode not in (FIVA_G, FIVA_P, NO_VARIANCE):
            raise ValueError(f"unknown variance mode {self.variance_mode!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


class Batch(NamedTuple):
    inputs: np.ndarray  # (B, C, H, W)
    targets: np.ndarray  # (B, H, W) head-channel indices
    provenance: str
    indices: np.ndarray


def poly_lr(step: int, lr0: float, total_steps: int, exponent: float = 0.9) -> float:
    """PolyLR: ``lr0 * (1 - step/total)^exponent``, zero from ``total`` on."""
    if total_steps <= 0:
        return lr0
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr0 * (1.0 - frac) ** exponent


def sgd_step(theta, grad, lr: float, velocity: Optional[np.ndarray] = None, momentum: float = 0.0,
             nesterov: bool = True) -> np.ndarray:
    """One SGD update, returning new parameters.

    With ``momentum > 0`` the buffer ``velocity`` is updated in place
    (``v <- mu*v + g``) and the step is ``g + mu*v`` (Nesterov) or ``v``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(theta):
        raise ValueError("gradient and parameter lengths differ")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    if momentum == 0.0 or velocity is None:
        return theta - lr * grad
    velocity *= momentum
    velocity += grad
    step = grad + momentum * velocity if nesterov else velocity
    return theta - lr * step


def batch_sampler(dataset: ClientDataset, batch_size: int, seed: int, step: int) -> Batch:
    """Batch ``step`` of a stream of shuffled epochs over the training split.

    A pure function of ``(seed, step)``: epoch ``e`` uses permutation
    ``rng(seed, e)`` and the trailing partial batch is dropped.
    """
    train = dataset.train_idx
    if len(train) == 0:
        raise ValueError(f"client {dataset.name!r} has no training samples")
    if batch_size > len(train):
        raise ValueError(f"batch size {batch_size} exceeds the training split ({len(train)})")
    per_epoch = len(train) // batch_size
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(train)
    idx = np.sort(perm[b * batch_size : (b + 1) * batch_size])
    return Batch(dataset.images[idx], dataset.targets[idx], dataset.provenance, idx)


def owned_mask(spec: nn.ModelSpec, head) -> np.ndarray:
    groups = nn.layout(spec).groups()
    _, hs = spec.head(head)
    return groups["backbone"] | groups[f"head:{hs.name}"]


def local_round(start: GlobalState, config: ClientConfig, data: ClientDataset, spec: Optional[nn.ModelSpec],
                head=None, round_index: Optional[int] = None,
                tracker: Optional[VarianceTracker] = None, grad_fn=None) -> ClientUpdate:
    """Run ``local_steps`` SGD steps from the broadcast state and report (theta, sigma2, n).

    The tracker sees the raw gradient (FIVA-G) or the post-step parameters
    (FIVA-P) after every step. It never feeds back into the trajectory.
    ``grad_fn(theta, batch, step)`` replaces the network's loss gradient.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.provenance == "holdout":
        raise ValueError(f"refusing to train on hold-out data ({data.name!r})")
    head = data.name if head is None else head
    r = start.round if round_index is None else round_index
    theta = np.array(start.theta, dtype=np.float64)
    if spec is not None and theta.size != nn.n_params(spec):
        raise ValueError("broadcast parameters do not match the model")
    T = config.local_steps
    mode = config.variance_mode
    if mode != NO_VARIANCE:
        tracker = tracker or VarianceTracker(theta.size, mode, config.sigma2_min, config.sigma2_max)
        tracker.reset()
    velocity = np.zeros_like(theta) if config.momentum > 0 else None
    drop_rng = np.random.default_rng([config.seed, r, 7])
    lr_sq = 0.0
    for t in range(T):
        s = r * T + t
        lr = poly_lr(s, config.lr, config.total_steps, config.poly_exponent)
        batch = batch_sampler(data, config.batch_size, config.seed, s)
        if grad_fn is not None:
            loss, grad = grad_fn(theta, batch, s)
        else:
            mask = None
            if config.dropout > 0:
                mask = nn.dropout_mask(spec, len(batch.indices), config.dropout, drop_rng)
            loss, grad = nn.backward(theta, batch.inputs, batch.targets, head, spec, dropout_mask=mask)
            if not np.isfinite(loss.total):
                raise FloatingPointError(f"client {config.client_id}: loss diverged in round {r}")
        theta = sgd_step(theta, grad, lr, velocity, config.momentum, config.nesterov)
        lr_sq += lr * lr
        if mode != NO_VARIANCE:
            tracker.observe(theta, grad)
    logger.debug("client %s round %d: last loss %s", config.client_id, r, loss)
    if mode == NO_VARIANCE:
        sigma2 = np.ones_like(theta)
    else:
        # PolyLR changes the rate within a round; T*eta^2 becomes sum_t eta_t^2
        sigma2 = tracker.finalize(start.sigma2, np.sqrt(lr_sq / T))
    mask = owned_mask(spec, head) if spec is not None else None
    return ClientUpdate(theta, sigma2, config.n_samples, mask, config.client_id)
