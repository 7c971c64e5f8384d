"""The three training regimes: federated, centralized and standalone."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .client import NO_VARIANCE, ClientConfig, batch_sampler, local_round, poly_lr, sgd_step
from .server import FEDAVG, FIVA, AggregationConfig, ClientUpdate, GlobalState, aggregate, broadcast
from .synthdata import ClientDataset
from .welford import FIVA_G, FIVA_P, VarianceTracker

logger = logging.getLogger(__name__)

STRATEGIES = (FEDAVG, FIVA_G, FIVA_P)


@dataclass
class TrainingConfig:
    """Local optimiser settings shared by every client."""

    local_steps: int = 20
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    poly_exponent: float = 0.9
    dropout: float = 0.0
    sigma2_init: float = 1.0


def variance_mode(strategy: str) -> str:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return NO_VARIANCE if strategy == FEDAVG else strategy


def aggregation_for(strategy: str, lam: float, lo: float, hi: float) -> AggregationConfig:
    variance_mode(strategy)
    return AggregationConfig(FEDAVG if strategy == FEDAVG else FIVA, lam, lo, hi)


def client_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def model_spec_for(datasets: Sequence[ClientDataset], n_labels: int, height: int, width: Optional[int] = None,
                   **model_kw) -> nn.ModelSpec:
    """One head per training client, named after it."""
    heads = tuple(nn.HeadSpec(d.name, d.head_labels) for d in datasets)
    return nn.ModelSpec(heads=heads, n_labels=n_labels, height=height, width=width or height, **model_kw).validate()


def _quantizer(dtype) -> Callable[[GlobalState], GlobalState]:
    """Round the state to what a checkpoint of ``dtype`` stores, so resume is exact."""
    dt = np.dtype(dtype)
    if dt == np.float64:
        return lambda s: s
    return lambda s: GlobalState(s.theta.astype(dt).astype(np.float64),
                                 s.sigma2.astype(dt).astype(np.float64), s.round)


RoundHook = Callable[[GlobalState, float], None]


def run_federated(datasets: Sequence[ClientDataset], spec: nn.ModelSpec, strategy: str, training: TrainingConfig,
                  aggregation: AggregationConfig, rounds: int, seed: int, start: Optional[GlobalState] = None,
                  workers: int = 1, state_dtype="float64", on_round: Optional[RoundHook] = None) -> GlobalState:
    """R rounds of broadcast, local training and aggregation.

    Each client's randomness is derived from ``(seed, client index)`` and the
    round, so the result does not depend on ``workers``. ``start`` resumes
    from a saved state.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    for d in datasets:
        if d.provenance == "holdout":
            raise ValueError(f"hold-out dataset {d.name!r} passed as a training client")
    mode = variance_mode(strategy)
    quantize = _quantizer(state_dtype)
    state = start.copy() if start is not None else quantize(
        GlobalState.initial(nn.init_model(spec, seed), training.sigma2_init))
    size = state.theta.size
    configs = [
        ClientConfig(d.name, len(d.train_idx), training.local_steps, training.batch_size, training.lr,
                     training.poly_exponent, rounds * training.local_steps, training.momentum, training.nesterov,
                     mode, client_seed(seed, i), training.dropout, aggregation.sigma2_min, aggregation.sigma2_max)
        for i, d in enumerate(datasets)
    ]
    trackers = [VarianceTracker(size, mode, aggregation.sigma2_min, aggregation.sigma2_max)
                if mode != NO_VARIANCE else None for _ in datasets]

    def one(i, copy):
        return local_round(copy, configs[i], datasets[i], spec, tracker=trackers[i])

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while state.round < rounds:
            t0 = time.perf_counter()
            copies = broadcast(state, len(datasets))
            if pool is None:
                updates = [one(i, c) for i, c in enumerate(copies)]
            else:
                updates = list(pool.map(one, range(len(datasets)), copies))
            state = quantize(aggregate(updates, state, aggregation))
            elapsed = time.perf_counter() - t0
            logger.info("round %d/%d done in %.2fs", state.round, rounds, elapsed)
            if on_round is not None:
                on_round(state, elapsed)
    finally:
        if pool is not None:
            pool.shutdown()
    return state


def run_centralized(datasets: Sequence[ClientDataset], spec: nn.ModelSpec, strategy: str, training: TrainingConfig,
                    aggregation: AggregationConfig, rounds: int, seed: int, start: Optional[GlobalState] = None,
                    state_dtype="float64", on_round: Optional[RoundHook] = None) -> GlobalState:
    """Joint training on pooled data, each batch routed through its dataset's head.

    A round is ``local_steps * n_clients`` steps, so the step budget matches the
    federated run. Batches come from client ``i`` with probability
    proportional to its size. With a FIVA strategy the variance is tracked per
    round and folded in as a single-client update.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    mode = variance_mode(strategy)
    quantize = _quantizer(state_dtype)
    state = start.copy() if start is not None else quantize(
        GlobalState.initial(nn.init_model(spec, seed), training.sigma2_init))
    sizes = np.array([len(d.train_idx) for d in datasets], dtype=np.float64)
    probs = sizes / sizes.sum()
    per_round = training.local_steps * len(datasets)
    total = rounds * per_round
    seeds = [client_seed(seed, i) for i in range(len(datasets))]
    tracker = VarianceTracker(state.theta.size, mode, aggregation.sigma2_min, aggregation.sigma2_max) \
        if mode != NO_VARIANCE else None
    while state.round < rounds:
        t0 = time.perf_counter()
        r = state.round
        rng = np.random.default_rng([seed, r, 11])
        picks = rng.choice(len(datasets), size=per_round, p=probs)
        theta = state.theta.copy()
        velocity = np.zeros_like(theta) if training.momentum > 0 else None
        drop_rng = np.random.default_rng([seed, r, 7])
        if tracker is not None:
            tracker.reset()
        lr_sq = 0.0
        for t, i in enumerate(picks):
            d = datasets[i]
            # indexing by the global step keeps every batch a pure function of (seed, step)
            batch = batch_sampler(d, training.batch_size, seeds[i], r * per_round + t)
            if batch.provenance == "holdout":
                raise ValueError("hold-out data reached the training loop")
            mask = nn.dropout_mask(spec, len(batch.indices), training.dropout, drop_rng) if training.dropout else None
            loss, grad = nn.backward(theta, batch.inputs, batch.targets, d.name, spec, dropout_mask=mask)
            lr = poly_lr(r * per_round + t, training.lr, total, training.poly_exponent)
            theta = sgd_step(theta, grad, lr, velocity, training.momentum, training.nesterov)
            lr_sq += lr * lr
            if tracker is not None:
                tracker.observe(theta, grad)
        if tracker is not None:
            sigma2 = tracker.finalize(state.sigma2, np.sqrt(lr_sq / per_round))
        else:
            sigma2 = np.ones_like(theta)
        update = ClientUpdate(theta, sigma2, int(sizes.sum()), None, "pooled")
        state = quantize(aggregate([update], state, aggregation))
        elapsed = time.perf_counter() - t0
        logger.info("centralized round %d/%d done in %.2fs", state.round, rounds, elapsed)
        if on_round is not None:
            on_round(state, elapsed)
    return state
