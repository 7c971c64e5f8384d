"""Sampling-based predictive uncertainty and multi-head fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .server import GlobalState

PLAIN = "plain"
UNCERTAINTY = "uncertainty-weighted"
MC_DROPOUT = "mc-dropout"
MODES = (PLAIN, UNCERTAINTY, MC_DROPOUT)


@dataclass
class UncertaintyField:
    """Diagonals of the aleatoric/epistemic matrices, shape (N, C, H, W), and their trace (N, H, W)."""

    aleatoric: np.ndarray
    epistemic: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return (self.aleatoric + self.epistemic).sum(axis=1)


@dataclass
class FusedPrediction:
    proba: np.ndarray  # (N, L, H, W) over the global label space
    uncertainty: Optional[UncertaintyField] = None

    @property
    def labels(self) -> np.ndarray:
        return self.proba.argmax(axis=1)

    @property
    def confidence(self) -> np.ndarray:
        return self.proba.max(axis=1)


def sample_model(state: GlobalState, seed) -> np.ndarray:
    """One draw ``theta + eps``, ``eps ~ N(0, diag(sigma2))``."""
    rng = np.random.default_rng(seed)
    return state.theta + rng.standard_normal(state.theta.shape) * np.sqrt(state.sigma2)


def predictive_mean(samples: Sequence[np.ndarray], x, head, spec: nn.ModelSpec):
    """Average softmax over sampled models; returns ``(p_bar, p_hat)`` with ``p_hat`` stacked (K, N, C, H, W)."""
    if len(samples) == 0:
        raise ValueError("need at least one sampled model")
    p_hat = np.stack([nn.softmax(nn.forward(th, x, head, spec)) for th in samples])
    return p_hat.mean(axis=0), p_hat


def decompose_uncertainty(p_hat) -> UncertaintyField:
    """Per-class aleatoric and epistemic variances from K probability samples.

    ``p_hat`` is (K, N, C, ...) with the class axis at position 2. Only the
    diagonals are kept: aleatoric ``mean_k p_k(1 - p_k)``, epistemic
    ``mean_k (p_k - p_bar)^2``.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p_hat.ndim < 3 or p_hat.shape[0] == 0:
        raise ValueError("expected K >= 1 probability samples shaped (K, N, C, ...)")
    # centred on the first draw so identical samples give exactly zero spread
    p_bar = p_hat[0] + (p_hat - p_hat[0]).mean(axis=0)
    aleatoric = (p_hat - p_hat * p_hat).mean(axis=0)
    epistemic = ((p_hat - p_bar) ** 2).mean(axis=0)
    return UncertaintyField(np.maximum(aleatoric, 0.0), epistemic)


def normalize_per_image(u) -> np.ndarray:
    """Min-max scale each (H, W) map of an (N, H, W) stack to [0, 1]; flat maps become 0."""
    u = np.asarray(u, dtype=np.float64)
    lo = u.min(axis=(1, 2), keepdims=True)
    span = u.max(axis=(1, 2), keepdims=True) - lo
    return np.divide(u - lo, span, out=np.zeros_like(u), where=span > 0)


def fuse_heads(head_probs: Sequence[np.ndarray], head_labels: Sequence[Sequence[int]], n_labels: int,
               uncertainty: Optional[UncertaintyField] = None, reweight: bool = False,
               head_uncertainty: Optional[Sequence[UncertaintyField]] = None,
               strict: bool = True) -> FusedPrediction:
    """Merge heads with different label sets into one global-label distribution.

    Each global label's probability is the mean over the heads that predict it.
    With ``reweight`` the background channel is scaled by ``1 - u`` where ``u``
    is the total uncertainty min-max normalized per image; the result is then
    renormalized. Pass per-head fields via ``head_uncertainty`` to have them
    fused into the global label space first. With ``strict=False`` labels no
    head predicts get probability 0 instead of raising.
    """
    if not head_probs:
        raise ValueError("no heads to fuse")
    n, _, h, w = head_probs[0].shape
    acc = np.zeros((n, n_labels, h, w))
    count = np.zeros(n_labels)
    if head_uncertainty is not None:
        alea = np.zeros_like(acc)
        epi = np.zeros_like(acc)
    for i, (p, labels) in enumerate(zip(head_probs, head_labels)):
        idx = list(labels)
        acc[:, idx] += p
        count[idx] += 1
        if head_uncertainty is not None:
            alea[:, idx] += head_uncertainty[i].aleatoric
            epi[:, idx] += head_uncertainty[i].epistemic
    missing = np.flatnonzero(count == 0)
    if missing.size and strict:
        raise ValueError(f"labels {missing.tolist()} are predicted by no head")
    denom = np.maximum(count, 1)[None, :, None, None]
    proba = acc / denom
    if head_uncertainty is not None:
        uncertainty = UncertaintyField(alea / denom, epi / denom)
    if reweight and uncertainty is not None:
        u_hat = normalize_per_image(uncertainty.total)
        proba[:, 0] *= 1.0 - u_hat
    proba /= proba.sum(axis=1, keepdims=True)
    return FusedPrediction(proba, uncertainty)


def mc_dropout_sample(theta, x, head, rate: float, seed, spec: nn.ModelSpec) -> np.ndarray:
    """Softmax of one forward pass under a fresh dropout mask."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return nn.softmax(nn.forward(theta, x, head, spec))
    mask = nn.dropout_mask(spec, len(x), rate, np.random.default_rng(seed))
    return nn.softmax(nn.forward(theta, x, head, spec, dropout_mask=mask))


# ---------------------------------------------------------------- pipelines


def _all_head_probs(theta, x, spec, mask=None):
    lay = nn.layout(spec)
    theta, x = nn._check(theta, x, lay)
    feat, _ = nn._backbone_forward(theta, lay, x.transpose(0, 2, 3, 1))
    if mask is not None:
        feat = feat * mask
    return [nn.softmax(nn._conv_forward(theta, conv, feat)[0], axis=-1).transpose(0, 3, 1, 2) for conv in lay.heads]


def predict(state: GlobalState, x, spec: nn.ModelSpec, mode: str = PLAIN, n_samples: int = 10, seed=0,
            heads: Optional[Sequence[int]] = None, dropout_rate: Optional[float] = None,
            reweight: bool = True) -> FusedPrediction:
    """Fused prediction over ``heads`` (default all) for one of the inference modes.

    ``plain`` runs the mean model once without reweighting. ``uncertainty-weighted``
    draws ``n_samples`` models from the global distribution; ``mc-dropout``
    draws dropout masks on the mean model instead. Both average the per-sample
    softmax, decompose the uncertainty and reweight the fused background.
    """
    if mode not in MODES:
        raise ValueError(f"unknown inference mode {mode!r}")
    heads = list(range(len(spec.heads))) if heads is None else [spec.head(h)[0] for h in heads]
    labels = [spec.heads[i].labels for i in heads]
    x = np.asarray(x, dtype=np.float64)
    if mode == PLAIN:
        probs = _all_head_probs(state.theta, x, spec)
        return fuse_heads([probs[i] for i in heads], labels, spec.n_labels, strict=False)
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rate = spec.dropout if dropout_rate is None else dropout_rate
    entropy = [int(v) for v in np.atleast_1d(seed)]
    per_sample = []
    for k in range(n_samples):
        sk = np.random.SeedSequence(entropy + [k]).generate_state(1)[0]
        if mode == UNCERTAINTY:
            probs = _all_head_probs(sample_model(state, sk), x, spec)
        else:
            mask = nn.dropout_mask(spec, len(x), rate, np.random.default_rng(sk)) if rate > 0 else None
            probs = _all_head_probs(state.theta, x, spec, mask)
        per_sample.append([probs[i] for i in heads])
    head_p = [np.stack([s[j] for s in per_sample]) for j in range(len(heads))]
    p_bar = [p.mean(axis=0) for p in head_p]
    fields = [decompose_uncertainty(p) for p in head_p]
    return fuse_heads(p_bar, labels, spec.n_labels, reweight=reweight, head_uncertainty=fields, strict=False)
