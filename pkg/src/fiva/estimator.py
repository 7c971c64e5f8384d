"""scikit-learn style front end for federated training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import check_clients, check_images, check_in, check_label_maps
from .inference import MODES, PLAIN, UNCERTAINTY, predict
from .metrics import dice_per_label
from .server import FEDAVG
from .training import STRATEGIES, TrainingConfig, aggregation_for, model_spec_for, run_centralized, run_federated
from .welford import FIVA_P, SIGMA2_MAX, SIGMA2_MIN


class FederatedSegmenter(BaseEstimator):
    """Multi-head segmentation model trained across clients.

    ``fit`` takes a list of :class:`~fiva.synthdata.ClientDataset`, one per
    client; each gets its own head over its annotated labels. Prediction fuses
    all heads into the global label space. ``inference="auto"`` uses
    uncertainty weighting for FIVA strategies and a plain pass for FedAvg.
    """

    def __init__(self, strategy=FIVA_P, regime="federated", rounds=30, local_steps=20, batch_size=4, lr=0.01,
                 momentum=0.99, nesterov=True, poly_exponent=0.9, lam=0.95, sigma2_init=1.0,
                 sigma2_min=SIGMA2_MIN, sigma2_max=SIGMA2_MAX, widths=(8, 16, 32), activation="relu",
                 dropout=0.2, train_dropout=0.0, inference="auto", n_samples=10, n_labels=None, workers=1,
                 random_state=0):
        self.strategy = strategy
        self.regime = regime
        self.rounds = rounds
        self.local_steps = local_steps
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.poly_exponent = poly_exponent
        self.lam = lam
        self.sigma2_init = sigma2_init
        self.sigma2_min = sigma2_min
        self.sigma2_max = sigma2_max
        self.widths = widths
        self.activation = activation
        self.dropout = dropout
        self.train_dropout = train_dropout
        self.inference = inference
        self.n_samples = n_samples
        self.n_labels = n_labels
        self.workers = workers
        self.random_state = random_state

    def fit(self, X, y=None):
        datasets = check_clients(X)
        check_in(self.strategy, STRATEGIES, "strategy")
        check_in(self.regime, ("federated", "centralized"), "regime")
        self._mode()
        seen = max(max(d.labels) for d in datasets)
        n_labels = self.n_labels if self.n_labels is not None else seen + 1
        if n_labels <= seen:
            raise ValueError(f"n_labels={n_labels} but clients annotate label {seen}")
        _, h, w = datasets[0].images.shape[1:]
        self.spec_ = model_spec_for(datasets, n_labels, h, w, widths=tuple(self.widths), activation=self.activation,
                                    dropout=self.dropout)
        training = TrainingConfig(self.local_steps, self.batch_size, self.lr, self.momentum, self.nesterov,
                                  self.poly_exponent, self.train_dropout, self.sigma2_init)
        agg = aggregation_for(self.strategy, self.lam, self.sigma2_min, self.sigma2_max)
        seed = int(self.random_state or 0)
        if self.regime == "federated":
            self.state_ = run_federated(datasets, self.spec_, self.strategy, training, agg, self.rounds, seed,
                                        workers=self.workers)
        else:
            self.state_ = run_centralized(datasets, self.spec_, self.strategy, training, agg, self.rounds, seed)
        self.heads_ = [hd.name for hd in self.spec_.heads]
        self.classes_ = np.arange(n_labels)
        return self

    def _mode(self) -> str:
        if self.inference == "auto":
            return PLAIN if self.strategy == FEDAVG else UNCERTAINTY
        check_in(self.inference, MODES, "inference")
        if self.inference == UNCERTAINTY and self.strategy == FEDAVG:
            raise ValueError("uncertainty-weighted inference needs a FIVA strategy")
        return self.inference

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("FederatedSegmenter is not fitted yet; call fit first")

    def _fused(self, X):
        self._check_fitted()
        X = check_images(X, self.spec_.height, self.spec_.width)
        return predict(self.state_, X, self.spec_, self._mode(), self.n_samples, seed=int(self.random_state or 0))

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel probabilities over the global labels, shaped (N, L, H, W)."""
        return self._fused(X).proba

    def predict(self, X) -> np.ndarray:
        return self._fused(X).labels

    def predict_uncertainty(self, X) -> np.ndarray:
        """Total (aleatoric + epistemic) uncertainty per pixel; zero for plain inference."""
        fused = self._fused(X)
        if fused.uncertainty is None:
            return np.zeros(fused.labels.shape)
        return fused.uncertainty.total

    def score(self, X, y) -> float:
        """Mean Dice over the foreground labels present in ``y``."""
        pred = self.predict(X)
        y = check_label_maps(y, len(pred), pred.shape[1:])
        scores = dice_per_label(pred, y, self.classes_[1:])
        return float(np.mean(list(scores.values()))) if scores else float("nan")
