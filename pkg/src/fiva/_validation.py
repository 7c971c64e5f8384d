"""Input checks shared by the estimator and the harness."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .synthdata import ClientDataset


def check_images(X, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Return ``X`` as a finite float64 (N, 1, H, W) array; (N, H, W) input gains the channel axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected images shaped (N, H, W) or (N, 1, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or inf")
    if height is not None and X.shape[2:] != (height, width):
        raise ValueError(f"images are {X.shape[2]}x{X.shape[3]}, the model expects {height}x{width}")
    return X


def check_label_maps(y, n_images: int, shape) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_images, *shape):
        raise ValueError(f"label maps shaped {y.shape}, expected {(n_images, *shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError("label maps must hold integer labels")
        y = y.astype(np.int64)
    if y.min(initial=0) < 0:
        raise ValueError("labels must be non-negative")
    return y


def check_clients(datasets) -> list:
    """A non-empty list of training ``ClientDataset`` objects with unique names and one grid size."""
    if isinstance(datasets, ClientDataset):
        datasets = [datasets]
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one client dataset")
    for d in datasets:
        if not isinstance(d, ClientDataset):
            raise TypeError(f"expected ClientDataset, got {type(d).__name__}")
        if d.provenance == "holdout":
            raise ValueError(f"{d.name!r} is a hold-out dataset and cannot be used for training")
        if len(d.train_idx) == 0:
            raise ValueError(f"client {d.name!r} has no training samples")
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise ValueError(f"client names must be unique: {names}")
    shapes = {d.images.shape[1:] for d in datasets}
    if len(shapes) != 1:
        raise ValueError(f"clients disagree on image shape: {sorted(shapes)}")
    return datasets


def check_in(value, allowed: Sequence, name: str):
    if value not in allowed:
        raise ValueError(f"{name} must be one of {tuple(allowed)}, got {value!r}")
    return value
