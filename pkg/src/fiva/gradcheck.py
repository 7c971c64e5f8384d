"""Central finite-difference gradients for checking backprop."""
from __future__ import annotations

import numpy as np


def finite_difference_grad(f, theta, step: float = 1e-5, indices=None) -> np.ndarray:
    """``(f(theta + h e_i) - f(theta - h e_i)) / 2h`` for every coordinate, or only ``indices``."""
    theta = np.array(theta, dtype=np.float64)
    idx = np.arange(theta.size) if indices is None else np.asarray(indices)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = theta[i]
        theta[i] = orig + step
        fp = f(theta)
        theta[i] = orig - step
        fm = f(theta)
        theta[i] = orig
        out[j] = (fp - fm) / (2 * step)
    return out


def max_relative_error(analytic, numeric, floor: float = 1e-7) -> float:
    """``max |a - n| / max(|a|, |n|, floor)``.

    The floor keeps exactly-zero entries (dead ReLUs, untouched heads) from
    dividing by zero; it sits far above the ~1e-11 cancellation noise of a
    1e-5 central difference in float64.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
