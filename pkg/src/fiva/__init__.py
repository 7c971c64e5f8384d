"""Federated inverse-variance averaging (FIVA) with uncertainty-aware inference."""

from .server import FEDAVG, GlobalState
from .welford import FIVA_G, FIVA_P

__version__ = "0.1.0"

__all__ = ["FEDAVG", "FIVA_G", "FIVA_P", "GlobalState", "__version__"]
