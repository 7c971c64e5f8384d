"""Binary checkpoints of the global state.

Layout (little-endian)::

    offset  size  field
    0       8     magic b"FIVACKPT"
    8       2     schema version (uint16)
    10      2     bytes per value, 4 or 8 (uint16)
    12      4     round (uint32)
    16      8     M, number of parameters (uint64)
    24      16    strategy name, ASCII, NUL padded
    40      8     model fingerprint (first 8 bytes of SHA-256 of the layout)
    48      M*w   theta
    48+M*w  M*w   sigma2
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .server import GlobalState

MAGIC = b"FIVACKPT"
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<8sHHIQ16s8s")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    state: GlobalState
    strategy: str
    fingerprint: bytes
    itemsize: int


def fingerprint(spec: nn.ModelSpec) -> bytes:
    lay = nn.layout(spec)
    desc = repr((lay.size, [(h.name, h.labels) for h in spec.heads], spec.kind, spec.widths, spec.in_channels,
                 spec.height, spec.width, spec.activation))
    return hashlib.sha256(desc.encode()).digest()[:8]


def save_checkpoint(path, state: GlobalState, strategy: str, spec: nn.ModelSpec, dtype="float32") -> Path:
    """Write atomically: a temp file in the same directory, then rename."""
    dt = np.dtype(dtype).newbyteorder("<")
    if dt.itemsize not in _DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype}")
    name = strategy.encode("ascii")
    if len(name) > 16:
        raise CheckpointError("strategy name longer than 16 bytes")
    header = _HEADER.pack(MAGIC, SCHEMA_VERSION, dt.itemsize, state.round, state.theta.size, name, fingerprint(spec))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(np.asarray(state.theta).astype(dt).tobytes())
        f.write(np.asarray(state.sigma2).astype(dt).tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, spec: nn.ModelSpec | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, width, rnd, m, name, fp = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    if width not in _DTYPES:
        raise CheckpointError(f"{path}: bad value width {width}")
    if len(raw) != _HEADER.size + 2 * m * width:
        raise CheckpointError(f"{path}: size does not match M={m}")
    if spec is not None:
        if m != nn.n_params(spec):
            raise CheckpointError(f"{path}: checkpoint has {m} parameters, model needs {nn.n_params(spec)}")
        if fp != fingerprint(spec):
            raise CheckpointError(f"{path}: checkpoint was written for a different model layout")
    dt = _DTYPES[width]
    theta = np.frombuffer(raw, dt, m, _HEADER.size).astype(np.float64)
    sigma2 = np.frombuffer(raw, dt, m, _HEADER.size + m * width).astype(np.float64)
    return Checkpoint(GlobalState(theta, sigma2, rnd), name.rstrip(b"\0").decode("ascii"), fp, width)
