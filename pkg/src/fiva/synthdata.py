"""Synthetic heterogeneous multi-client 2-D segmentation data ("shape world").

Every image holds 1-4 non-overlapping shapes drawn from six classes. Each
training client annotates only a subset of the classes: shapes of other
classes are still drawn in its images but labelled background. Clients differ
in sample count, brightness offset and noise level. A hold-out client
annotates everything.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

SHAPES = ("disk", "ring", "square", "bar", "triangle", "cross")
# mean intensity per shape class (index 0 = background)
INTENSITY = (0.15, 0.55, 0.7, 0.45, 0.85, 0.6, 0.75)

_MAGIC = b"FIVADATA"
_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIII")


@dataclass(frozen=True)
class ClientSpec:
    name: str
    n_samples: int
    labels: tuple[int, ...]
    offset: float = 0.0
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.labels:
            raise ValueError(f"client {self.name!r}: label subset must be non-empty")
        if self.n_samples < 1:
            raise ValueError(f"client {self.name!r}: needs at least one sample")
        if not -0.2 <= self.offset <= 0.2:
            raise ValueError(f"client {self.name!r}: brightness offset outside [-0.2, 0.2]")
        if not 0.0 <= self.noise <= 0.1:
            raise ValueError(f"client {self.name!r}: noise level outside [0, 0.1]")


@dataclass(frozen=True)
class ShapeWorldSpec:
    clients: tuple[ClientSpec, ...]
    holdout: ClientSpec
    grid: int = 32
    n_foreground: int = 6
    max_shapes: int = 4

    def __post_init__(self):
        full = set(range(1, self.n_foreground + 1))
        for c in self.clients + (self.holdout,):
            if not set(c.labels) <= full:
                raise ValueError(f"client {c.name!r} uses labels outside 1..{self.n_foreground}")
        union = set().union(*(c.labels for c in self.clients))
        if union != full:
            raise ValueError("training clients must jointly annotate every foreground label")
        if set(self.holdout.labels) != union:
            raise ValueError("hold-out client must carry the union of all training labels")
        names = [c.name for c in self.clients] + [self.holdout.name]
        if len(set(names)) != len(names):
            raise ValueError("client names must be unique")
        if self.n_foreground > len(SHAPES):
            raise ValueError(f"at most {len(SHAPES)} shape classes are available")

    @property
    def n_labels(self) -> int:
        return self.n_foreground + 1

    def client(self, client_id) -> ClientSpec:
        for c in self.clients + (self.holdout,):
            if c.name == client_id:
                return c
        if isinstance(client_id, int):
            return self.clients[client_id]
        raise KeyError(client_id)


def default_spec(seed: int = 0, grid: int = 32) -> ShapeWorldSpec:
    """Five skewed training clients plus a 100-sample hold-out."""
    roster = [
        ("c0", 600, (1, 2, 3, 4), 0.0, 0.02),
        ("c1", 80, (5,), 0.15, 0.08),
        ("c2", 30, (3, 5, 6), -0.1, 0.05),
        ("c3", 500, (5, 6), -0.2, 0.03),
        ("c4", 30, (2, 3, 4, 6), 0.1, 0.1),
    ]
    clients = tuple(
        ClientSpec(name, n, labels, off, noise, seed=seed * 1000 + i + 1)
        for i, (name, n, labels, off, noise) in enumerate(roster)
    )
    holdout = ClientSpec("holdout", 100, (1, 2, 3, 4, 5, 6), 0.05, 0.06, seed=seed * 1000 + 999)
    return ShapeWorldSpec(clients, holdout, grid=grid)


@dataclass
class ClientDataset:
    """Images and label maps of one client.

    ``visible`` holds global label ids with unannotated classes set to 0;
    ``targets`` maps them to the client's head channels.
    """

    name: str
    images: np.ndarray  # (n, 1, H, W) float64 in [0, 1]
    full: np.ndarray  # (n, H, W) uint8, every shape labelled
    visible: np.ndarray  # (n, H, W) uint8, client annotation
    labels: tuple[int, ...]
    provenance: str = "train"
    placed: Optional[np.ndarray] = None  # (n_labels,) shape instances drawn
    train_idx: np.ndarray = field(default=None)
    val_idx: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.train_idx is None:
            self.train_idx, self.val_idx = train_val_split(len(self.images), seed=_name_seed(self.name))

    def __len__(self):
        return len(self.images)

    @property
    def head_labels(self) -> tuple[int, ...]:
        return (0,) + tuple(sorted(self.labels))

    @property
    def targets(self) -> np.ndarray:
        lut = np.zeros(256, dtype=np.intp)
        for ch, lab in enumerate(self.head_labels):
            lut[lab] = ch
        return lut[self.visible]

    def subset(self, idx, provenance: Optional[str] = None) -> "ClientDataset":
        idx = np.asarray(idx)
        return ClientDataset(
            self.name, self.images[idx], self.full[idx], self.visible[idx], self.labels,
            provenance or self.provenance, None,
            np.arange(len(idx)), np.arange(len(idx)),
        )


def _name_seed(name: str) -> int:
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little") % (2**32)


def train_val_split(n: int, seed: int = 0, frac: float = 0.8):
    """Disjoint 80/20 split of ``range(n)``."""
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(frac * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


# ------------------------------------------------------------------ drawing


def _shape_mask(kind: str, rng: np.random.Generator, grid: int) -> np.ndarray:
    """Mask of one shape in a tight bounding box; sizes scale with the grid."""
    k = grid / 32.0

    def span(lo, hi):
        return max(2, int(round(rng.uniform(lo, hi) * k)))

    if kind == "disk":
        r = max(1.5, rng.uniform(2.5, 4.5) * k)
        n = int(np.ceil(2 * r)) + 1
        yy, xx = np.mgrid[:n, :n] - (n - 1) / 2
        return yy**2 + xx**2 <= r * r
    if kind == "ring":
        r = max(2.5, rng.uniform(4.5, 6.5) * k)
        n = int(np.ceil(2 * r)) + 1
        yy, xx = np.mgrid[:n, :n] - (n - 1) / 2
        d2 = yy**2 + xx**2
        return (d2 <= r * r) & (d2 > (r - 1.8) ** 2)
    if kind == "square":
        s = span(4, 7.5)
        return np.ones((s, s), bool)
    if kind == "bar":
        a, b = 2 + int(rng.integers(0, 2)), span(9, 13.5)
        m = np.ones((a, max(b, 4)), bool)
        return m if rng.random() < 0.5 else m.T
    if kind == "triangle":
        h = max(3, span(6, 9.5))
        yy, xx = np.mgrid[:h, : 2 * h - 1]
        m = np.abs(xx - (h - 1)) <= yy
        return m if rng.random() < 0.5 else m[::-1]
    if kind == "cross":
        arm = max(1, span(3, 4.5))
        n = 2 * arm + 2
        m = np.zeros((n, n), bool)
        m[arm : arm + 2, :] = True
        m[:, arm : arm + 2] = True
        return m
    raise ValueError(kind)


def _render(rng: np.random.Generator, grid: int, n_foreground: int, max_shapes: int, attempts: int = 50):
    """Label map with 1..max_shapes shapes; a dead-end layout is redrawn from scratch."""
    count = int(rng.integers(1, max_shapes + 1))
    classes = rng.integers(1, n_foreground + 1, size=count)
    for _ in range(attempts):
        labels = np.zeros((grid, grid), np.uint8)
        occupied = np.zeros((grid, grid), bool)
        for cls in classes:
            if not _place_shape(rng, grid, int(cls), labels, occupied):
                break
        else:
            return labels
    raise ValueError(f"grid {grid}x{grid} too small to place {count} shapes")


def _place_shape(rng, grid, cls, labels, occupied, tries: int = 100) -> bool:
    for _ in range(tries):
        m = _shape_mask(SHAPES[cls - 1], rng, grid)
        h, w = m.shape
        if h > grid or w > grid:
            continue
        y, x = int(rng.integers(0, grid - h + 1)), int(rng.integers(0, grid - w + 1))
        region = np.zeros_like(occupied)
        region[y : y + h, x : x + w] = m
        if not (region & occupied).any():
            labels[region] = cls
            occupied |= ndimage.binary_dilation(region, structure=np.ones((3, 3), bool))
            return True
    return False


def generate_client_dataset(spec: ShapeWorldSpec, client_id, provenance: Optional[str] = None) -> ClientDataset:
    """Deterministic dataset for one client (a pure function of the spec).

    Shapes and pixel noise depend only on the client's seed, so two clients
    with the same seed see identical images if offset and noise agree.
    """
    c = spec.client(client_id)
    rng = np.random.default_rng(c.seed)
    full = np.stack([_render(rng, spec.grid, spec.n_foreground, spec.max_shapes) for _ in range(c.n_samples)])
    base = np.asarray(INTENSITY)[full]
    noise = rng.normal(0.0, 1.0, size=full.shape)
    images = np.clip(base + c.offset + c.noise * noise, 0.0, 1.0)[:, None]
    keep = np.zeros(256, bool)
    keep[list(c.labels)] = True
    visible = np.where(keep[full], full, 0).astype(np.uint8)
    placed = np.zeros(spec.n_labels, np.int64)
    for img in full:
        for lab in range(1, spec.n_labels):
            placed[lab] += ndimage.label(img == lab, structure=np.ones((3, 3)))[1]
    if provenance is None:
        provenance = "holdout" if c is spec.holdout else "train"
    return ClientDataset(c.name, images, full, visible, tuple(c.labels), provenance, placed)


def heterogeneity_profile(spec: ShapeWorldSpec, datasets: Optional[Sequence[ClientDataset]] = None) -> dict:
    """Per-client sample counts and annotated-shape histograms."""
    if datasets is None:
        datasets = [generate_client_dataset(spec, c.name) for c in spec.clients + (spec.holdout,)]
    rows = []
    for ds in datasets:
        c = spec.client(ds.name)
        hist = [int(ds.placed[lab]) if lab in c.labels else 0 for lab in range(1, spec.n_labels)]
        rows.append({
            "client": ds.name,
            "samples": len(ds),
            "labels": list(c.labels),
            "histogram": hist,
        })
    return {"label_names": list(SHAPES[: spec.n_foreground]), "clients": rows}


# --------------------------------------------------------------- binary I/O


def save_dataset(ds: ClientDataset, path) -> None:
    """Little-endian layout: header, float32 images, uint8 full and visible maps.

    Header (``<8sIIIIIII``): magic ``FIVADATA``, version, n, channels, height,
    width, number of labels, annotated-label bitmask.
    """
    n, c, h, w = ds.images.shape
    mask = sum(1 << lab for lab in ds.labels)
    n_labels = int(max(ds.full.max(initial=0), max(ds.labels))) + 1
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, n, c, h, w, n_labels, mask))
        f.write(ds.images.astype("<f4").tobytes())
        f.write(ds.full.astype(np.uint8).tobytes())
        f.write(ds.visible.astype(np.uint8).tobytes())


def load_dataset(path, name: Optional[str] = None) -> ClientDataset:
    raw = Path(path).read_bytes()
    magic, version, n, c, h, w, _, mask = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a v{_VERSION} dataset file")
    off = _HEADER.size
    images = np.frombuffer(raw, "<f4", n * c * h * w, off).reshape(n, c, h, w).astype(np.float64)
    off += 4 * n * c * h * w
    full = np.frombuffer(raw, np.uint8, n * h * w, off).reshape(n, h, w).copy()
    off += n * h * w
    visible = np.frombuffer(raw, np.uint8, n * h * w, off).reshape(n, h, w).copy()
    labels = tuple(lab for lab in range(32) if mask >> lab & 1)
    return ClientDataset(name or Path(path).stem, images, full, visible, labels)
