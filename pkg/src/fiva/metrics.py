"""Dice, expected calibration error and reliability diagrams."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np


def dice(prediction, target, label: int) -> Optional[float]:
    """``2|P & T| / (|P| + |T|)`` for one label; ``None`` when the label is absent from both."""
    prediction = np.asarray(prediction)
    target = np.asarray(target)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    p = prediction == label
    t = target == label
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return None
    return 2.0 * int((p & t).sum()) / denom


def dice_per_label(prediction, target, labels: Iterable[int]) -> dict[int, float]:
    """Dice for every label present in ``target`` (labels missing from the ground truth are skipped)."""
    out = {}
    target = np.asarray(target)
    for lab in labels:
        if not (target == lab).any():
            continue
        out[int(lab)] = dice(prediction, target, lab)
    return out


@dataclass
class CalibrationReport:
    bin_edges: np.ndarray
    bin_confidence: np.ndarray
    bin_accuracy: np.ndarray
    bin_count: np.ndarray
    ece: float
    label_ece: dict = field(default_factory=dict)

    @property
    def label_ece_mean(self) -> float:
        return float(np.mean(list(self.label_ece.values()))) if self.label_ece else float("nan")

    @property
    def label_ece_std(self) -> float:
        return float(np.std(list(self.label_ece.values()))) if self.label_ece else float("nan")

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "bin_confidence": self.bin_confidence.tolist(),
            "bin_accuracy": self.bin_accuracy.tolist(),
            "bin_count": self.bin_count.tolist(),
            "ece": self.ece,
            "label_ece": {str(k): v for k, v in self.label_ece.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        return cls(
            np.asarray(d["bin_edges"]), np.asarray(d["bin_confidence"]), np.asarray(d["bin_accuracy"]),
            np.asarray(d["bin_count"], dtype=np.int64), d["ece"], {int(k): v for k, v in d["label_ece"].items()},
        )


def bin_index(confidences, bins: int = 10) -> np.ndarray:
    """Equal-width, right-inclusive bins: (b/bins, (b+1)/bins], with 0 in the first bin."""
    c = np.asarray(confidences, dtype=np.float64)
    return np.clip(np.ceil(c * bins).astype(np.int64) - 1, 0, bins - 1)


def ece(confidences, correct, bins: int = 10, labels=None) -> CalibrationReport:
    """Expected calibration error with equal-width confidence bins.

    If ``labels`` (the predicted label per sample) is given, a per-label ECE is
    computed on each label's subset as well.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=bool).ravel()
    if conf.size == 0:
        raise ValueError("ECE of an empty set")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if conf.min() < 0 or conf.max() > 1:
        raise ValueError("confidences must lie in [0, 1]")
    idx = bin_index(conf, bins)
    count = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=corr.astype(np.float64), minlength=bins)
    nz = count > 0
    mean_conf = np.divide(conf_sum, count, out=np.zeros(bins), where=nz)
    acc = np.divide(acc_sum, count, out=np.zeros(bins), where=nz)
    value = float(np.sum(count / conf.size * np.abs(acc - mean_conf)))
    per_label = {}
    if labels is not None:
        labels = np.asarray(labels).ravel()
        for lab in np.unique(labels):
            sel = labels == lab
            per_label[int(lab)] = ece(conf[sel], corr[sel], bins).ece
    return CalibrationReport(np.linspace(0, 1, bins + 1), mean_conf, acc, count, value, per_label)


def calibration_from_proba(proba, target, bins: int = 10) -> CalibrationReport:
    """Pixelwise arg-max confidence vs correctness, grouped by predicted label."""
    proba = np.asarray(proba)
    pred = proba.argmax(axis=1)
    conf = proba.max(axis=1)
    return ece(conf, pred == np.asarray(target), bins, labels=pred)


# ---------------------------------------------------------------- SVG output

_W, _H, _PAD = 360, 360, 48


def reliability_svg(report: CalibrationReport, path, title: str = "") -> Path:
    """Write a reliability diagram: accuracy bar per bin, identity diagonal, ECE note.

    Output is a pure function of the report; bars are ``<rect class="bar">``.
    """
    bins = len(report.bin_count)
    plot = _W - 2 * _PAD
    bw = plot / bins
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="{_PAD}" y="{_PAD}" width="{plot}" height="{plot}" fill="none" stroke="#000"/>',
    ]
    for b in range(bins):
        h = float(report.bin_accuracy[b]) * plot if report.bin_count[b] else 0.0
        x = _PAD + b * bw
        parts.append(
            f'<rect class="bar" x="{x:.2f}" y="{_PAD + plot - h:.2f}" width="{bw:.2f}" height="{h:.2f}" '
            f'fill="#4a7ab5" stroke="#1f3d66" data-count="{int(report.bin_count[b])}"/>'
        )
    parts.append(
        f'<line class="diagonal" x1="{_PAD}" y1="{_PAD + plot}" x2="{_PAD + plot}" y2="{_PAD}" '
        f'stroke="#c0392b" stroke-dasharray="4 3"/>'
    )
    parts.append(f'<text class="ece" x="{_PAD + 6}" y="{_PAD + 18}" font-size="13">ECE = {report.ece:.4f}</text>')
    if title:
        parts.append(f'<text x="{_W / 2}" y="{_PAD - 14}" font-size="14" text-anchor="middle">{escape(title)}</text>')
    parts.append(f'<text x="{_W / 2}" y="{_H - 12}" font-size="12" text-anchor="middle">confidence</text>')
    parts.append(
        f'<text x="14" y="{_H / 2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {_H / 2})">accuracy</text>'
    )
    parts.append("</svg>\n")
    path = Path(path)
    path.write_text("\n".join(parts))
    return path


def bar_chart_svg(rows: Sequence[dict], series: Sequence[str], path) -> Path:
    """Grouped bar chart of per-client label histograms (``rows[i]["histogram"]``)."""
    n_series = len(series)
    peak = max((max(r["histogram"]) for r in rows), default=0) or 1
    plot_w, plot_h = 120 * len(rows), 240
    width, height = plot_w + 2 * _PAD, plot_h + 2 * _PAD
    bw = 100 / max(n_series, 1)
    colors = ["#4a7ab5", "#e67e22", "#27ae60", "#8e44ad", "#c0392b", "#16a085", "#7f8c8d", "#d35400"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">']
    for i, r in enumerate(rows):
        x0 = _PAD + 120 * i + 10
        for j, v in enumerate(r["histogram"]):
            h = v / peak * plot_h
            parts.append(
                f'<rect class="bar" x="{x0 + j * bw:.2f}" y="{_PAD + plot_h - h:.2f}" width="{bw:.2f}" '
                f'height="{h:.2f}" fill="{colors[j % len(colors)]}" data-value="{v}"/>'
            )
        parts.append(
            f'<text x="{x0 + 50}" y="{_PAD + plot_h + 16}" font-size="12" text-anchor="middle">'
            f'{escape(str(r["client"]))} (n={r["samples"]})</text>'
        )
    for j, name in enumerate(series):
        parts.append(
            f'<text x="{_PAD + j * 80}" y="{_PAD - 16}" font-size="11" fill="{colors[j % len(colors)]}">{escape(name)}</text>'
        )
    parts.append("</svg>\n")
    path = Path(path)
    path.write_text("\n".join(parts))
    return path
