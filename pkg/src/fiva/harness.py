"""Experiment orchestration: regimes, checkpoints, results files and plots.

Everything written to ``results.tsv``, ``summary.json``, checkpoints and
exports is a pure function of the config. Wall-clock times go to
``timings.tsv`` so reruns can be compared byte for byte.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .inference import MC_DROPOUT, PLAIN, UNCERTAINTY, predict
from .metrics import CalibrationReport, bar_chart_svg, dice, ece, reliability_svg
from .server import GlobalState
from .synthdata import ClientDataset, ShapeWorldSpec, generate_client_dataset, heterogeneity_profile
from .training import TrainingConfig, aggregation_for, model_spec_for, run_centralized, run_federated

logger = logging.getLogger(__name__)

RESULTS_SCHEMA = "fiva-results/1"
COLUMNS = ("method", "regime", "client", "dataset", "label", "dice_mean", "dice_std", "ece", "ece_std", "round")
_SUFFIX = {PLAIN: "", UNCERTAINTY: "+UN", MC_DROPOUT: "+MC"}


class DivergenceError(RuntimeError):
    pass


def method_name(strategy: str, mode: str) -> str:
    return strategy + _SUFFIX[mode]


@dataclass
class Prepared:
    world: ShapeWorldSpec
    clients: list
    holdout: ClientDataset
    spec: nn.ModelSpec
    training: TrainingConfig


def prepare(config: ExperimentConfig) -> Prepared:
    world = config.world()
    clients = [generate_client_dataset(world, c.name) for c in world.clients]
    holdout = generate_client_dataset(world, world.holdout.name, provenance="holdout")
    spec = model_spec_for(clients, world.n_labels, world.grid, widths=tuple(config.model.widths),
                          activation=config.model.activation, dropout=config.model.dropout)
    return Prepared(world, clients, holdout, spec, config.training)


# ------------------------------------------------------------------ evaluation


@dataclass
class Evaluation:
    method: str
    client: str
    dataset: str
    round: int
    labels: list
    dice_per_seed: list  # one {label: dice} dict per evaluation seed
    label_ece_per_seed: list
    pooled: CalibrationReport
    exports: dict = field(default_factory=dict)

    def dice_mean_per_seed(self) -> list:
        return [float(np.mean(list(d.values()))) if d else float("nan") for d in self.dice_per_seed]

    def label_ece_mean_per_seed(self) -> list:
        return [float(np.mean(list(d.values()))) if d else float("nan") for d in self.label_ece_per_seed]

    def rows(self, regime: str) -> list:
        out = []
        for lab in self.labels:
            ds = [d[lab] for d in self.dice_per_seed if lab in d]
            es = [e[lab] for e in self.label_ece_per_seed if lab in e]
            out.append(_row(self, regime, str(lab), ds, es))
        out.append(_row(self, regime, "mean", self.dice_mean_per_seed(), self.label_ece_mean_per_seed()))
        out.append((self.method, regime, self.client, self.dataset, "pixel", "nan", "nan",
                    _fmt(self.pooled.ece), "nan", str(self.round)))
        return out

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "client": self.client,
            "dataset": self.dataset,
            "round": self.round,
            "dice_mean": _mean(self.dice_mean_per_seed()),
            "label_ece_mean": _mean(self.label_ece_mean_per_seed()),
            "pixel_ece": self.pooled.ece,
            "dice_per_seed": [{str(k): v for k, v in d.items()} for d in self.dice_per_seed],
            "label_ece_per_seed": [{str(k): v for k, v in d.items()} for d in self.label_ece_per_seed],
            "reliability": self.pooled.to_dict(),
        }


def _mean(values) -> float:
    v = [x for x in values if x == x]
    return float(np.mean(v)) if v else float("nan")


def _fmt(x) -> str:
    return "nan" if x is None or x != x else f"{x:.6f}"


def _row(ev: Evaluation, regime: str, label: str, dices, eces) -> tuple:
    d = [x for x in dices if x == x]
    e = [x for x in eces if x == x]
    return (ev.method, regime, ev.client, ev.dataset, label,
            _fmt(np.mean(d) if d else None), _fmt(np.std(d) if d else None),
            _fmt(np.mean(e) if e else None), _fmt(np.std(e) if e else None), str(ev.round))


def evaluate_state(state: GlobalState, spec: nn.ModelSpec, data: ClientDataset, mode: str,
                   config: ExperimentConfig, method: str, client: str = "global",
                   heads: Optional[Sequence] = None, labels: Optional[Sequence[int]] = None,
                   keep_exports: bool = True) -> Evaluation:
    """Dice and ECE over ``evaluation.seeds`` random subsets of ``data``.

    Ground truth is the full label map restricted to ``labels`` (default: every
    foreground label the chosen heads can predict). Seed ``e`` picks the
    subset and the inference randomness; seed 0's arrays are kept for export.
    """
    ev_cfg = config.evaluation
    head_idx = list(range(len(spec.heads))) if heads is None else [spec.head(h)[0] for h in heads]
    predictable = sorted({lab for i in head_idx for lab in spec.heads[i].labels} - {0})
    labels = predictable if labels is None else sorted(set(labels) & set(predictable))
    keep = np.zeros(256, bool)
    keep[labels] = True
    n = len(data)
    k = max(1, int(round(ev_cfg.fraction * n)))
    dice_seeds, ece_seeds, confs, corrects, preds = [], [], [], [], []
    exports = {}
    for e in range(ev_cfg.seeds):
        idx = np.sort(np.random.default_rng([config.seed, e, 101]).choice(n, size=k, replace=False))
        target = np.where(keep[data.full[idx]], data.full[idx], 0)
        fused = predict(state, data.images[idx], spec, mode, ev_cfg.samples,
                        seed=[config.seed, e, 202], heads=head_idx)
        pred = fused.labels
        dice_seeds.append({lab: dice(pred, target, lab) for lab in labels if (target == lab).any()})
        conf = fused.confidence
        rep = ece(conf, pred == target, ev_cfg.bins, labels=pred)
        ece_seeds.append({lab: v for lab, v in rep.label_ece.items()})
        confs.append(conf.ravel())
        corrects.append((pred == target).ravel())
        preds.append(pred.ravel())
        if e == 0 and keep_exports:
            total = fused.uncertainty.total if fused.uncertainty is not None else np.zeros(pred.shape)
            exports = {"indices": idx, "labels": pred.astype(np.uint8), "target": target.astype(np.uint8),
                       "uncertainty": total.astype(np.float32)}
    pooled = ece(np.concatenate(confs), np.concatenate(corrects), ev_cfg.bins, labels=np.concatenate(preds))
    return Evaluation(method, client, data.name, int(state.round), labels, dice_seeds, ece_seeds, pooled, exports)


def _eval_targets(config: ExperimentConfig, prep: Prepared) -> list:
    out = []
    for name in config.evaluation.datasets:
        if name == "holdout":
            out.append(prep.holdout)
        elif name == "clients":
            out.extend(d.subset(d.val_idx, "validation") for d in prep.clients)
        else:
            d = next(c for c in prep.clients if c.name == name)
            out.append(d.subset(d.val_idx, "validation"))
    return out


# ------------------------------------------------------------------ files


class ResultsTable:
    """Append-only tab-separated results with a schema line."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, rows: Sequence[tuple]) -> None:
        new = not self.path.exists()
        with open(self.path, "a", encoding="utf-8", newline="\n") as f:
            if new:
                f.write(f"# schema: {RESULTS_SCHEMA}\n")
                f.write("\t".join(COLUMNS) + "\n")
            for r in rows:
                f.write("\t".join(r) + "\n")

    def read(self) -> list:
        return read_results(self.path)


def read_results(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no results table at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"# schema: {RESULTS_SCHEMA}":
        raise ValueError(f"{path}: unknown results schema")
    header = tuple(lines[1].split("\t"))
    if header != COLUMNS:
        raise ValueError(f"{path}: unexpected columns {header}")
    return [dict(zip(COLUMNS, line.split("\t"))) for line in lines[2:] if line]


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.+-]", "_", name)


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def export_arrays(ev: Evaluation, root: Path, n_images: int, n_labels: int) -> None:
    d = root / "exports" / _safe(ev.method) / _safe(f"{ev.client}-{ev.dataset}")
    d.mkdir(parents=True, exist_ok=True)
    for key, arr in ev.exports.items():
        np.save(d / f"{key}.npy", arr, allow_pickle=False)
    scale = 255 // max(n_labels - 1, 1)
    for i in range(min(n_images, len(ev.exports.get("labels", [])))):
        write_pgm(d / f"img{i}_labels.pgm", ev.exports["labels"][i] * scale)
        u = ev.exports["uncertainty"][i].astype(np.float64)
        span = u.max() - u.min()
        write_pgm(d / f"img{i}_uncertainty.pgm", np.round(255 * (u - u.min()) / span if span > 0 else 0 * u))


# ------------------------------------------------------------------ running


@dataclass
class RunResult:
    out_dir: Path
    states: dict  # client name (or "global") -> final GlobalState
    evaluations: list
    round_times: list


def _ckpt_dir(root: Path, client: Optional[str]) -> Path:
    d = root / "checkpoints" if client is None else root / "checkpoints" / _safe(client)
    d.mkdir(parents=True, exist_ok=True)
    return d


def latest_checkpoint(directory: Path) -> Optional[Path]:
    found = sorted(directory.glob("round_*.ckpt"))
    return found[-1] if found else None


def _train(config: ExperimentConfig, prep: Prepared, clients, ckpt_dir: Path, resume: bool, timings: list,
           label: str) -> GlobalState:
    agg = aggregation_for(config.strategy, config.aggregation.lam, config.aggregation.sigma2_min,
                          config.aggregation.sigma2_max)
    start = None
    if resume:
        last = latest_checkpoint(ckpt_dir)
        if last is not None:
            ck = load_checkpoint(last, prep.spec)
            if ck.strategy != config.strategy:
                raise ValueError(f"{last} was written by {ck.strategy}, config asks for {config.strategy}")
            start = ck.state
            logger.info("resuming %s from %s", label, last.name)
            if start.round >= config.rounds:
                return start

    def on_round(state, elapsed):
        save_checkpoint(ckpt_dir / f"round_{state.round:04d}.ckpt", state, config.strategy, prep.spec,
                        config.checkpoint_dtype)
        timings.append((label, state.round, elapsed))

    common = dict(start=start, state_dtype=config.checkpoint_dtype, on_round=on_round)
    try:
        if config.regime == "centralized":
            return run_centralized(clients, prep.spec, config.strategy, prep.training, agg, config.rounds,
                                   config.seed, **common)
        return run_federated(clients, prep.spec, config.strategy, prep.training, agg, config.rounds, config.seed,
                             workers=config.workers, **common)
    except FloatingPointError as e:
        last = latest_checkpoint(ckpt_dir)
        raise DivergenceError(
            f"{label}: training diverged ({e}); last good checkpoint: {last if last else 'none'}. "
            "Lower training.lr or training.momentum."
        ) from e


def run_experiment(config: ExperimentConfig, out_dir=None, resume: bool = False, plots: bool = True) -> RunResult:
    """Train, checkpoint every round, evaluate every inference mode and write results."""
    root = Path(out_dir if out_dir is not None else config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "config.json", config.to_dict())
    prep = prepare(config)
    timings: list = []
    states = {}
    evaluations = []
    targets = _eval_targets(config, prep)
    if config.regime == "standalone":
        for d in prep.clients:
            states[d.name] = _train(config, prep, [d], _ckpt_dir(root, d.name), resume, timings, d.name)
        for d in prep.clients:
            others = [o.subset(o.val_idx, "validation") for o in prep.clients]
            for mode in config.inference:
                for data in others + [prep.holdout]:
                    evaluations.append(evaluate_state(states[d.name], prep.spec, data, mode, config,
                                                      method_name(config.strategy, mode), d.name,
                                                      heads=[d.name], labels=d.labels))
    else:
        states["global"] = _train(config, prep, prep.clients, _ckpt_dir(root, None), resume, timings,
                                  config.regime)
        for mode in config.inference:
            for data in targets:
                evaluations.append(evaluate_state(states["global"], prep.spec, data, mode, config,
                                                  method_name(config.strategy, mode)))
    _persist(root, config, prep, evaluations, timings)
    if plots:
        emit_plots(root)
    return RunResult(root, states, evaluations, [t for _, _, t in timings])


def _persist(root: Path, config: ExperimentConfig, prep: Prepared, evaluations, timings) -> None:
    rows = [r for ev in evaluations for r in ev.rows(config.regime)]
    ResultsTable(root / "results.tsv").append(rows)
    for ev in evaluations:
        if ev.exports:
            export_arrays(ev, root, config.evaluation.export_images, prep.world.n_labels)
    summary_path = root / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    summary.update({
        "schema": RESULTS_SCHEMA,
        "regime": config.regime,
        "strategy": config.strategy,
        "seed": config.seed,
        "rounds": config.rounds,
        "n_params": nn.n_params(prep.spec),
        "profile": heterogeneity_profile(prep.world, prep.clients + [prep.holdout]),
    })
    summary.setdefault("evaluations", []).extend(ev.to_dict() for ev in evaluations)
    _write_json(summary_path, summary)
    with open(root / "timings.tsv", "a", encoding="utf-8") as f:
        if f.tell() == 0:
            f.write("phase\tround\tseconds\n")
        for label, rnd, sec in timings:
            f.write(f"{label}\t{rnd}\t{sec:.4f}\n")


def evaluate_checkpoint(checkpoint, config: ExperimentConfig, out_dir=None, client: Optional[str] = None,
                        modes: Optional[Sequence[str]] = None) -> list:
    """Evaluate a saved state on the configured datasets and append the rows to the results files."""
    prep = prepare(config)
    ck = load_checkpoint(checkpoint, prep.spec)
    root = Path(out_dir if out_dir is not None else config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    heads = None if client is None else [client]
    labels = None if client is None else prep.spec.heads[prep.spec.head(client)[0]].labels
    evaluations = []
    for mode in modes or config.inference:
        if mode == UNCERTAINTY and ck.strategy == "FedAvg":
            raise ValueError("uncertainty-weighted inference needs a FIVA checkpoint")
        for data in _eval_targets(config, prep):
            evaluations.append(evaluate_state(ck.state, prep.spec, data, mode, config, method_name(ck.strategy, mode),
                                              client or "global", heads=heads, labels=labels))
    _persist(root, config, prep, evaluations, [])
    return evaluations


# ------------------------------------------------------------------ plots


def emit_plots(results_dir, out_dir=None) -> list:
    """Reliability diagram per evaluation and the label-distribution chart.

    Reads only ``results.tsv`` and ``summary.json``; nothing is written if
    either is missing or holds no evaluations.
    """
    root = Path(results_dir)
    rows = read_results(root / "results.tsv")
    summary_path = root / "summary.json"
    if not rows or not summary_path.exists():
        raise FileNotFoundError(f"{root}: no results to plot")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    evaluations = summary.get("evaluations") or []
    if not evaluations:
        raise FileNotFoundError(f"{root}: summary holds no evaluations")
    table = {(r["method"], r["client"], r["dataset"]): r["ece"] for r in rows if r["label"] == "pixel"}
    out = Path(out_dir) if out_dir is not None else root / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    seen = set()
    for ev in evaluations:
        key = (ev["method"], ev["client"], ev["dataset"])
        if key in seen:
            continue
        seen.add(key)
        report = CalibrationReport.from_dict(ev["reliability"])
        if key in table and abs(float(table[key]) - report.ece) > 5e-7:
            raise ValueError(f"summary and results table disagree on the ECE of {key}")
        name = "reliability_" + _safe("_".join(key)) + ".svg"
        title = f"{ev['method']} ({ev['client']} on {ev['dataset']})"
        written.append(reliability_svg(report, out / name, title))
    prof = summary["profile"]
    written.append(bar_chart_svg(prof["clients"], prof["label_names"], out / "label_distribution.svg"))
    return written
