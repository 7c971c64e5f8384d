"""Command line entry point: ``fiva run|evaluate|plot|gen-data``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .harness import DivergenceError, emit_plots, evaluate_checkpoint, run_experiment
from .inference import MODES
from .synthdata import generate_client_dataset, heterogeneity_profile, save_dataset

log = logging.getLogger("fiva")


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the verb from being reset by the subparser
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config's global seed")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only print warnings and errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="fiva", parents=[common],
                                     description="Federated inverse-variance averaging experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)
    run = sub.add_parser("run", parents=[common], help="train and evaluate one experiment")
    run.add_argument("config", type=Path)
    run.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in the output dir")
    run.add_argument("--no-plots", action="store_true")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("checkpoint", type=Path)
    ev.add_argument("config", type=Path)
    ev.add_argument("--client", help="evaluate only this client's head")
    ev.add_argument("--mode", action="append", choices=MODES, help="inference mode (repeatable)")
    pl = sub.add_parser("plot", parents=[common], help="render SVGs from a results directory")
    pl.add_argument("results_dir", type=Path)
    gd = sub.add_parser("gen-data", parents=[common], help="write the synthetic datasets to disk")
    gd.add_argument("config", type=Path)
    return parser


def _config(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=getattr(args, "seed", None), output_dir=getattr(args, "out", None))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    say = (lambda *a: None) if getattr(args, "quiet", False) else print
    try:
        if args.verb == "run":
            cfg = _config(args)
            res = run_experiment(cfg, resume=args.resume, plots=not args.no_plots)
            for ev in res.evaluations:
                d = ev.to_dict()
                say(f"{ev.method:12s} {ev.client:>8s} on {ev.dataset:8s} dice {d['dice_mean']:.4f} "
                    f"label-ECE {d['label_ece_mean']:.4f}")
            say(f"results in {res.out_dir}")
        elif args.verb == "evaluate":
            cfg = _config(args)
            for ev in evaluate_checkpoint(args.checkpoint, cfg, client=args.client, modes=args.mode):
                d = ev.to_dict()
                say(f"{ev.method:12s} on {ev.dataset:8s} dice {d['dice_mean']:.4f} label-ECE {d['label_ece_mean']:.4f}")
        elif args.verb == "plot":
            for path in emit_plots(args.results_dir, getattr(args, "out", None)):
                say(path)
        elif args.verb == "gen-data":
            cfg = _config(args)
            world = cfg.world()
            out = Path(cfg.output_dir) / "data"
            out.mkdir(parents=True, exist_ok=True)
            datasets = [generate_client_dataset(world, c.name) for c in world.clients + (world.holdout,)]
            for ds in datasets:
                save_dataset(ds, out / f"{ds.name}.bin")
                say(f"{ds.name}: {len(ds)} samples, labels {list(ds.labels)}")
            profile = heterogeneity_profile(world, datasets)
            (out / "profile.json").write_text(json.dumps(profile, indent=1, sort_keys=True) + "\n")
            say(f"datasets in {out}")
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"fiva: error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"fiva: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
