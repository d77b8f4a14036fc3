"""``spisr`` command line: simulate, train, eval, ingest, export-depth.

Exit codes: 0 success, 2 configuration/input error, 3 training aborted (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import ExitStack
from pathlib import Path

from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from . import experiment, io
from .cube import CubeError
from .trainer import TrainingAborted

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
LOCK_NAME = ".spisr.lock"

logger = logging.getLogger("spisr")


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="experiment config JSON (defaults to the built-in desk config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="cap BLAS threads")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="spisr", description="Self-supervised single-photon cube super-resolution.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="generate a procedural dataset")

    p = sub.add_parser("train", parents=[common], help="train a reconstruction network")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--mode", choices=io.MODES, help="override the config mode")
    p.add_argument("--resume", action="store_true", help="continue from last.* in --out")

    p = sub.add_parser("eval", parents=[common], help="RMSE report and depth-map export")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", action="append", default=[], metavar="NAME=CKPT",
                   help="'trilinear' or NAME=path/to/checkpoint.spnn; repeatable")
    p.add_argument("--no-export", action="store_true", help="skip per-sample depth images")

    p = sub.add_parser("ingest", parents=[common], help="register a measured SPC1 cube (no ground truth)")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--meta", type=Path, required=True, help="JSON with at least sbr and gamma")
    p.add_argument("--split", default="train", choices=experiment.SPLITS)

    p = sub.add_parser("export-depth", parents=[common], help="depth image (PGM/PPM/JSON) from an SPC1 file")
    p.add_argument("--cube", type=Path, required=True)
    return parser


def _config(args) -> io.ExperimentConfig:
    cfg = io.load_config(args.config) if args.config else io.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.threads is not None:
        cfg = cfg.replace(threads=args.threads)
    return cfg


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required for this command")
    return args.out


def _models(specs) -> dict:
    models = {}
    for spec in specs or ["trilinear"]:
        if spec.lower() == "trilinear":
            models["Trilinear"] = "trilinear"
            continue
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--model expects 'trilinear' or NAME=CKPT, got {spec!r}")
        if not Path(path).exists():
            raise io.ConfigError(f"checkpoint {path} does not exist")
        models[name] = path
    return models


def _run(args) -> int:
    cfg = _config(args)
    if args.command == "export-depth":
        out = _require_out(args)
        out.parent.mkdir(parents=True, exist_ok=True)
        experiment.export_depth(args.cube, out, cfg)
        print(f"wrote {out.with_suffix('.pgm')}")
        return EXIT_OK

    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    with FileLock(str(out / LOCK_NAME), timeout=0):
        if args.command == "simulate":
            for sbr, h in experiment.simulate(cfg, out).items():
                print(f"sbr={sbr:g} manifest_hash={h}")
        elif args.command == "train":
            result = experiment.run_training(cfg, args.data, out, mode=args.mode, resume=args.resume)
            last = result.history[-1] if result.history else {}
            print(f"trained {len(result.history)} epochs, best epoch {result.best_epoch}, "
                  f"last val_rmse {last.get('val_rmse')}")
        elif args.command == "eval":
            report = experiment.run_eval(cfg, args.data, out, _models(args.model), export=not args.no_export)
            sys.stdout.write(report.to_text())
        elif args.command == "ingest":
            try:
                meta = json.loads(args.meta.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise io.ConfigError(f"metadata {args.meta}: {exc}") from None
            if not isinstance(meta, dict):
                raise io.ConfigError(f"metadata {args.meta}: expected a JSON object")
            entry = experiment.ingest(args.cube, meta, out, cfg.scale, args.split)
            print(f"ingested {entry['id']}: LR {entry['lr_dims']} -> HR {entry['hr_dims']}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with ExitStack() as stack:
            if args.threads is not None:
                stack.enter_context(threadpool_limits(limits=args.threads))
            return _run(args)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc} (last checkpoint kept)", file=sys.stderr)
        return EXIT_ABORT
    except Timeout:
        print(f"error: output directory {args.out} is locked by another process", file=sys.stderr)
        return EXIT_CONFIG
    except (io.ConfigError, io.FormatError, CubeError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
