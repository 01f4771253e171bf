"""``attsim`` command line: prepare, synth-noise, make-toy-dataset, train, eval, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, dsp, harness, toy
from .episodic import DataError
from .harness import ConfigError, RunConfig
from .tensor import NumericError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DISTANCE_FLAGS = {"inner": "inner_product", "cosine": "cosine", "euclidean": "neg_euclidean"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, eval_flags: bool = False) -> None:
    p.add_argument("--config", type=Path, help="run configuration (JSON)")
    p.add_argument("--seed", type=int, help="run seed (train) or episode seed (eval)")
    p.add_argument("--head", choices=["siamese", "matching", "prototypical"])
    p.add_argument("--attentional", choices=["on", "off"])
    p.add_argument("--distance", choices=sorted(DISTANCE_FLAGS))
    p.add_argument("--features-dir", type=Path, help="prepared feature directory")
    if eval_flags:
        p.add_argument("--way", type=int)
        p.add_argument("--shot", type=int)
        p.add_argument("--episodes", type=int)
        p.add_argument("--section", choices=["val", "test"])


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="attsim", description="Few-shot sound event classification with attentional similarity.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="extract and cache log-mel features for an ESC-50 style directory")
    p.add_argument("data_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("synth-noise", help="mix every clip with background scene audio")
    p.add_argument("esc_dir", type=Path)
    p.add_argument("scenes_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr-min", type=float, default=5.0)
    p.add_argument("--snr-max", type=float, default=20.0)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("make-toy-dataset", help="write the synthetic transient-event corpus")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=15)
    p.add_argument("--clips-per-class", type=int, default=200)

    p = sub.add_parser("train", help="episodic training")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="run directory for checkpoint, log and config")
    p.add_argument("--epochs", type=int, help="override schedule.max_epochs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on sampled episodes")
    _common(p, eval_flags=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, help="append the result as a JSON line to this file")

    p = sub.add_parser("report", help="comparison table from eval results")
    p.add_argument("results", type=Path, nargs="+", help="JSON-lines files written by 'eval --out'")
    p.add_argument("--csv", type=Path)
    p.add_argument("--txt", type=Path)
    return ap


def read_config(path: Path) -> dict:
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return {k: dict(v) if isinstance(v, dict) else v for k, v in d.items()}


def resolve_config(args) -> RunConfig:
    """Config file values with command-line overrides applied."""
    d = read_config(args.config) if args.config else {}
    head = d.setdefault("head", {})
    if getattr(args, "head", None):
        head["kind"] = args.head
        head.pop("distance", None)  # fall back to the new kind's default unless given below
    if getattr(args, "attentional", None):
        head["attentional"] = args.attentional == "on"
    if getattr(args, "distance", None):
        head["distance"] = DISTANCE_FLAGS[args.distance]
    if getattr(args, "features_dir", None):
        d["features_dir"] = str(args.features_dir)
    if args.command == "train":
        if args.seed is not None:
            d["seed"] = args.seed
        if args.epochs is not None:
            d.setdefault("schedule", {})["max_epochs"] = args.epochs
    if args.command == "eval":
        ev = d.setdefault("eval", {})
        for flag, key in (("seed", "seed"), ("way", "way"), ("shot", "shot"), ("episodes", "episodes"), ("section", "section")):
            if getattr(args, flag) is not None:
                ev[key] = getattr(args, flag)
    return RunConfig.from_dict(d)


def _run(args) -> int:
    if args.command == "prepare":
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        res = harness.prepare(args.data_dir, args.out_dir, cfg, jobs=args.jobs)
        print(f"{res['clips']} clips: {res['computed']} extracted, {res['cached']} cached")
    elif args.command == "synth-noise":
        if args.snr_min > args.snr_max:
            raise ConfigError("--snr-min must not exceed --snr-max")
        n = harness.synth_noise(args.esc_dir, args.scenes_dir, args.out_dir, args.seed, (args.snr_min, args.snr_max), args.jobs)
        print(f"{n} noisy clips written to {args.out_dir}")
    elif args.command == "make-toy-dataset":
        try:
            cfg = toy.ToyConfig(n_classes=args.classes, clips_per_class=args.clips_per_class, seed=args.seed)
            n = toy.write_corpus(args.out_dir, cfg)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        print(f"{n} clips written to {args.out_dir}")
    elif args.command == "train":
        res = harness.run_train(resolve_config(args), args.out)
        print(json.dumps(res))
    elif args.command == "eval":
        row = harness.run_eval(resolve_config(args), args.checkpoint)
        line = json.dumps(row)
        if args.out:
            with open(args.out, "a") as fh:
                fh.write(line + "\n")
        print(line)
    elif args.command == "report":
        rows = harness.collect_rows(harness.read_fragments(args.results))
        if args.csv:
            args.csv.write_text(harness.report_csv(rows))
        if args.txt:
            args.txt.write_text(harness.report_text(rows))
        sys.stdout.write(harness.report_text(rows))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"attsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, dsp.AudioError, checkpoint.CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"attsim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"attsim: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
