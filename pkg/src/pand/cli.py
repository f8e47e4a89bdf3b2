"""``pand`` command line.

Commands::

    pand calibrate --config toy.cfg --out anchors.bin
    pand distill   --config toy.cfg [--anchors anchors.bin] [--out ckpt_dir]
    pand evaluate  --config toy.cfg --anchors anchors.bin --checkpoint ckpt_dir/student.ckpt [--out emb.tsv]
    pand sweep     --config toy.cfg [--grid 0,0.25,0.5,0.75,1] [--out sweep.csv] [--workers N]
    pand ablate    --config toy.cfg [--out ablation.csv] [--workers N]
    pand gen-toy   --config toy.cfg --out toy.bin

``--set key=value`` (repeatable) overrides config-file values. ``--seed``
sets the data, calibration and distillation seeds at once. Exit codes: 0
success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .anchors import load_anchors, save_anchors
from .config import TrainConfig, dump_config, load_config, set_key
from .data import save_toy
from .errors import ConfigError, PandError
from .eval import export_embeddings, neighborhood_consistency, run_ablation, run_sweep, top1_accuracy
from .metrics import MetricsLog
from .student import load_checkpoint
from .teacher import Teacher
from .train import build_encoders, calibrate, load_data, run_pipeline

logger = logging.getLogger("pand")

COMMANDS = ("calibrate", "distill", "evaluate", "sweep", "ablate", "gen-toy")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pand", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="dotted-key config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name in ("distill", "evaluate", "sweep", "ablate"):
            p.add_argument("--anchors")
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True)
        if name in ("sweep", "ablate"):
            p.add_argument("--workers", type=int, default=1)
        if name == "sweep":
            p.add_argument("--grid", default="0,0.25,0.5,0.75,1.0")
    return parser


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        set_key(cfg, key.strip(), value)
    if args.seed is not None:
        for key in ("data.seed", "psc.seed", "nsd.seed"):
            set_key(cfg, key, args.seed)
    if args.out and args.command == "calibrate":
        cfg.paths.anchors = args.out
    if args.out and args.command == "distill":
        cfg.paths.checkpoints = args.out
    return cfg.validate()


def _echo(cfg: TrainConfig, out) -> None:
    out.write(f"# config_hash = {cfg.config_hash()}\n")
    out.write(dump_config(cfg))
    out.flush()


def _load_split_and_anchors(cfg: TrainConfig, args):
    train, test = load_data(cfg)
    cfg.validate(len(train.vocab))
    anchors = load_anchors(args.anchors) if getattr(args, "anchors", None) else None
    if anchors is not None and anchors.class_names != train.vocab.names:
        raise ConfigError("anchor file class names do not match the dataset vocabulary")
    return train, test, anchors


def _cmd_calibrate(cfg, args, out):
    train, test = load_data(cfg)
    cfg.validate(len(train.vocab))
    pair = build_encoders(cfg, train.inputs().shape[1])
    log = MetricsLog(cfg.paths.metrics or None)
    anchors, _ = calibrate(cfg, train, pair, train.vocab, eval_split=test, log=log,
                           template=cfg.psc.prompt == "template")
    path = cfg.paths.anchors or "anchors.bin"
    save_anchors(anchors, path)
    teacher = Teacher(pair, anchors)
    out.write(f"anchors: {path} ({anchors.num_classes} x {anchors.dim}) digest={anchors.digest()}\n")
    out.write(f"teacher_top1: {top1_accuracy(teacher, test):.2f}\n")


def _cmd_distill(cfg, args, out):
    train, test, anchors = _load_split_and_anchors(cfg, args)
    result = run_pipeline(cfg, (train, test), anchors=anchors)
    last = result.log.stage("nsd")[-1] if result.log.stage("nsd") else {}
    out.write(f"anchors digest: {result.anchors.digest()}\n")
    out.write(f"student_top1: {top1_accuracy(result.student, test):.2f}\n")
    out.write(f"teacher_top1: {top1_accuracy(result.teacher, test):.2f}\n")
    if last:
        out.write("final: " + json.dumps(last, sort_keys=True) + "\n")
    if cfg.paths.checkpoints:
        out.write(f"checkpoint: {Path(cfg.paths.checkpoints) / 'student.ckpt'}\n")


def _cmd_evaluate(cfg, args, out):
    train, test, anchors = _load_split_and_anchors(cfg, args)
    if anchors is None:
        raise UsageError("evaluate requires --anchors")
    pair = build_encoders(cfg, train.inputs().shape[1])
    teacher = Teacher(pair, anchors)
    student = load_checkpoint(args.checkpoint).build_model()
    out.write(f"teacher_top1: {top1_accuracy(teacher, test):.2f}\n")
    out.write(f"student_top1: {top1_accuracy(student, test):.2f}\n")
    out.write(f"consistency: {neighborhood_consistency(teacher, student, test, cfg.nsd.weights.k):.8f}\n")
    if args.out:
        export_embeddings(student, test, args.out)
        out.write(f"embeddings: {args.out}\n")


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--grid expects comma-separated numbers, got {text!r}") from None


def _write_table(table, args, out, default: str):
    out.write(table.to_text())
    path = args.out or default
    if path:
        table.write(path)
        out.write(f"table: {path}\n")


def _cmd_sweep(cfg, args, out):
    train, test, anchors = _load_split_and_anchors(cfg, args)
    table = run_sweep(cfg, _parse_grid(args.grid), train, test, anchors=anchors, workers=args.workers)
    _write_table(table, args, out, "")


def _cmd_ablate(cfg, args, out):
    train, test, anchors = _load_split_and_anchors(cfg, args)
    table = run_ablation(cfg, train, test, learned_anchors=anchors, workers=args.workers)
    _write_table(table, args, out, "")


def _cmd_gen_toy(cfg, args, out):
    if cfg.data.source != "toy":
        raise UsageError("gen-toy requires data.source = toy")
    train, test = load_data(cfg)
    path = args.out or "toy.bin"
    save_toy(path, train, test)
    out.write(f"dataset: {path} ({len(train)} train, {len(test)} test, {len(train.vocab)} classes)\n")


HANDLERS = {
    "calibrate": _cmd_calibrate, "distill": _cmd_distill, "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep, "ablate": _cmd_ablate, "gen-toy": _cmd_gen_toy,
}


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        _echo(cfg, out)
        HANDLERS[args.command](cfg, args, out)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"pand {args.command}: error: {exc}\n")
        return 2
    except (PandError, OSError, ValueError, RuntimeError) as exc:
        sys.stderr.write(f"pand {args.command}: failed: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
