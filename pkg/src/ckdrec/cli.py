"""Command-line front end.

    ckdrec gen-data --config F [--seed N]
    ckdrec pretrain-teacher --config F --out PATH
    ckdrec export-teacher --config F --teacher PATH --out PATH
    ckdrec train --config F --out DIR [--override k=v ...]
    ckdrec evaluate --config F --checkpoint PATH
    ckdrec sweep --config F --out DIR

Failures exit with status 1 and one ``error: <command>: <message>`` line on
stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config, require_inputs
from .model import load_checkpoint, save_checkpoint
from . import pipeline


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ckdrec", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write seeded synthetic domain files")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides synthetic.seed")

    p = sub.add_parser("pretrain-teacher", help="train a teacher and save its checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-teacher", help="write a teacher's score matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="distill the student")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("evaluate", help="full-ranking evaluation of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="train one student per hyperparameter grid cell")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    return parser


def _run(args) -> None:
    cfg = load_config(args.config, getattr(args, "override", None))
    require_inputs(cfg, args.command)

    if args.command == "gen-data":
        for path in pipeline.gen_data(cfg, args.seed):
            print(path)
    elif args.command == "pretrain-teacher":
        target = pipeline.load_target(cfg)
        model = pipeline.pretrain_from_config(cfg, target)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out)
        print(out)
    elif args.command == "export-teacher":
        target = pipeline.load_target(cfg)
        teacher = Path(args.teacher)
        if not teacher.exists():
            raise FileNotFoundError(f"teacher checkpoint not found: {teacher}")
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        pipeline.export_teacher(cfg, target, teacher, out)
        print(out)
    elif args.command == "train":
        report = pipeline.run_train(cfg, Path(args.out))
        print(report.to_table())
    elif args.command == "evaluate":
        ckpt = Path(args.checkpoint)
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        target = pipeline.load_target(cfg)
        model = load_checkpoint(ckpt, cfg.model, target.split.num_items, dtype=cfg.np_dtype)
        report = pipeline.split_report(cfg, target, model)
        print(report.to_table())
        print(report.to_json())
        pipeline.write_report(report, ckpt.with_name(ckpt.name + ".report"))
    elif args.command == "sweep":
        rows = pipeline.run_sweep(cfg, Path(args.out))
        print(f"{len(rows)} sweep rows written to {Path(args.out) / 'sweep.tsv'}")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except Exception as exc:  # surfaced as one greppable line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {args.command}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
