"""Command-line entry point: ``capsprune {train,eval,prune,report}``.

On failure the last line on stderr is ``error: <ErrorClass>: <message>`` and
the exit status is 1 (2 for argument errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, dump_json, load_config
from .errors import CapspruneError
from .training import cmd_eval, cmd_prune, cmd_report, cmd_train


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _u64(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsprune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a capsule network on top of a conv backbone")
    t.add_argument("--config", type=Path, help="experiment JSON (defaults used when omitted)")
    t.add_argument("--seed", type=_u64)
    t.add_argument("--out", type=Path)
    t.add_argument("--epochs", type=int)
    t.add_argument("--freeze-backbone", type=_bool, metavar="BOOL")

    e = sub.add_parser("eval", help="test accuracy and cost of a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--config", type=Path, help="dataset settings override")

    pr = sub.add_parser("prune", help="prune the backbone, simplify, finetune and compare")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--ratio", type=float, help="fraction of channels dropped per stage")
    pr.add_argument("--out", type=Path, required=True)
    pr.add_argument("--epochs", type=int, dest="finetune_epochs", help="finetune epochs")
    pr.add_argument("--freeze-backbone", type=_bool, metavar="BOOL")

    r = sub.add_parser("report", help="aggregate completed runs into a table")
    r.add_argument("run_dir", type=Path, nargs="?")
    r.add_argument("--out", type=Path, help="same as RUN_DIR")
    return p


def run(args: argparse.Namespace) -> int:
    if args.command == "train":
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        overrides = {"seed": args.seed, "out": None if args.out is None else str(args.out),
                     "epochs": args.epochs, "freeze_backbone": args.freeze_backbone}
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})
        summary = cmd_train(cfg)
        print(json.dumps({k: summary[k] for k in ("accuracy", "primary_caps", "total_flops", "best_epoch")}))
    elif args.command == "eval":
        cfg = load_config(args.config) if args.config else None
        result = cmd_eval(args.checkpoint, cfg)
        result.pop("cost")
        print(json.dumps(result))
    elif args.command == "prune":
        from .checkpoint import load_checkpoint

        ratio = args.ratio
        if ratio is None:
            ratio = load_checkpoint(args.checkpoint).config.get("prune_ratio", 0.0)
        cmd_prune(args.checkpoint, ratio, args.out, args.finetune_epochs, args.freeze_backbone)
        sys.stdout.write((args.out / "prune_report.txt").read_text())
    elif args.command == "report":
        run_dir = args.run_dir or args.out
        if run_dir is None:
            raise SystemExit("report: give a run directory")
        sys.stdout.write(cmd_report(run_dir)["table"])
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return run(args)
    except (CapspruneError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
