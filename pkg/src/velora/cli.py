"""``velora`` command line.

Exit codes: 0 success, 1 check failure, 2 usage or config error,
3 data or geometry error.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

from . import tensor as T
from .config import RunConfig
from .errors import ConfigError, ContractError, DataError, FormatError, ShapeError
from .events import gen_synthetic, write_dataset
from .harness import SWEEP_AXES, gradcheck_model, load_batch, run_sweep, run_training
from .rng import make_rng
from .train import evaluate_top1, load_checkpoint

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
GRADCHECK_TOL = 1e-3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    return RunConfig.load(p)


def cmd_gen_data(args) -> int:
    if args.classes < 2 or args.classes > 16:
        raise ConfigError(f"--classes must be in [2, 16], got {args.classes}")
    if args.clips < 1 or args.frames < 2 or args.size < 4:
        raise ConfigError("--clips must be >= 1, --frames >= 2, --size >= 4")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    clips = gen_synthetic(args.clips, args.classes, args.size, args.size, args.frames, make_rng(args.seed, "data"))
    write_dataset(clips, out, make_rng(args.seed, "split"))
    n_train = int(round(0.8 * len(clips)))
    print(f"wrote {len(clips)} clips to {out} ({n_train} train / {len(clips) - n_train} test)")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _load_config(args.config)
    out = Path(args.out or run.out_dir)

    def log(trainer, row):
        print(
            f"epoch {row['epoch']:3d}  step {trainer.state.step:5d}  total {row['total']:.4f}  "
            f"ce {row['ce']:.4f}  top1 {row['top1']:.4f}  lr {row['lr']:.3g}",
            flush=True,
        )

    res = run_training(run, out, resume=args.resume, callback=log)
    print(f"train_top1={res.train_top1:.4f} test_top1={res.test_top1:.4f}")
    print(f"outputs in {res.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    run = ckpt.config
    if args.data is not None:
        run = run.updated(data_dir=args.data)
    data = load_batch(run, args.split)
    print(f"top1={evaluate_top1(ckpt.model, data)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = _load_config(args.config)
    if args.corrupt:
        with T.corrupt_backward(*args.corrupt):
            errors = gradcheck_model(run, eps=args.eps)
    else:
        errors = gradcheck_model(run, eps=args.eps)
    width = max(len(n) for n in errors)
    for name, err in errors.items():
        print(f"{name.ljust(width)}  {err:.3e}  {'ok' if err <= GRADCHECK_TOL else 'FAIL'}")
    worst = max(errors.values())
    print(f"worst={worst:.3e} groups={len(errors)}")
    return EXIT_OK if worst <= GRADCHECK_TOL else EXIT_CHECK


def cmd_sweep(args) -> int:
    run = _load_config(args.config)
    if args.out:
        run = run.updated(out_dir=args.out)

    def log(row):
        print(f"{args.axis}={row.value}  top1={row.top1:.4f}  trainable={row.trainable_params}", flush=True)

    report = run_sweep(run, args.axis, log=log)
    print(report.table_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="velora", description="Desk-scale RGB/event LoRA lab")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic RGB+event dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=200)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config")
    t.add_argument("--resume", help="continue from a checkpoint (its config wins)")
    t.add_argument("--out", help="output directory (default: out_dir from the config)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="dataset directory (default: the checkpoint's data)")
    e.add_argument("--split", default="test", choices=("train", "test", "all"))
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every trainable group")
    c.add_argument("--config")
    c.add_argument("--eps", type=float, default=1e-3)
    c.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)
    c.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("sweep", help="ablation sweep along one axis")
    s.add_argument("--axis", required=True, choices=tuple(SWEEP_AXES))
    s.add_argument("--config")
    s.add_argument("--out", help="output root (default: out_dir from the config)")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, FormatError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
