"""Argparse front door for the anomseg command."""

from __future__ import annotations

import argparse
import sys

from ..errors import AnomsegError
from .config import RunConfig, apply_overrides, read_raw_config


def _config_from_args(args) -> RunConfig:
    raw = read_raw_config(args.config) if args.config is not None else {}
    raw = apply_overrides(raw, getattr(args, "override", None))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        raw["out"] = args.out
    return RunConfig.from_dict(raw)


def _add_common(parser, needs_config=True):
    parser.add_argument("--config", required=needs_config,
                        help="JSON run config (see cli.config schema)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default=None,
                        help="override the config output directory")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.lr=1e-4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomseg",
        description="Train and evaluate the toy multimodal "
                    "anomaly-localization pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--per-class", type=int, default=80)
    p.add_argument("--size", type=int, default=64,
                   help="square image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("train", help="train from a run config")
    _add_common(p)
    p.add_argument("--checkpoint", default=None,
                   help="resume from this checkpoint directory")

    p = sub.add_parser("evaluate", help="score held-out classes")
    _add_common(p)
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint directory or model.bin")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--oracle", action="store_true",
                   help="use ground-truth masks as predictions "
                        "(harness self-test)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("infer", help="answer + mask for one image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", default=None)

    p = sub.add_parser("selfcheck", help="gradient and oracle diagnostics")
    p.add_argument("--inject-bug", action="store_true",
                   help="negative control: corrupt one check on purpose")

    p = sub.add_parser("ablation", help="projector x alignment grid")
    _add_common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--cells", nargs="+", default=None,
                   help="subset of: full no_align no_ltc none")
    p.add_argument("--jobs", type=int, default=1)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            from ..databench.generator import generate_dataset
            info = generate_dataset(args.out, num_classes=args.classes,
                                    per_class=args.per_class,
                                    image_hw=(args.size, args.size),
                                    seed=args.seed,
                                    overwrite=args.overwrite)
            print(f"wrote {info['images']} images across "
                  f"{info['classes']} classes under {args.out}")
        elif args.command == "train":
            from .train import run_train
            config = _config_from_args(args)
            run_train(config, resume=args.checkpoint)
        elif args.command == "evaluate":
            from .evaluate import run_evaluate
            config = _config_from_args(args)
            run_evaluate(config, args.checkpoint, split=args.split,
                         oracle=args.oracle, workers=args.workers)
        elif args.command == "infer":
            from .infer import run_infer
            config = _config_from_args(args)
            run_infer(config, args.checkpoint, args.image,
                      instruction=args.instruction,
                      out_dir=args.out)
        elif args.command == "selfcheck":
            from .selfcheck import run_selfcheck
            results = run_selfcheck(inject_bug=args.inject_bug)
            return 0 if all(r.passed for r in results) else 1
        elif args.command == "ablation":
            from .ablation import CELLS, run_ablation
            config = _config_from_args(args)
            run_ablation(config, seeds=args.seeds,
                         cells=args.cells or tuple(CELLS),
                         jobs=args.jobs)
    except AnomsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced with context
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
