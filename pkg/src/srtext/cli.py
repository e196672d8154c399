"""Command-line interface.

Subcommands: datagen, train, eval, infer, profile. Exit codes: 0 success,
2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .config import ConfigError, ModelConfig, load_config
from .datagen import (
    DatasetError,
    DegradeParams,
    generate_dataset,
    load_dataset,
    load_image_tensor,
    save_image_tensor,
    write_manifest,
)
from .losses import NumericsError
from .metrics import evaluate, greedy_ctc_decode, profile
from .pipeline import (
    TrainOptions,
    build_model,
    fit,
    load_checkpoint,
    model_from_checkpoint,
)

_USAGE_ERROR = 2
_DATA_ERROR = 3
_NUMERIC_ERROR = 4


@dataclass
class RunOptions:
    command: str
    config_path: str | None = None
    data_dir: str | None = None
    out_dir: str | None = None
    checkpoint_path: str | None = None
    seed: int = 0
    steps: int = 0
    determinism: bool = False


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srtext",
        description="Scene-text super-resolution and recognition with "
        "iterative cross-branch guidance.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON model config; flags override it")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument(
            "--determinism",
            action="store_true",
            help="force deterministic kernels and fixed seeding",
        )

    p = sub.add_parser("datagen", help="render synthetic LR/HR pairs + manifest")
    common(p)
    p.add_argument("--n", type=int, required=True, help="number of pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=6)
    p.add_argument("--blur-sigma", type=float, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)

    p = sub.add_parser("train", help="fit a model on a manifest directory")
    common(p)
    p.add_argument("--data", required=True, help="directory with manifest.jsonl")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--log", help="JSONL training log path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=0)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest directory")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for SR images and report.json")
    p.add_argument(
        "--per-iteration",
        action="store_true",
        help="also score every intermediate distribution and SR image",
    )

    p = sub.add_parser("infer", help="super-resolve and read one image")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("profile", help="print MACs, params, and latency")
    common(p)
    p.add_argument("--ckpt", help="profile this checkpoint's model")

    return parser


def _apply_determinism(args) -> None:
    if getattr(args, "determinism", False):
        torch.manual_seed(args.seed)
        torch.use_deterministic_algorithms(True, warn_only=True)


def _load_cfg(args) -> ModelConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return ModelConfig()


def _cmd_datagen(args) -> int:
    cfg = _load_cfg(args)
    params = DegradeParams()
    if args.blur_sigma is not None:
        params = DegradeParams(blur_sigma=args.blur_sigma, noise_sigma=params.noise_sigma)
    if args.noise_sigma is not None:
        params = DegradeParams(blur_sigma=params.blur_sigma, noise_sigma=args.noise_sigma)
    pairs = generate_dataset(
        args.n, args.seed, cfg, params, min_len=args.min_len, max_len=args.max_len
    )
    write_manifest(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    pairs = load_dataset(args.data, cfg)
    if not pairs:
        raise DatasetError(f"no samples found in {args.data}")
    resume = load_checkpoint(args.resume, expected_cfg=cfg) if args.resume else None
    opts = TrainOptions(
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        log_path=args.log,
        checkpoint_path=args.out,
        checkpoint_every=args.checkpoint_every,
        eval_every=args.eval_every,
    )
    ckpt = fit(pairs, cfg, opts, resume=resume)
    print(f"trained to step {ckpt.step}; checkpoint at {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    pairs = load_dataset(args.data, ckpt.cfg)
    if not pairs:
        raise DatasetError(f"no samples found in {args.data}")
    report = evaluate(
        ckpt, pairs, ckpt.cfg, out_dir=args.out, per_iteration=args.per_iteration
    )
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    cfg = ckpt.cfg
    img = torch.as_tensor(load_image_tensor(args.image))
    if img.shape[0] != cfg.channels:
        raise DatasetError(
            f"{args.image}: expected {cfg.channels} channels, got {img.shape[0]}"
        )
    if img.shape[1:] != (cfg.height, cfg.width):
        img = F.interpolate(
            img.unsqueeze(0),
            size=(cfg.height, cfg.width),
            mode="bilinear",
            align_corners=False,
        ).squeeze(0)
    with torch.no_grad():
        trace = model(img.unsqueeze(0))
    text = greedy_ctc_decode(trace.p_list[-1][0], cfg)
    out_path = Path(args.image).with_suffix(".sr.png")
    save_image_tensor(trace.sr_images[-1][0], out_path)
    print(text)
    return 0


def _cmd_profile(args) -> int:
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        cfg, model = ckpt.cfg, model_from_checkpoint(ckpt)
    else:
        cfg = _load_cfg(args)
        model = build_model(cfg, args.seed)
    report = profile(model, cfg)
    print(f"{'module':<40} {'MACs':>14}")
    for name, macs in sorted(report.per_module.items(), key=lambda kv: -kv[1]):
        print(f"{name:<40} {macs:>14,}")
    print(f"{'total':<40} {report.macs:>14,}")
    print(f"params: {report.params:,}")
    print(f"latency: {report.latency_ms:.2f} ms (median warm run)")
    return 0


_HANDLERS = {
    "datagen": _cmd_datagen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "profile": _cmd_profile,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        _apply_determinism(args)
        return _HANDLERS[args.command](args)
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _NUMERIC_ERROR
    except (DatasetError, ConfigError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DATA_ERROR


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
