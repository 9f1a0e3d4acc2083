"""Command-line entry point honoring the trial runner's exit-code contract.

The argument list arrives exactly as the runner substituted it: absolute
paths for {config}, {train_ann}, {val_ann}, {images_dir}, {out_dets},
{workdir}. Exit 0 means the results JSON at --out-dets is ready; any nonzero
exit marks the trial failed. GPU assignment comes from CUDA_VISIBLE_DEVICES
set by the calling template.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from .config import AdapterConfig, UnmappedKeyError, read_flat_config, resolve_overrides

EXIT_OK = 0
EXIT_UNMAPPED_KEY = 2
EXIT_ENV_FAILURE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gdino-adapter",
        description="Run one GroundingDINO fine-tune-and-predict trial from a flat trial config.",
    )
    parser.add_argument("--config", required=True, help="flat key=value trial config")
    parser.add_argument("--train-ann", help="COCO annotations to fine-tune on")
    parser.add_argument("--val-ann", help="COCO annotations to predict on")
    parser.add_argument("--images-dir", help="image root for both splits")
    parser.add_argument("--out-dets", required=True, help="COCO results JSON output path")
    parser.add_argument("--workdir", help="scratch directory for checkpoints and logs")
    parser.add_argument("--checkpoint", default=AdapterConfig.checkpoint,
                        help="pretrained checkpoint path")
    parser.add_argument("--base-config", default=AdapterConfig.base_config,
                        help="trainer-native base configuration name")
    parser.add_argument("--device", default="auto")
    parser.add_argument("--dry-run", action="store_true",
                        help="emit the resolved override set and an empty results array")
    parser.add_argument("--stub-model", action="store_true",
                        help="train a tiny randomly initialized detector instead of the real model")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = AdapterConfig(checkpoint=args.checkpoint, base_config=args.base_config,
                        device=args.device)
    try:
        trial = read_flat_config(args.config)
    except (OSError, ValueError) as e:
        print(f"cannot read trial config: {e}", file=sys.stderr)
        return EXIT_ENV_FAILURE

    try:
        resolved = resolve_overrides(trial, cfg)
    except UnmappedKeyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNMAPPED_KEY

    print(json.dumps(resolved, sort_keys=True))

    if args.dry_run:
        # purity: the results file is the only artifact a dry run may touch
        with open(args.out_dets, "w", encoding="utf-8") as fh:
            json.dump([], fh)
        return EXIT_OK

    for name in ("train_ann", "val_ann", "images_dir"):
        if getattr(args, name) is None:
            print(f"--{name.replace('_', '-')} is required outside --dry-run",
                  file=sys.stderr)
            return EXIT_ENV_FAILURE

    overrides = resolved["overrides"]
    if args.stub_model:
        try:
            from .stub import run_stub

            run_stub(
                train_ann=Path(args.train_ann),
                val_ann=Path(args.val_ann),
                images_dir=Path(args.images_dir),
                out_dets=Path(args.out_dets),
                seed=int(overrides.get("randomness.seed", 0)),
                epochs=int(overrides.get("train_cfg.max_epochs", 2)),
                lr=float(overrides.get("optim_wrapper.optimizer.lr", 1e-3)),
                device=args.device,
            )
            return EXIT_OK
        except Exception:
            traceback.print_exc()
            return EXIT_ENV_FAILURE

    # real mode: hand the resolved configuration to the training framework
    try:
        from .real import run_real  # noqa: F401
    except ImportError:
        print(
            "real training mode needs the GroundingDINO/mmdetection stack, which "
            "is not installed in this environment; use --stub-model or --dry-run, "
            "or install the framework and provide a checkpoint",
            file=sys.stderr,
        )
        return EXIT_ENV_FAILURE
    try:
        run_real(args, resolved)
        return EXIT_OK
    except Exception:
        traceback.print_exc()
        return EXIT_ENV_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
