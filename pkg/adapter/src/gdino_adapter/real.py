"""Real training mode: bridge the resolved overrides into an mmengine run.

Importable only where the GroundingDINO/mmdetection stack is installed; the
CLI treats ImportError as an environment failure. This module owns the
translation from the adapter's stable override namespace to the concrete
config structure of the base GroundingDINO fine-tune recipe (pipeline
entries are positional lists there, so augmentation overrides are applied by
locating the transform dict by type name).
"""

from __future__ import annotations

import json
from pathlib import Path

from mmengine.config import Config
from mmengine.runner import Runner

# override namespace -> (pipeline transform type, field) for pipeline entries
PIPELINE_FIELDS = {
    "train_pipeline.mosaic.prob": ("CachedMosaic", "prob"),
    "train_pipeline.mosaic.center_ratio": ("CachedMosaic", "center_ratio_range"),
    "train_pipeline.flip.prob": ("RandomFlip", "prob"),
    "train_pipeline.mixup.prob": ("CachedMixUp", "prob"),
    "train_pipeline.mixup.ratio": ("CachedMixUp", "ratio_range"),
    "train_pipeline.hsv.prob": ("YOLOXHSVRandomAug", "prob"),
    "train_pipeline.hsv.hue_delta": ("YOLOXHSVRandomAug", "hue_delta"),
    "train_pipeline.hsv.saturation_delta": ("YOLOXHSVRandomAug", "saturation_delta"),
    "train_pipeline.hsv.value_delta": ("YOLOXHSVRandomAug", "value_delta"),
}


def _set_pipeline_field(pipeline: list, transform_type: str, field: str, value) -> bool:
    for entry in pipeline:
        if entry.get("type") == transform_type:
            entry[field] = value
            return True
    return False


def _apply_overrides(cfg: Config, overrides: dict) -> None:
    pipeline = cfg.train_dataloader.dataset.get("pipeline", [])
    for key, value in overrides.items():
        if key in PIPELINE_FIELDS:
            transform_type, field = PIPELINE_FIELDS[key]
            if key.endswith((".ratio", ".center_ratio")):
                value = (value, value) if not isinstance(value, (list, tuple)) else tuple(value)
            if not _set_pipeline_field(pipeline, transform_type, field, value):
                raise KeyError(f"base config pipeline has no {transform_type} entry for {key}")
        elif key == "optim_wrapper.optimizer.lr":
            cfg.optim_wrapper.optimizer.lr = value
        elif key == "optim_wrapper.optimizer.weight_decay":
            cfg.optim_wrapper.optimizer.weight_decay = value
        elif key == "param_scheduler.milestones":
            for sched in cfg.param_scheduler:
                if "milestones" in sched:
                    sched["milestones"] = list(value)
        elif key == "train_cfg.max_epochs":
            cfg.train_cfg.max_epochs = int(value)
        elif key == "train_dataloader.batch_size":
            cfg.train_dataloader.batch_size = int(value)
        elif key == "randomness.seed":
            cfg.randomness = dict(seed=int(value), deterministic=True)
        elif key == "experiment.trial_id":
            cfg.setdefault("experiment_name", f"trial_{value}")
        else:
            raise KeyError(f"unhandled override {key}")


def run_real(args, resolved: dict) -> None:
    cfg = Config.fromfile(resolved["base_config"])
    _apply_overrides(cfg, resolved["overrides"])
    cfg.load_from = resolved["checkpoint"]
    cfg.work_dir = args.workdir or "."

    data_root = str(Path(args.images_dir))
    for loader_key, ann in (("train_dataloader", args.train_ann),
                            ("val_dataloader", args.val_ann),
                            ("test_dataloader", args.val_ann)):
        if loader_key in cfg:
            cfg[loader_key].dataset.ann_file = str(ann)
            cfg[loader_key].dataset.data_prefix = dict(img=data_root)
    for eval_key in ("val_evaluator", "test_evaluator"):
        if eval_key in cfg:
            cfg[eval_key].ann_file = str(args.val_ann)
            cfg[eval_key].format_only = eval_key == "test_evaluator"
            cfg[eval_key].outfile_prefix = str(Path(args.workdir or ".") / "pred")

    runner = Runner.from_cfg(cfg)
    runner.train()
    runner.test()

    # mmdet's CocoMetric format_only dump is <prefix>.bbox.json in results-list form
    dumped = Path(cfg.test_evaluator.outfile_prefix + ".bbox.json")
    results = json.loads(dumped.read_text(encoding="utf-8"))
    with open(args.out_dets, "w", encoding="utf-8") as fh:
        json.dump(results, fh)
