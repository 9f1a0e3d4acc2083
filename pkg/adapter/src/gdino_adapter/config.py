"""Trial-key to trainer-override mapping.

Every key arriving in a trial config file must either map to a
trainer-native override key or be rejected by name; silent pass-through is
how grid axes rot. Loss weights, query count and text length are fixed
adapter defaults, deliberately not reachable from the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class UnmappedKeyError(Exception):
    """A trial config key with no trainer-native translation."""

    def __init__(self, key: str):
        super().__init__(
            f"trial config key {key!r} has no trainer-native mapping; "
            f"known keys: {', '.join(sorted(KEY_MAP))}"
        )
        self.key = key


# trial-config key -> trainer override key (mmengine-style dotted paths)
KEY_MAP: dict[str, str] = {
    "lr": "optim_wrapper.optimizer.lr",
    "weight_decay": "optim_wrapper.optimizer.weight_decay",
    "milestones": "param_scheduler.milestones",
    "epochs": "train_cfg.max_epochs",
    "batch_size": "train_dataloader.batch_size",
    "mosaic_p": "train_pipeline.mosaic.prob",
    "mosaic_center_jitter": "train_pipeline.mosaic.center_ratio",
    "flip_p": "train_pipeline.flip.prob",
    "mixup_p": "train_pipeline.mixup.prob",
    "mixup_lambda": "train_pipeline.mixup.ratio",
    "hsv_p": "train_pipeline.hsv.prob",
    "hue_delta": "train_pipeline.hsv.hue_delta",
    "sat_delta": "train_pipeline.hsv.saturation_delta",
    "val_delta": "train_pipeline.hsv.value_delta",
    "resize_p": "train_pipeline.resize.prob",
    "resize_scale_min": "train_pipeline.resize.scale_min",
    "resize_scale_max": "train_pipeline.resize.scale_max",
    "crop_p": "train_pipeline.crop.prob",
    "crop_rel_size": "train_pipeline.crop.rel_size",
    "seed": "randomness.seed",
    "trial_id": "experiment.trial_id",
}

# schedule and augmentation defaults the search may override per trial
DEFAULT_OVERRIDES: dict[str, object] = {
    "param_scheduler.milestones": [1, 5, 9],
    "train_pipeline.mosaic.prob": 0.6,
    "train_pipeline.flip.prob": 0.5,
    "train_pipeline.mixup.prob": 0.3,
}

# fixed by the adapter, never grid axes: Hungarian-matching weights
# (classification / L1 / GIoU), final loss weights, query budget, text length
FIXED_SETTINGS: dict[str, object] = {
    "model.matching_cost.cls_weight": 2.0,
    "model.matching_cost.l1_weight": 5.0,
    "model.matching_cost.giou_weight": 2.0,
    "model.loss.cls_weight": 1.0,
    "model.loss.l1_weight": 5.0,
    "model.loss.giou_weight": 2.0,
    "model.num_queries": 900,
    "model.max_text_len": 256,
}


@dataclass
class AdapterConfig:
    checkpoint: str = "groundingdino_swinb_cogcoor.pth"
    base_config: str = "grounding_dino_swin-b_finetune_16xb2"
    device: str = "auto"
    key_map: dict[str, str] = field(default_factory=lambda: dict(KEY_MAP))


def parse_value(text: str):
    """Interpret a flat-config value: int, float, comma list, or raw string."""
    if "," in text:
        return [parse_value(part.strip()) for part in text.split(",")]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    if text in ("true", "false"):
        return text == "true"
    return text


def read_flat_config(path) -> dict[str, str]:
    """Parse the runner's `key = value` trial file."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def resolve_overrides(trial: dict[str, str], cfg: AdapterConfig) -> dict:
    """Defaults, then trial values, each key mapped or rejected by name."""
    overrides = dict(DEFAULT_OVERRIDES)
    for key, raw in trial.items():
        target = cfg.key_map.get(key)
        if target is None:
            raise UnmappedKeyError(key)
        overrides[target] = parse_value(raw)
    return {
        "base_config": cfg.base_config,
        "checkpoint": cfg.checkpoint,
        "device": cfg.device,
        "overrides": overrides,
        "fixed": dict(FIXED_SETTINGS),
    }
