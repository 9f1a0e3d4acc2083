"""Trainer-exchange protocol: launch an external fine-tune process per trial.

The contract is file-based: the trial configuration goes out as a flat
`key = value` text file, annotations go out as COCO JSON, and the trainer
must write a COCO results JSON to the path given by {out_dets}. Exit code 0
means success; anything else (or a timeout) marks the trial failed without
ever aborting the surrounding search.

A deterministic synthetic trainer is built in for desk-scale testing and can
be invoked in-process or through the same subprocess protocol
(`python -m ets.runner`), yielding identical detections either way.
"""

from __future__ import annotations

import hashlib
import logging
import math
import shlex
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from .boxes import BBox
from .dataset import DetDataset
from .evaluation import Detection, DetectionValidationError, dump_detections, load_detections
from .rng import substream

if TYPE_CHECKING:
    from .search import TrialConfig

log = logging.getLogger(__name__)

PLACEHOLDERS = ("config", "train_ann", "images_dir", "val_ann", "out_dets", "workdir")
RESERVED_CONFIG_KEYS = ("seed", "trial_id")


@dataclass
class TrainerCommand:
    """Command template with {placeholder} slots, executed once per trial."""

    template: str
    timeout: float = 24 * 3600.0
    declares_deterministic: bool = False

    def __post_init__(self):
        if "{config}" not in self.template or "{out_dets}" not in self.template:
            raise ValueError("trainer template must contain {config} and {out_dets}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be positive, got {self.timeout}")


def synthetic_trainer_command(timeout: float = 300.0) -> TrainerCommand:
    """TrainerCommand invoking the built-in synthetic trainer as a subprocess."""
    import sys

    return TrainerCommand(
        template=(
            f"{sys.executable} -m ets.runner --config {{config}} "
            "--val-ann {val_ann} --out-dets {out_dets}"
        ),
        timeout=timeout,
        declares_deterministic=True,
    )


@dataclass
class TrialRun:
    """Outcome of one trainer invocation."""

    trial: "TrialConfig"
    exit_status: int
    out_dets: Path
    captured_log: Path
    duration: float
    failure: str | None = None  # None, "nonzero-exit", "timeout", "bad-output"

    @property
    def succeeded(self) -> bool:
        return self.failure is None


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_trial_config(trial: "TrialConfig", path) -> None:
    """Serialize a trial as flat `key = value` lines the adapter side interprets."""
    lines = [f"{k} = {_format_value(v)}" for k, v in trial.assignment.items()]
    if "seed" not in trial.assignment:
        lines.append(f"seed = {trial.seed}")
    if "trial_id" not in trial.assignment:
        lines.append(f"trial_id = {trial.trial_id}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trial_config(path) -> dict[str, str]:
    """Parse the flat key-value trial file back into raw string values."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"trial config line {lineno} is not 'key = value': {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def substitute_template(template: str, mapping: dict[str, str]) -> list[str]:
    """Split the template, then replace {name} slots inside each token.

    Only the six protocol placeholders are substituted; everything else passes
    through verbatim.
    """
    argv = []
    for token in shlex.split(template):
        for name, value in mapping.items():
            token = token.replace("{" + name + "}", value)
        argv.append(token)
    return argv


def run_trial(
    cmd: TrainerCommand,
    trial: "TrialConfig",
    episode,
    valset: DetDataset,
    workdir,
    images_dir=None,
) -> TrialRun:
    """Serialize inputs, execute the trainer, and schema-gate its output.

    The child's failure never propagates: nonzero exit, timeout, or
    unparseable output yields a TrialRun with the corresponding failure tag.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    config_path = workdir / "trial_config.txt"
    train_ann = workdir / "train_ann.json"
    val_ann = workdir / "val_ann.json"
    out_dets = workdir / "detections.json"
    log_path = workdir / "trainer.log"
    if images_dir is None:
        images_dir = workdir / "images"
        Path(images_dir).mkdir(exist_ok=True)

    write_trial_config(trial, config_path)
    episode.base.save(train_ann)
    valset.save(val_ann)

    mapping = {
        "config": str(config_path.resolve()),
        "train_ann": str(train_ann.resolve()),
        "images_dir": str(Path(images_dir).resolve()),
        "val_ann": str(val_ann.resolve()),
        "out_dets": str(out_dets.resolve()),
        "workdir": str(workdir.resolve()),
    }
    argv = substitute_template(cmd.template, mapping)

    start = time.monotonic()
    failure = None
    with open(log_path, "wb") as log_fh:
        try:
            proc = subprocess.run(
                argv, stdout=log_fh, stderr=subprocess.STDOUT, timeout=cmd.timeout
            )
            exit_status = proc.returncode
        except subprocess.TimeoutExpired:
            exit_status = -1
            failure = "timeout"
        except OSError as e:
            log_fh.write(f"failed to launch trainer: {e}\n".encode())
            exit_status = -1
            failure = "nonzero-exit"
    duration = time.monotonic() - start

    if failure is None and exit_status != 0:
        failure = "nonzero-exit"
    if failure is None:
        try:
            load_detections(out_dets)
        except (OSError, ValueError, DetectionValidationError) as e:
            log.warning("trial %d produced bad output: %s", trial.trial_id, e)
            failure = "bad-output"
    return TrialRun(
        trial=trial,
        exit_status=exit_status,
        out_dets=out_dets,
        captured_log=log_path,
        duration=duration,
        failure=failure,
    )


# ---------------------------------------------------------------------------
# synthetic trainer


def axis_target(name: str) -> float:
    """The value at which an axis maximizes the synthetic quality (q score 1)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return 8.0 * (int.from_bytes(digest[:8], "big") / 2**64)


def _value_coordinate(value) -> float:
    text = value if isinstance(value, str) else _format_value(value)
    try:
        return float(text)
    except ValueError:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        return 8.0 * (int.from_bytes(digest[:8], "big") / 2**64)


def synthetic_quality(assignment: dict) -> float:
    """Deterministic quality score in (0, 1] for a trial assignment.

    Geometric mean over axes of 1 / (1 + |x_k - t_k|) where t_k =
    axis_target(key) and x_k is the axis value (numeric values used directly,
    anything else hashed onto the same [0, 8) range). Separable and concave
    per axis with the unique maximizer x_k = t_k. The reserved seed/trial_id
    keys do not participate.
    """
    scores = [
        1.0 / (1.0 + abs(_value_coordinate(v) - axis_target(k)))
        for k, v in sorted(assignment.items())
        if k not in RESERVED_CONFIG_KEYS
    ]
    if not scores:
        return 1.0
    return float(math.exp(sum(math.log(s) for s in scores) / len(scores)))


def synthetic_trainer(trial: "TrialConfig", valset: DetDataset, seed: int) -> list[Detection]:
    """Emit one detection per ground-truth box, degraded by 1 - q(assignment).

    At q == 1 the detections equal the ground truth exactly at score 1.0. As q
    drops, boxes jitter harder, more boxes are missed, spurious boxes appear,
    and scores sink. Pure function of (assignment, valset, seed).
    """
    if not valset.images:
        raise ValueError("synthetic trainer needs a nonempty validation set")
    q = synthetic_quality(trial.assignment)
    noise = 1.0 - q
    rng = substream(seed)
    images = valset.images_by_id()

    dets: list[Detection] = []
    for a in valset.annotations:
        im = images[a.image_id]
        miss = rng.random() < 0.35 * noise
        jitter = rng.normal(0.0, 1.0, size=4)
        score = 1.0 - noise * rng.uniform(0.0, 0.8)
        spurious = rng.random() < 0.3 * noise
        if spurious:
            fx, fy, fw, fh, fs = rng.random(5)
            w = max(1.0, fw * im.width * 0.5)
            h = max(1.0, fh * im.height * 0.5)
            x = min(fx * im.width, im.width - w)
            y = min(fy * im.height, im.height - h)
            dets.append(
                Detection(
                    image_id=a.image_id,
                    category_id=a.category_id,
                    bbox=BBox(max(x, 0.0), max(y, 0.0), w, h),
                    score=round(0.05 + 0.9 * fs, 6),
                )
            )
        if miss:
            continue
        b = a.bbox
        wobble = 0.35 * noise
        x = b.x + jitter[0] * wobble * b.w
        y = b.y + jitter[1] * wobble * b.h
        w = b.w * max(0.05, 1.0 + jitter[2] * wobble)
        h = b.h * max(0.05, 1.0 + jitter[3] * wobble)
        x = min(max(x, 0.0), im.width - 1.0)
        y = min(max(y, 0.0), im.height - 1.0)
        w = min(max(w, 1.0), im.width - x)
        h = min(max(h, 1.0), im.height - y)
        dets.append(
            Detection(
                image_id=a.image_id,
                category_id=a.category_id,
                bbox=BBox(x, y, w, h),
                score=round(min(max(score, 0.01), 1.0), 6),
            )
        )
    return dets


def _synthetic_main(argv: list[str] | None = None) -> int:
    """Subprocess entry point for the synthetic trainer (the {config} protocol)."""
    import argparse

    from .dataset import load_coco
    from .search import TrialConfig

    parser = argparse.ArgumentParser(prog="ets.runner", description="built-in synthetic trainer")
    parser.add_argument("--config", required=True)
    parser.add_argument("--val-ann", required=True)
    parser.add_argument("--out-dets", required=True)
    args = parser.parse_args(argv)

    raw = read_trial_config(args.config)
    seed = int(raw.pop("seed", "0"))
    trial_id = int(raw.pop("trial_id", "0"))
    valset = load_coco(args.val_ann, split_tag="val")
    trial = TrialConfig(trial_id=trial_id, assignment=raw, seed=seed)
    dets = synthetic_trainer(trial, valset, seed)
    dump_detections(dets, args.out_dets)
    return 0


if __name__ == "__main__":
    raise SystemExit(_synthetic_main())
