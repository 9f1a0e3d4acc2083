"""The `ets` command: dataset, augment, eval, search and runner operations.

Exit codes: 0 success, 1 domain error (bad data, failed search), 2 usage
error. All randomness flows from --seed flags or the global config; no
command reads ambient entropy, so any sequence of invocations with fixed
seeds is reproducible.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import yaml

from . import augment as aug
from . import dataset as ds
from . import evaluation as ev
from . import runner as rn
from . import search as sr

DOMAIN_ERRORS = (
    ds.DatasetError,
    ev.DetectionValidationError,
    sr.SearchError,
    aug.CacheUnderfillError,
    ValueError,
    OSError,
)


@dataclass
class GlobalConfig:
    master_seed: int = 0
    workdir: Path = Path("ets-work")
    log_level: str = "INFO"
    iou_thresholds: list[float] | None = None
    aug_spec: Path | None = None


def load_global_config(path: Path | None) -> GlobalConfig:
    cfg = GlobalConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        cfg.master_seed = int(doc.get("master_seed", cfg.master_seed))
        if "workdir" in doc:
            cfg.workdir = Path(doc["workdir"])
        cfg.log_level = str(doc.get("log_level", cfg.log_level))
        if "iou_thresholds" in doc:
            cfg.iou_thresholds = [float(t) for t in doc["iou_thresholds"]]
        if "aug_spec" in doc:
            cfg.aug_spec = Path(doc["aug_spec"])
    env_workdir = os.environ.get("ETS_WORKDIR")
    if env_workdir:
        cfg.workdir = Path(env_workdir)
    return cfg


def _emit(payload: dict, as_json: bool, lines: list[str]) -> None:
    if as_json:
        click.echo(json.dumps(payload, sort_keys=True))
    else:
        for line in lines:
            click.echo(line)


def _rate_range(ctx, param, value):
    if value is not None and not (0.0 < value <= 1.0):
        raise click.BadParameter("rate must be in (0, 1]")
    return value


def _load_trainer(spec: str) -> rn.TrainerCommand:
    if spec == "synthetic":
        return rn.synthetic_trainer_command()
    with open(spec, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return rn.TrainerCommand(
        template=str(doc["template"]),
        timeout=float(doc.get("timeout", 24 * 3600)),
        declares_deterministic=bool(doc.get("declares_deterministic", False)),
    )


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="Global config file (YAML).")
@click.option("--workdir", type=click.Path(path_type=Path), default=None,
              help="Working directory (overrides config and ETS_WORKDIR).")
@click.option("--seed", type=int, default=None, help="Master seed fallback for subcommands.")
@click.pass_context
def main(ctx, config_path, workdir, seed):
    """Few-shot detection experiment toolkit: augment, evaluate, tune, search."""
    cfg = load_global_config(config_path)
    if workdir is not None:
        cfg.workdir = workdir
    if seed is not None:
        cfg.master_seed = seed
    logging.basicConfig(level=getattr(logging, cfg.log_level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = cfg


# ---------------------------------------------------------------------------
# dataset


@main.group()
def dataset():
    """Ingest COCO datasets, build episodes and validation sets."""


@dataset.command("ingest")
@click.option("--ann", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--lenient", is_flag=True, help="Drop invalid boxes with a warning.")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Write a normalized copy of the dataset.")
@click.option("--json", "as_json", is_flag=True)
def dataset_ingest(ann, lenient, out, as_json):
    """Parse and validate a COCO annotation file."""
    data = ds.load_coco(ann, lenient=lenient)
    counts = data.category_counts()
    if out is not None:
        data.save(out)
    payload = {
        "images": len(data.images),
        "annotations": len(data.annotations),
        "categories": {str(cid): {"name": data.categories[cid], "count": counts[cid]}
                       for cid in sorted(data.categories)},
    }
    lines = [f"images: {len(data.images)}  annotations: {len(data.annotations)}"]
    lines += [f"  [{cid}] {data.categories[cid]}: {counts[cid]}" for cid in sorted(data.categories)]
    _emit(payload, as_json, lines)


@dataset.command("episode")
@click.option("--ann", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--k", required=True, type=click.IntRange(min=1))
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def dataset_episode(cfg: GlobalConfig, ann, k, seed, out, as_json):
    """Sample a K-shot episode (K annotation instances per category)."""
    seed = cfg.master_seed if seed is None else seed
    data = ds.load_coco(ann)
    episode = ds.sample_kshot(data, k=k, seed=seed)
    ds.save_episode(episode, out)
    payload = {
        "k": k,
        "seed": seed,
        "images": len(episode.base.images),
        "annotations": len(episode.base.annotations),
        "out": str(out),
    }
    _emit(payload, as_json, [
        f"episode k={k} seed={seed}: {len(episode.base.images)} images, "
        f"{len(episode.base.annotations)} annotations -> {out}"
    ])


@dataset.command("valset")
@click.option("--ann", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--rate", required=True, type=float, callback=_rate_range)
@click.option("--seed", type=int, default=None)
@click.option("--disjoint", is_flag=True, help="Also emit the complementary remainder split.")
@click.option("--coarse-map", "coarse_map", type=click.Path(exists=True, path_type=Path),
              default=None, help="Relabeling file: `fine_id coarse_id coarse_name` per line.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--remainder-out", type=click.Path(path_type=Path), default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def dataset_valset(cfg: GlobalConfig, ann, rate, seed, disjoint, coarse_map, out,
                   remainder_out, as_json):
    """Build a coarse-labeled validation set stratified by category."""
    seed = cfg.master_seed if seed is None else seed
    test = ds.load_coco(ann, split_tag="test")
    coarse = None
    if coarse_map is not None:
        coarse = ds.CoarseLabelMap.parse(Path(coarse_map).read_text(encoding="utf-8"))
    result = ds.build_validation_set(test, rate=rate, coarse=coarse, seed=seed, disjoint=disjoint)
    if disjoint:
        val, remainder = result
        if remainder_out is None:
            remainder_out = Path(str(out) + ".remainder.json")
        remainder.save(remainder_out)
    else:
        val = result
    val.save(out)

    reference = test if coarse is None else ds.apply_coarse_map(test, coarse)
    report = ds.distribution_report(val, reference)
    payload = {
        "rate": rate,
        "seed": seed,
        "images": len(val.images),
        "annotations": len(val.annotations),
        "max_abs_deviation": report.max_abs_deviation,
        "out": str(out),
    }
    lines = [
        f"valset rate={rate} seed={seed}: {len(val.images)} images, "
        f"{len(val.annotations)} annotations -> {out}",
        f"max per-category proportion deviation vs test: {report.max_abs_deviation:.4f}",
    ]
    if disjoint:
        payload["remainder_out"] = str(remainder_out)
        lines.append(f"remainder -> {remainder_out}")
    _emit(payload, as_json, lines)


# ---------------------------------------------------------------------------
# augment


@main.group("augment")
def augment_group():
    """Run the augmentation pipeline for visual inspection."""


@augment_group.command("preview")
@click.option("--spec", "spec_path", type=click.Path(exists=True, path_type=Path), default=None,
              help="Pipeline spec file; defaults to the built-in mixed pipeline.")
@click.option("--ann", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--images-dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--limit", type=int, default=8, help="Max images to augment.")
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def augment_preview(cfg: GlobalConfig, spec_path, ann, images_dir, seed, out, limit, as_json):
    """Write augmented PNGs plus box-overlay sidecar JSON."""
    seed = cfg.master_seed if seed is None else seed
    if spec_path is None and cfg.aug_spec is not None:
        spec_path = cfg.aug_spec
    spec = aug.load_pipeline_spec(spec_path) if spec_path else aug.default_pipeline_spec()
    data = ds.load_coco(ann)
    by_image = data.annotations_by_image()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cache = aug.SampleCache(spec.cache_capacity)

    written = []
    for index, im in enumerate(data.images[:limit]):
        pixels = aug.read_image(Path(images_dir) / im.file_name)
        boxes = [aug.LabeledBox(a.bbox, a.category_id) for a in by_image[im.id]]
        sample = aug.Sample(pixels=pixels, boxes=boxes)
        result = aug.apply_pipeline(sample, spec, cache, seed=seed, index=index)
        png = out / f"{Path(im.file_name).stem}_aug.png"
        aug.write_png(png, result.pixels)
        sidecar = out / f"{Path(im.file_name).stem}_aug.json"
        sidecar.write_text(json.dumps({
            "file": png.name,
            "width": result.width,
            "height": result.height,
            "boxes": [
                {"bbox": lb.bbox.as_xywh(), "category_id": lb.category_id}
                for lb in result.boxes
            ],
        }, indent=2, sort_keys=True), encoding="utf-8")
        written.append(png.name)
    _emit({"seed": seed, "written": written, "out": str(out)}, as_json,
          [f"wrote {len(written)} augmented images to {out}"])


# ---------------------------------------------------------------------------
# eval


@main.command("eval")
@click.option("--gt", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--dets", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--iou-thrs", default=None,
              help="Comma-separated IoU thresholds (default 0.50:0.95 step 0.05).")
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def eval_cmd(cfg: GlobalConfig, gt, dets, iou_thrs, as_json):
    """Score a COCO results file against ground truth."""
    gt_ds = ds.load_coco(gt, split_tag="test")
    detections = ev.load_detections(dets)
    thresholds = cfg.iou_thresholds
    if iou_thrs is not None:
        thresholds = [float(t) for t in iou_thrs.split(",")]
    result = ev.evaluate(detections, gt_ds, thresholds=thresholds)
    lines = [f"mAP: {result.map:.4f}"]
    lines += [
        f"  AP@{thr:.2f}: {m:.4f}"
        for thr, m in zip(result.thresholds, result.per_threshold_map)
    ]
    for cid in sorted(gt_ds.categories):
        cap = result.category_ap(cid)
        shown = "n/a" if cap is None else f"{cap:.4f}"
        lines.append(f"  [{cid}] {gt_ds.categories[cid]}: {shown}")
    _emit(result.to_dict(), as_json, lines)


# ---------------------------------------------------------------------------
# search


@main.group()
def search():
    """Grid search over trainer configurations."""


@search.command("run")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--trainer", required=True,
              help="Trainer spec file (YAML), or 'synthetic' for the built-in test trainer.")
@click.option("--episode", "episode_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--valset", "valset_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--parallelism", type=click.IntRange(min=1), default=1)
@click.option("--patience", type=click.IntRange(min=1), default=None,
              help="Early stop after this many consecutive non-improving trials.")
@click.option("--seed", type=int, default=None)
@click.option("--images-dir", type=click.Path(path_type=Path), default=None)
@click.option("--ledger", "ledger_path", type=click.Path(path_type=Path), default=None,
              help="Ledger output path (default: <workdir>/ledger.jsonl).")
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def search_run(cfg: GlobalConfig, grid_path, trainer, episode_path, valset_path,
               parallelism, patience, seed, images_dir, ledger_path, as_json):
    """Dispatch every grid point and select the best configuration."""
    seed = cfg.master_seed if seed is None else seed
    grid = sr.load_grid(grid_path)
    cmd = _load_trainer(trainer)
    episode = ds.load_episode(episode_path)
    valset = ds.load_coco(valset_path, split_tag="val")
    if ledger_path is None:
        ledger_path = cfg.workdir / "ledger.jsonl"
    best, ledger = sr.run_search(
        grid, cmd, episode, valset, workdir=cfg.workdir,
        parallelism=parallelism,
        early_stop=sr.EarlyStopPolicy(patience=patience),
        seed=seed,
        thresholds=cfg.iou_thresholds,
        images_dir=images_dir,
    )
    Path(ledger_path).parent.mkdir(parents=True, exist_ok=True)
    ledger.save(ledger_path)
    best_rec = next(r for r in ledger.records if r.trial_id == best.trial_id)
    payload = {
        "best": best.to_dict(),
        "val_map": best_rec.val_map,
        "trials": len(ledger.records),
        "ledger": str(ledger_path),
    }
    _emit(payload, as_json, [
        f"searched {len(ledger.records)} trials; ledger -> {ledger_path}",
        f"best trial {best.trial_id}: val mAP {best_rec.val_map:.4f}",
        f"  assignment: {json.dumps(best.assignment, sort_keys=True)}",
    ])


@search.command("best")
@click.option("--ledger", "ledger_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--json", "as_json", is_flag=True)
def search_best(ledger_path, as_json):
    """Report the argmax trial of an existing ledger."""
    ledger = sr.Ledger.load(ledger_path)
    best = sr.select_best(ledger)
    best_rec = next(r for r in ledger.records if r.trial_id == best.trial_id)
    _emit({"best": best.to_dict(), "val_map": best_rec.val_map}, as_json, [
        f"best trial {best.trial_id}: val mAP {best_rec.val_map:.4f}",
        f"  assignment: {json.dumps(best.assignment, sort_keys=True)}",
    ])


@search.command("final")
@click.option("--ledger", "ledger_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--testset", "testset_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--trainer", required=True,
              help="Trainer spec file (YAML), or 'synthetic'.")
@click.option("--episode", "episode_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--images-dir", type=click.Path(path_type=Path), default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def search_final(cfg: GlobalConfig, ledger_path, testset_path, trainer, episode_path,
                 images_dir, as_json):
    """Re-run the selected configuration and evaluate on the full test set."""
    ledger = sr.Ledger.load(ledger_path)
    best = sr.select_best(ledger)
    cmd = _load_trainer(trainer)
    episode = ds.load_episode(episode_path)
    testset = ds.load_coco(testset_path, split_tag="test")
    result = sr.final_eval(
        best, cmd, episode, testset, workdir=cfg.workdir,
        thresholds=cfg.iou_thresholds, ledger=ledger, images_dir=images_dir,
    )
    ledger.save(ledger_path)
    payload = {"best": best.to_dict(), "test_map": result.map,
               "per_threshold_map": result.per_threshold_map}
    _emit(payload, as_json, [
        f"final test mAP for trial {best.trial_id}: {result.map:.4f}",
        f"  assignment: {json.dumps(best.assignment, sort_keys=True)}",
    ])


def run(argv: list[str] | None = None) -> int:
    """Entry point wrapper mapping domain errors to exit code 1."""
    try:
        main.main(args=sys.argv[1:] if argv is None else argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        return 130
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except DOMAIN_ERRORS as e:
        click.echo(f"error: {e}", err=True)
        return 1


if __name__ == "__main__":
    raise SystemExit(run())
