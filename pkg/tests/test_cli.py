import json

import numpy as np
import pytest
from PIL import Image

from ets.cli import run
from ets.dataset import load_coco
from ets.evaluation import dump_detections
from ets.runner import axis_target
from ets.search import dump_grid, ParamGrid

from conftest import make_dataset, perfect_detections


@pytest.fixture
def gt_file(tmp_path):
    ds = make_dataset(
        [
            (1, 100, 100, [(1, 1, 10, 10, 30, 30, 0), (2, 2, 50, 50, 20, 20, 0)]),
            (2, 120, 80, [(3, 1, 5, 5, 40, 40, 0), (4, 2, 60, 10, 30, 30, 0)]),
            (3, 90, 90, [(5, 1, 12, 12, 30, 30, 0)]),
        ],
        {1: "a", 2: "b"},
    )
    path = tmp_path / "gt.json"
    ds.save(path)
    return path


def test_eval_perfect_predictions(tmp_path, gt_file, capsys):
    ds = load_coco(gt_file)
    dets_path = tmp_path / "dets.json"
    dump_detections(perfect_detections(ds), dets_path)
    code = run(["eval", "--gt", str(gt_file), "--dets", str(dets_path)])
    out = capsys.readouterr().out
    assert code == 0
    assert "mAP: 1.0000" in out


def test_eval_json_output_schema(tmp_path, gt_file, capsys):
    ds = load_coco(gt_file)
    dets_path = tmp_path / "dets.json"
    dump_detections(perfect_detections(ds), dets_path)
    code = run(["eval", "--gt", str(gt_file), "--dets", str(dets_path), "--json"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) == {"map", "iou_thresholds", "per_threshold_map",
                        "per_category_ap", "n_gt"}
    assert doc["map"] == 1.0


def test_valset_rate_out_of_range_is_usage_error(tmp_path, gt_file, capsys):
    code = run(["dataset", "valset", "--ann", str(gt_file), "--rate", "1.5",
                "--out", str(tmp_path / "val.json")])
    err = capsys.readouterr().err
    assert code == 2
    assert "(0, 1]" in err


def test_unknown_subcommand_is_usage_error(capsys):
    code = run(["dataset", "bogus"])
    assert code == 2


def test_domain_error_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = run(["dataset", "ingest", "--ann", str(bad)])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_dataset_ingest_summary(gt_file, capsys):
    code = run(["dataset", "ingest", "--ann", str(gt_file), "--json"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["images"] == 3
    assert doc["annotations"] == 5
    assert doc["categories"]["1"]["count"] == 3


def test_dataset_episode_and_valset(tmp_path, gt_file, capsys):
    ep_path = tmp_path / "ep.json"
    code = run(["dataset", "episode", "--ann", str(gt_file), "--k", "1",
                "--seed", "5", "--out", str(ep_path), "--json"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["annotations"] == 2  # one per category

    val_path = tmp_path / "val.json"
    code = run(["dataset", "valset", "--ann", str(gt_file), "--rate", "0.5",
                "--seed", "5", "--disjoint", "--out", str(val_path), "--json"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["images"] >= 1
    val = load_coco(val_path)
    remainder = load_coco(str(val_path) + ".remainder.json")
    gt = load_coco(gt_file)
    assert {im.id for im in val.images} | {im.id for im in remainder.images} == \
        {im.id for im in gt.images}


def test_valset_with_coarse_map(tmp_path, gt_file, capsys):
    cmap = tmp_path / "coarse.txt"
    cmap.write_text("1 7 merged\n2 7 merged\n")
    val_path = tmp_path / "val.json"
    code = run(["dataset", "valset", "--ann", str(gt_file), "--rate", "1.0",
                "--seed", "0", "--coarse-map", str(cmap), "--out", str(val_path)])
    assert code == 0
    val = load_coco(val_path)
    assert set(val.categories) == {7}


def test_augment_preview(tmp_path, gt_file, capsys):
    images_dir = tmp_path / "imgs"
    images_dir.mkdir()
    rng = np.random.default_rng(0)
    gt = load_coco(gt_file)
    for im in gt.images:
        arr = rng.integers(0, 256, size=(im.height, im.width, 3), dtype=np.uint8)
        Image.fromarray(arr).save(images_dir / im.file_name)
    out_dir = tmp_path / "preview"
    code = run(["augment", "preview", "--ann", str(gt_file),
                "--images-dir", str(images_dir), "--seed", "3",
                "--out", str(out_dir), "--limit", "2"])
    assert code == 0
    pngs = sorted(p.name for p in out_dir.glob("*.png"))
    sidecars = sorted(p.name for p in out_dir.glob("*.json"))
    assert len(pngs) == 2 and len(sidecars) == 2
    doc = json.loads((out_dir / sidecars[0]).read_text())
    assert {"file", "width", "height", "boxes"} <= set(doc)


def test_search_pipeline_end_to_end(tmp_path, gt_file, capsys):
    # ingest -> episode k=1 -> valset rate=0.3 -> 12-config synthetic search
    # -> final report naming the known argmax of the quality function
    workdir = tmp_path / "work"
    ep_path = tmp_path / "ep.json"
    val_path = tmp_path / "val.json"
    assert run(["dataset", "ingest", "--ann", str(gt_file)]) == 0
    assert run(["dataset", "episode", "--ann", str(gt_file), "--k", "1",
                "--seed", "2", "--out", str(ep_path)]) == 0
    assert run(["dataset", "valset", "--ann", str(gt_file), "--rate", "0.3",
                "--seed", "2", "--out", str(val_path)]) == 0

    ta, tb = axis_target("alpha"), axis_target("beta")
    grid = ParamGrid(axes=[("alpha", [ta + 3.0, ta, ta + 1.5]),
                           ("beta", [tb + 2.0, tb, tb + 0.8, tb + 5.0])])
    grid_path = tmp_path / "grid.yaml"
    dump_grid(grid, grid_path)
    ledger_path = tmp_path / "ledger.jsonl"
    capsys.readouterr()

    code = run(["--workdir", str(workdir), "search", "run",
                "--grid", str(grid_path), "--trainer", "synthetic",
                "--episode", str(ep_path), "--valset", str(val_path),
                "--ledger", str(ledger_path), "--seed", "2", "--json"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["trials"] == 12
    assert doc["best"]["assignment"] == {"alpha": ta, "beta": tb}
    best_id = doc["best"]["trial_id"]

    code = run(["search", "best", "--ledger", str(ledger_path), "--json"])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["best"]["trial_id"] == best_id

    code = run(["--workdir", str(workdir), "search", "final",
                "--ledger", str(ledger_path), "--testset", str(gt_file),
                "--trainer", "synthetic", "--episode", str(ep_path), "--json"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["best"]["assignment"] == {"alpha": ta, "beta": tb}
    assert doc["test_map"] == pytest.approx(1.0)  # q == 1 at the target


def test_env_workdir_fallback(tmp_path, gt_file, monkeypatch, capsys):
    monkeypatch.setenv("ETS_WORKDIR", str(tmp_path / "envwork"))
    ep_path = tmp_path / "ep.json"
    val_path = tmp_path / "val.json"
    run(["dataset", "episode", "--ann", str(gt_file), "--k", "1", "--out", str(ep_path)])
    run(["dataset", "valset", "--ann", str(gt_file), "--rate", "1.0", "--out", str(val_path)])
    grid_path = tmp_path / "grid.yaml"
    dump_grid(ParamGrid(axes=[("alpha", [1.0])]), grid_path)
    capsys.readouterr()
    code = run(["search", "run", "--grid", str(grid_path), "--trainer", "synthetic",
                "--episode", str(ep_path), "--valset", str(val_path), "--json"])
    assert code == 0
    assert (tmp_path / "envwork" / "ledger.jsonl").exists()
