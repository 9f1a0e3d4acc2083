#!/usr/bin/env python3
"""Walkthrough: grid search over trainer configurations with the trial ledger.

Uses the built-in synthetic trainer (a deterministic stand-in for a real
fine-tuning process) driven through the same subprocess file protocol a real
trainer would use: trial config out as `key = value` text, COCO annotations
out, results JSON back, exit code 0 on success.
"""

import tempfile
from pathlib import Path

from ets.dataset import Annotation, DetDataset, Episode, ImageRecord
from ets.boxes import BBox
from ets.runner import axis_target, synthetic_quality, synthetic_trainer_command
from ets.search import (
    EarlyStopPolicy,
    ParamGrid,
    enumerate_grid,
    final_eval,
    run_search,
    select_best,
)

# a tiny validation set for the trials to be scored on
images = [ImageRecord(id=i, file_name=f"{i}.jpg", width=100, height=100)
          for i in (1, 2)]
annotations = [
    Annotation(id=1, image_id=1, category_id=1, bbox=BBox(10, 10, 30, 30)),
    Annotation(id=2, image_id=1, category_id=2, bbox=BBox(50, 50, 20, 20)),
    Annotation(id=3, image_id=2, category_id=1, bbox=BBox(5, 5, 40, 40)),
]
valset = DetDataset(images=images, annotations=annotations,
                    categories={1: "crack", 2: "patch"}, split_tag="val")
episode = Episode(base=valset, k=1, seed=0)

# the grid: two axes; the synthetic trainer's quality peaks at axis_target(name),
# so we know the argmax in advance and can watch the search find it
ta, tb = axis_target("lr"), axis_target("mosaic_p")
grid = ParamGrid(axes=[
    ("lr", [ta, ta + 2.0, ta + 0.7]),
    ("mosaic_p", [tb, tb + 1.5]),
])
print(f"grid size: {grid.size}")
for t in enumerate_grid(grid):
    print(f"  trial {t.trial_id}: {t.assignment}  q={synthetic_quality(t.assignment):.3f}")

workdir = Path(tempfile.mkdtemp(prefix="ets-demo-"))
trainer = synthetic_trainer_command()
best, ledger = run_search(grid, trainer, episode, valset, workdir=workdir,
                          parallelism=2, seed=11)

print("\nledger:")
for r in sorted(ledger.records, key=lambda r: r.trial_id):
    shown = f"{r.val_map:.4f}" if r.val_map is not None else "--"
    print(f"  trial {r.trial_id}: {r.status:9s} val mAP {shown}")
print(f"\nselected trial {best.trial_id}: {best.assignment}")
assert select_best(ledger) == best

# final, unbiased pass: one more trainer run at the winner, scored on the
# full test set (here: the same toy set)
result = final_eval(best, trainer, episode, valset, workdir=workdir, ledger=ledger)
print(f"final test mAP: {result.map:.4f}")

# early stopping: stop dispatching after N consecutive non-improving trials
best2, ledger2 = run_search(grid, trainer, episode, valset,
                            workdir=workdir / "patient", parallelism=1, seed=11,
                            early_stop=EarlyStopPolicy(patience=2))
skipped = [r.trial_id for r in ledger2.records if r.status == "skipped"]
print(f"\nwith patience=2: skipped trials {skipped}; still selected "
      f"trial {best2.trial_id}")
print(f"\nartifacts under {workdir}")
