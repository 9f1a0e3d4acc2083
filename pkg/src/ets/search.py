"""Grid search over trainer configurations with an append-only trial ledger.

The grid is enumerated deterministically (last axis varies fastest), each
trial is dispatched through the runner protocol, its predictions are scored
on the validation set, and the best configuration is the argmax of validation
mAP with ties resolved to the smallest trial id. The ledger records every
trial exactly once and carries content digests of the grid and datasets so
ledgers from different inputs are never silently comparable.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import DetDataset, Episode
from .evaluation import DetectionValidationError, EvalResult, evaluate, load_detections
from .runner import TrainerCommand, run_trial

log = logging.getLogger(__name__)


class SearchError(Exception):
    """Search could not produce a best trial; carries the full ledger."""

    def __init__(self, message: str, ledger: "Ledger | None" = None):
        super().__init__(message)
        self.ledger = ledger


@dataclass
class ParamGrid:
    """Ordered axes of (name, values); the trial space is their product."""

    axes: list[tuple[str, list]]

    def __post_init__(self):
        names = [n for n, _ in self.axes]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate axis names in grid: {names}")
        for name, values in self.axes:
            if not values:
                raise ValueError(f"axis {name!r} has no values")

    @property
    def size(self) -> int:
        n = 1
        for _, values in self.axes:
            n *= len(values)
        return n

    def to_dict(self) -> dict:
        return {"axes": [{"name": n, "values": list(v)} for n, v in self.axes]}


def load_grid(path) -> ParamGrid:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return ParamGrid(axes=[(str(a["name"]), list(a["values"])) for a in doc["axes"]])


def dump_grid(grid: ParamGrid, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(grid.to_dict(), fh, sort_keys=False)


@dataclass(frozen=True)
class TrialConfig:
    """One point of the grid: trial_id is its rank in enumeration order."""

    trial_id: int
    assignment: dict
    seed: int

    def to_dict(self) -> dict:
        return {"trial_id": self.trial_id, "assignment": dict(self.assignment), "seed": self.seed}


def enumerate_grid(grid: ParamGrid, seed: int = 0) -> list[TrialConfig]:
    """All trial configs in lexicographic axis order, last axis fastest."""
    names = [n for n, _ in grid.axes]
    combos = itertools.product(*(values for _, values in grid.axes))
    return [
        TrialConfig(trial_id=i, assignment=dict(zip(names, combo)), seed=seed)
        for i, combo in enumerate(combos)
    ]


@dataclass
class TrialResult:
    trial_id: int
    assignment: dict
    seed: int
    status: str  # "succeeded" | "failed" | "skipped"
    val_map: float | None = None
    wall_time: float = 0.0
    predictions_path: str = ""
    message: str = ""

    def __post_init__(self):
        if self.status not in ("succeeded", "failed", "skipped"):
            raise ValueError(f"unknown trial status {self.status!r}")
        if self.status == "succeeded" and self.val_map is None:
            raise ValueError("succeeded trial must carry val_map")
        if self.status == "failed" and not self.message:
            raise ValueError("failed trial must carry a message")

    def config(self) -> TrialConfig:
        return TrialConfig(trial_id=self.trial_id, assignment=dict(self.assignment), seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "type": "trial",
            "trial_id": self.trial_id,
            "assignment": dict(self.assignment),
            "seed": self.seed,
            "status": self.status,
            "val_map": self.val_map,
            "wall_time": self.wall_time,
            "predictions_path": self.predictions_path,
            "message": self.message,
        }


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def grid_digest(grid: ParamGrid) -> str:
    return _sha256(json.dumps(grid.to_dict(), sort_keys=True).encode())


def dataset_digest(ds: DetDataset) -> str:
    return _sha256(ds.canonical_bytes())


def episode_digest(episode: Episode) -> str:
    meta = f"k={episode.k};seed={episode.seed};".encode()
    return _sha256(meta + episode.base.canonical_bytes())


@dataclass
class Ledger:
    """Append-only record of a search: header, one record per trial, footer."""

    header: dict
    records: list[TrialResult] = field(default_factory=list)
    footer: dict | None = None

    def append(self, result: TrialResult) -> None:
        if any(r.trial_id == result.trial_id for r in self.records):
            raise ValueError(f"trial {result.trial_id} already recorded")
        self.records.append(result)

    def canonical_dict(self) -> dict:
        """Deterministic view: volatile fields out, records sorted by trial id."""
        header = {k: v for k, v in self.header.items() if k != "created_at"}
        records = []
        for r in sorted(self.records, key=lambda r: r.trial_id):
            rec = r.to_dict()
            rec.pop("wall_time")
            rec.pop("predictions_path")
            records.append(rec)
        doc = {"header": header, "trials": records}
        if self.footer is not None:
            doc["final"] = {k: v for k, v in self.footer.items() if k not in ("created_at",)}
        return doc

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":")).encode()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "header", **self.header}, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
            if self.footer is not None:
                fh.write(json.dumps({"type": "final", **self.footer}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Ledger":
        header: dict | None = None
        records: list[TrialResult] = []
        footer: dict | None = None
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                kind = doc.pop("type", "trial")
                if kind == "header":
                    header = doc
                elif kind == "final":
                    footer = doc
                else:
                    records.append(TrialResult(**doc))
        if header is None:
            raise ValueError(f"ledger {path} has no header line")
        return cls(header=header, records=records, footer=footer)


def make_header(grid: ParamGrid, episode: Episode, valset: DetDataset, seed: int) -> dict:
    return {
        "grid_digest": grid_digest(grid),
        "episode_digest": episode_digest(episode),
        "valset_digest": dataset_digest(valset),
        "master_seed": seed,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def select_best(ledger: Ledger) -> TrialConfig:
    """Argmax of val_map over succeeded trials; ties go to the smallest trial id."""
    ok = [r for r in ledger.records if r.status == "succeeded"]
    if not ok:
        raise SearchError("no succeeded trial in ledger", ledger=ledger)
    best = max(ok, key=lambda r: (r.val_map, -r.trial_id))
    return best.config()


@dataclass
class EarlyStopPolicy:
    """Stop dispatching after `patience` consecutive non-improving trials."""

    patience: int | None = None

    @property
    def enabled(self) -> bool:
        return self.patience is not None and self.patience > 0


def _execute_trial(
    trial: TrialConfig,
    trainer: TrainerCommand,
    episode: Episode,
    valset: DetDataset,
    workdir: Path,
    thresholds,
    images_dir,
) -> TrialResult:
    trial_dir = workdir / f"trial_{trial.trial_id:05d}"
    run = run_trial(trainer, trial, episode, valset, trial_dir, images_dir=images_dir)
    if not run.succeeded:
        return TrialResult(
            trial_id=trial.trial_id,
            assignment=dict(trial.assignment),
            seed=trial.seed,
            status="failed",
            wall_time=run.duration,
            message=f"trainer failed ({run.failure}, exit status {run.exit_status})",
        )
    try:
        dets = load_detections(run.out_dets)
        result = evaluate(dets, valset, thresholds=thresholds)
    except (DetectionValidationError, ValueError) as e:
        return TrialResult(
            trial_id=trial.trial_id,
            assignment=dict(trial.assignment),
            seed=trial.seed,
            status="failed",
            wall_time=run.duration,
            message=f"evaluation rejected trainer output: {e}",
        )
    return TrialResult(
        trial_id=trial.trial_id,
        assignment=dict(trial.assignment),
        seed=trial.seed,
        status="succeeded",
        val_map=result.map,
        wall_time=run.duration,
        predictions_path=str(run.out_dets),
    )


def run_search(
    grid: ParamGrid,
    trainer: TrainerCommand,
    episode: Episode,
    valset: DetDataset,
    workdir,
    parallelism: int = 1,
    early_stop: EarlyStopPolicy | None = None,
    seed: int = 0,
    thresholds=None,
    images_dir=None,
) -> tuple[TrialConfig, Ledger]:
    """Dispatch every grid point, record all outcomes, return (best, ledger).

    Failed trials are recorded and never abort the search. With early stopping
    enabled, improvement is judged on completion order (the one documented
    source of run-to-run variation under parallelism > 1) and undispatched
    trials are recorded as skipped.
    """
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    trials = enumerate_grid(grid, seed)
    ledger = Ledger(header=make_header(grid, episode, valset, seed))
    stop = early_stop if early_stop is not None else EarlyStopPolicy()

    lock = threading.Lock()
    best_seen: float | None = None
    stall = 0
    halted = False

    def record(result: TrialResult) -> None:
        nonlocal best_seen, stall, halted
        with lock:
            ledger.append(result)
            if not stop.enabled:
                return
            improved = (
                result.status == "succeeded"
                and (best_seen is None or result.val_map > best_seen)
            )
            if improved:
                best_seen = result.val_map
                stall = 0
            else:
                stall += 1
                if stall >= stop.patience:
                    halted = True

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        pending = set()
        queue = iter(trials)
        dispatched = 0
        while True:
            while not halted and len(pending) < parallelism:
                trial = next(queue, None)
                if trial is None:
                    break
                pending.add(
                    pool.submit(
                        _execute_trial, trial, trainer, episode, valset,
                        workdir, thresholds, images_dir,
                    )
                )
                dispatched += 1
            if not pending:
                break
            done, pending = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                record(fut.result())

    for trial in trials[dispatched:]:
        ledger.append(
            TrialResult(
                trial_id=trial.trial_id,
                assignment=dict(trial.assignment),
                seed=trial.seed,
                status="skipped",
                message="early stop",
            )
        )

    best = select_best(ledger)  # raises SearchError with ledger when none succeeded
    return best, ledger


def final_eval(
    best: TrialConfig,
    trainer: TrainerCommand,
    episode: Episode,
    testset: DetDataset,
    workdir,
    thresholds=None,
    ledger: Ledger | None = None,
    images_dir=None,
) -> EvalResult:
    """One trainer run at the selected configuration, scored on the full test set."""
    workdir = Path(workdir)
    run = run_trial(trainer, best, episode, testset, workdir / "final", images_dir=images_dir)
    if not run.succeeded:
        tail = ""
        try:
            tail = run.captured_log.read_text(encoding="utf-8", errors="replace")[-2000:]
        except OSError:
            pass
        raise SearchError(
            f"final evaluation trainer run failed ({run.failure}); log tail:\n{tail}",
            ledger=ledger,
        )
    dets = load_detections(run.out_dets)
    result = evaluate(dets, testset, thresholds=thresholds)
    if ledger is not None:
        ledger.footer = {
            "trial_id": best.trial_id,
            "assignment": dict(best.assignment),
            "test_map": result.map,
            "per_threshold_map": result.per_threshold_map,
        }
    return result
