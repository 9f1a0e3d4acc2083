"""Few-shot detection experiment toolkit.

Annotation-level dataset handling, bbox-aware mixed augmentation, COCO-protocol
evaluation, and grid search over an external trainer driven through a
file-exchange subprocess protocol.
"""

from .boxes import BBox, iou
from .dataset import (
    Annotation,
    CoarseLabelMap,
    DetDataset,
    Episode,
    ImageRecord,
    build_validation_set,
    distribution_report,
    load_coco,
    parse_coco,
    sample_kshot,
)
from .evaluation import Detection, EvalResult, average_precision, evaluate, match_detections
from .runner import TrainerCommand, TrialRun, run_trial, synthetic_trainer
from .search import (
    EarlyStopPolicy,
    Ledger,
    ParamGrid,
    TrialConfig,
    TrialResult,
    enumerate_grid,
    final_eval,
    run_search,
    select_best,
)

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "BBox",
    "CoarseLabelMap",
    "DetDataset",
    "Detection",
    "EarlyStopPolicy",
    "Episode",
    "EvalResult",
    "ImageRecord",
    "Ledger",
    "ParamGrid",
    "TrainerCommand",
    "TrialConfig",
    "TrialResult",
    "TrialRun",
    "average_precision",
    "build_validation_set",
    "distribution_report",
    "enumerate_grid",
    "evaluate",
    "final_eval",
    "iou",
    "load_coco",
    "match_detections",
    "parse_coco",
    "run_search",
    "run_trial",
    "sample_kshot",
    "select_best",
    "synthetic_trainer",
]
