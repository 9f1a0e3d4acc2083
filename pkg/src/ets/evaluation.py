"""COCO-protocol detection evaluation.

Greedy score-ordered matching per (image, category), 101-point interpolated
average precision per (category, IoU threshold), and the aggregate mAP used as
the search objective. Protocol choices are pinned: thresholds 0.50:0.95 step
0.05, 101 recall points, max 100 detections per image and category, crowd
ground truth matched without consuming a slot and excluded from recall, AP
cells without ground truth excluded from every mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import BBox, crowd_iou, iou
from .dataset import Annotation, DetDataset

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


class DetectionValidationError(Exception):
    """Detections reference ids absent from the ground truth."""


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    bbox: BBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")


@dataclass
class EvalResult:
    """Per-category, per-threshold AP plus aggregate means.

    ap maps (category_id, iou_threshold) to AP in [0, 1], or None when the
    category has no ground truth at all (undefined cells never enter a mean).
    """

    thresholds: list[float]
    ap: dict[tuple[int, float], float | None]
    map: float
    per_threshold_map: list[float]
    n_gt: dict[int, int] = field(default_factory=dict)

    def category_ap(self, category_id: int) -> float | None:
        cells = [v for (cid, _), v in self.ap.items() if cid == category_id and v is not None]
        return float(np.mean(cells)) if cells else None

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "iou_thresholds": list(self.thresholds),
            "per_threshold_map": list(self.per_threshold_map),
            "per_category_ap": {
                str(cid): self.category_ap(cid) for cid in sorted(self.n_gt)
            },
            "n_gt": {str(cid): n for cid, n in sorted(self.n_gt.items())},
        }


def parse_detections(doc: list) -> list[Detection]:
    """Parse a COCO results array of {image_id, category_id, bbox, score}."""
    dets = []
    for i, rec in enumerate(doc):
        try:
            x, y, w, h = (float(v) for v in rec["bbox"])
            dets.append(
                Detection(
                    image_id=int(rec["image_id"]),
                    category_id=int(rec["category_id"]),
                    bbox=BBox(x, y, w, h),
                    score=float(rec["score"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DetectionValidationError(f"detection record {i} is invalid: {e}") from e
    return dets


def load_detections(path) -> list[Detection]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, list):
        raise DetectionValidationError("results JSON must be a top-level array")
    return parse_detections(doc)


def dump_detections(dets: list[Detection], path) -> None:
    doc = [
        {
            "image_id": d.image_id,
            "category_id": d.category_id,
            "bbox": d.bbox.as_xywh(),
            "score": d.score,
        }
        for d in dets
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _sort_by_score(dets: list[Detection]) -> list[Detection]:
    # stable: equal scores keep insertion order
    order = np.argsort([-d.score for d in dets], kind="stable")
    return [dets[i] for i in order]


def match_detections(
    dets: list[Detection], gts: list[Annotation], iou_thr: float
) -> list[str]:
    """Greedy-match score-ordered detections against ground truth at one threshold.

    Returns one flag per detection, in descending-score order: "tp", "fp", or
    "ignore" (matched to a crowd region; neither tp nor fp). Each non-crowd
    ground truth is consumed at most once; a detection takes the unmatched
    ground truth of highest IoU >= iou_thr, later boxes winning exact ties.
    """
    dets = _sort_by_score(dets)
    # crowd regions sort last so real boxes are preferred at equal eligibility
    order = sorted(range(len(gts)), key=lambda i: bool(gts[i].iscrowd))
    matched: set[int] = set()
    flags: list[str] = []
    for d in dets:
        best = -1
        best_iou = min(iou_thr, 1.0 - 1e-10)
        for gi in order:
            g = gts[gi]
            if gi in matched and not g.iscrowd:
                continue
            if best > -1 and not gts[best].iscrowd and g.iscrowd:
                break
            overlap = crowd_iou(d.bbox, g.bbox) if g.iscrowd else iou(d.bbox, g.bbox)
            if overlap < best_iou:
                continue
            best_iou = overlap
            best = gi
        if best == -1:
            flags.append("fp")
        elif gts[best].iscrowd:
            flags.append("ignore")
        else:
            matched.add(best)
            flags.append("tp")
    return flags


def average_precision(flags: list[bool], n_gt: int) -> float | None:
    """101-point interpolated AP from score-ordered TP/FP flags.

    The precision-recall curve is made monotone (precision at recall r is the
    maximum precision at any recall >= r) and sampled at recalls 0.00, 0.01,
    ..., 1.00. Returns None when n_gt == 0 (undefined cell).
    """
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    if n_gt == 0:
        return None
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(np.mean(sampled))


def evaluate(
    dets: list[Detection],
    gt: DetDataset,
    thresholds: list[float] | None = None,
    max_dets: int = MAX_DETS,
) -> EvalResult:
    """Score detections against a ground-truth dataset.

    Detections of each category are matched per image, then pooled across all
    images in global score order before the precision-recall sweep. Categories
    listed in the dataset but absent from its annotations yield undefined AP
    cells and are excluded from mAP.
    """
    thresholds = list(thresholds) if thresholds is not None else list(DEFAULT_IOU_THRESHOLDS)
    img_ids = {im.id for im in gt.images}
    bad_imgs = sorted({d.image_id for d in dets} - img_ids)
    bad_cats = sorted({d.category_id for d in dets} - set(gt.categories))
    if bad_imgs or bad_cats:
        raise DetectionValidationError(
            f"detections reference unknown image ids {bad_imgs} / category ids {bad_cats}"
        )

    gts_by_key: dict[tuple[int, int], list[Annotation]] = {}
    for a in gt.annotations:
        gts_by_key.setdefault((a.image_id, a.category_id), []).append(a)
    dets_by_key: dict[tuple[int, int], list[Detection]] = {}
    for d in dets:
        dets_by_key.setdefault((d.image_id, d.category_id), []).append(d)

    n_gt = {
        cid: sum(1 for a in gt.annotations if a.category_id == cid and not a.iscrowd)
        for cid in gt.categories
    }

    ap: dict[tuple[int, float], float | None] = {}
    sorted_img_ids = sorted(img_ids)
    for cid in sorted(gt.categories):
        if n_gt[cid] == 0:
            for t in thresholds:
                ap[(cid, t)] = None
            continue
        # per-image capped, score-sorted detection lists, pooled in image-id order
        per_image: list[tuple[list[Detection], list[Annotation]]] = []
        for img_id in sorted_img_ids:
            d = _sort_by_score(dets_by_key.get((img_id, cid), []))[:max_dets]
            g = gts_by_key.get((img_id, cid), [])
            if d or g:
                per_image.append((d, g))
        for t in thresholds:
            scores: list[float] = []
            flags: list[str] = []
            for d, g in per_image:
                scores.extend(x.score for x in d)
                flags.extend(match_detections(d, g, t))
            order = np.argsort([-s for s in scores], kind="stable")
            pooled = [flags[i] for i in order]
            tpfp = [f == "tp" for f in pooled if f != "ignore"]
            ap[(cid, t)] = average_precision(tpfp, n_gt[cid])

    def mean_defined(cells: list[float | None]) -> float:
        defined = [c for c in cells if c is not None]
        return float(np.mean(defined)) if defined else 0.0

    per_threshold = [
        mean_defined([ap[(cid, t)] for cid in gt.categories]) for t in thresholds
    ]
    overall = mean_defined(list(ap.values()))
    return EvalResult(
        thresholds=thresholds,
        ap=ap,
        map=overall,
        per_threshold_map=per_threshold,
        n_gt=n_gt,
    )
