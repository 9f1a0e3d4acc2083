"""Independent reference evaluator for the COCO detection protocol.

Test-only oracle. Deliberately structured unlike the production evaluator: it
works on plain COCO dicts, evaluates each (image, category) cell separately,
then concatenates per-image match arrays and re-sorts globally by score, the
way pycocotools' COCOeval does. Keep this module free of imports from the
package under test.
"""

from __future__ import annotations

import numpy as np

RECALL_THRS = np.linspace(0.0, 1.0, 101)


def _iou_single(det_box, gt_box, iscrowd):
    dx, dy, dw, dh = det_box
    gx, gy, gw, gh = gt_box
    ix = max(0.0, min(dx + dw, gx + gw) - max(dx, gx))
    iy = max(0.0, min(dy + dh, gy + gh) - max(dy, gy))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    union = dw * dh if iscrowd else dw * dh + gw * gh - inter
    return inter / union


def _evaluate_img(gts, dts, thrs, max_dets):
    """Match one (image, category) cell at every threshold.

    gts: list of {"bbox": [x,y,w,h], "iscrowd": 0/1} in annotation order.
    dts: list of {"bbox": ..., "score": float} in detection order.
    Returns per-threshold (dt_matched, dt_ignored) plus the sorted scores.
    """
    gt_order = sorted(range(len(gts)), key=lambda i: bool(gts[i]["iscrowd"]))
    dt_order = np.argsort([-d["score"] for d in dts], kind="mergesort")[:max_dets]
    scores = [dts[i]["score"] for i in dt_order]

    out = {}
    for t in thrs:
        gtm = {}
        dt_matched = []
        dt_ignored = []
        for di in dt_order:
            d = dts[di]
            best = min(t, 1.0 - 1e-10)
            m = -1
            for gi in gt_order:
                g = gts[gi]
                if gi in gtm and not g["iscrowd"]:
                    continue
                if m > -1 and not gts[m]["iscrowd"] and g["iscrowd"]:
                    break
                ov = _iou_single(d["bbox"], g["bbox"], g["iscrowd"])
                if ov < best:
                    continue
                best = ov
                m = gi
            if m == -1:
                dt_matched.append(False)
                dt_ignored.append(False)
            else:
                gtm[m] = True
                dt_matched.append(True)
                dt_ignored.append(bool(gts[m]["iscrowd"]))
        out[t] = (dt_matched, dt_ignored)
    n_gt = sum(1 for g in gts if not g["iscrowd"])
    return scores, out, n_gt


def evaluate_reference(gt_doc, detections, thrs=None, max_dets=100):
    """Full protocol run over a COCO gt dict and a results list.

    Returns {"ap": {(cat_id, thr): float | None}, "map": float,
    "per_threshold_map": [float]}. Cells without ground truth are None.
    """
    if thrs is None:
        thrs = [round(0.5 + 0.05 * i, 2) for i in range(10)]
    img_ids = sorted(im["id"] for im in gt_doc["images"])
    cat_ids = sorted(c["id"] for c in gt_doc["categories"])

    gt_index = {}
    for a in gt_doc["annotations"]:
        gt_index.setdefault((a["image_id"], a["category_id"]), []).append(
            {"bbox": a["bbox"], "iscrowd": a.get("iscrowd", 0)}
        )
    dt_index = {}
    for d in detections:
        dt_index.setdefault((d["image_id"], d["category_id"]), []).append(
            {"bbox": d["bbox"], "score": d["score"]}
        )

    ap = {}
    for cat in cat_ids:
        cells = [
            _evaluate_img(
                gt_index.get((img, cat), []), dt_index.get((img, cat), []), thrs, max_dets
            )
            for img in img_ids
        ]
        npig = sum(c[2] for c in cells)
        if npig == 0:
            for t in thrs:
                ap[(cat, t)] = None
            continue
        all_scores = np.array([s for c in cells for s in c[0]])
        order = np.argsort(-all_scores, kind="mergesort")
        for t in thrs:
            matched = np.array(
                [m for c in cells for m in c[1][t][0]], dtype=bool
            )[order]
            ignored = np.array(
                [g for c in cells for g in c[1][t][1]], dtype=bool
            )[order]
            tps = np.logical_and(matched, ~ignored)
            fps = np.logical_and(~matched, ~ignored)
            tp_cum = np.cumsum(tps).astype(np.float64)
            fp_cum = np.cumsum(fps).astype(np.float64)
            rc = tp_cum / npig
            pr = tp_cum / (tp_cum + fp_cum + np.spacing(1))
            pr = pr.tolist()
            q = [0.0] * len(RECALL_THRS)
            for i in range(len(pr) - 1, 0, -1):
                if pr[i] > pr[i - 1]:
                    pr[i - 1] = pr[i]
            inds = np.searchsorted(rc, RECALL_THRS, side="left")
            for ri, pi in enumerate(inds):
                try:
                    q[ri] = pr[pi]
                except IndexError:
                    pass
            ap[(cat, t)] = float(np.mean(q))

    defined = [v for v in ap.values() if v is not None]
    overall = float(np.mean(defined)) if defined else 0.0
    per_thr = []
    for t in thrs:
        cells = [ap[(cat, t)] for cat in cat_ids if ap[(cat, t)] is not None]
        per_thr.append(float(np.mean(cells)) if cells else 0.0)
    return {"ap": ap, "map": overall, "per_threshold_map": per_thr}
