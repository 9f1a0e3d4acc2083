"""Stub-model mode: a tiny randomly initialized detector.

Exercises the full adapter path (read annotations, load images, train a few
epochs, predict on the eval split, emit results JSON) without any pretrained
weights or GPUs. Output quality is irrelevant; schema validity and
determinism are the point.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

INPUT_SIZE = 64
NUM_PROPOSALS = 4


def _load_coco(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    images = {im["id"]: im for im in doc["images"]}
    anns_by_image: dict[int, list] = {im_id: [] for im_id in images}
    for a in doc["annotations"]:
        anns_by_image[a["image_id"]].append(a)
    cat_ids = sorted(c["id"] for c in doc["categories"])
    return images, anns_by_image, cat_ids


def _load_pixels(images_dir: Path, file_name: str, torch):
    with Image.open(images_dir / file_name) as im:
        arr = np.asarray(im.convert("RGB").resize((INPUT_SIZE, INPUT_SIZE)))
    return torch.from_numpy(arr.copy()).float().permute(2, 0, 1) / 255.0


def _build_model(num_categories: int, torch, nn):
    class TinyDetector(nn.Module):
        def __init__(self):
            super().__init__()
            self.backbone = nn.Sequential(
                nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU(),
                nn.AdaptiveAvgPool2d(4),
            )
            self.head = nn.Linear(16 * 16, NUM_PROPOSALS * (4 + num_categories))

        def forward(self, x):
            feats = self.backbone(x).flatten(1)
            out = self.head(feats).view(-1, NUM_PROPOSALS, 4 + num_categories)
            boxes = out[..., :4].sigmoid()  # normalized cx, cy, w, h
            logits = out[..., 4:]
            return boxes, logits

    return TinyDetector()


def run_stub(
    train_ann: Path,
    val_ann: Path,
    images_dir: Path,
    out_dets: Path,
    seed: int = 0,
    epochs: int = 2,
    lr: float = 1e-3,
    device: str = "cpu",
) -> None:
    import torch
    from torch import nn

    torch.manual_seed(seed)
    dev = torch.device("cpu" if device == "auto" else device)

    train_images, train_anns, _ = _load_coco(train_ann)
    val_images, _, val_cat_ids = _load_coco(val_ann)
    model = _build_model(len(val_cat_ids), torch, nn).to(dev)
    optim = torch.optim.Adam(model.parameters(), lr=lr)
    cat_index = {cid: i for i, cid in enumerate(val_cat_ids)}

    batch = []
    for im_id, im in sorted(train_images.items()):
        anns = train_anns[im_id]
        if not anns:
            continue
        a = anns[0]
        x, y, w, h = a["bbox"]
        target_box = torch.tensor([
            (x + w / 2) / im["width"], (y + h / 2) / im["height"],
            w / im["width"], h / im["height"],
        ], dtype=torch.float32)
        target_cat = cat_index.get(a["category_id"], 0)
        batch.append((_load_pixels(images_dir, im["file_name"], torch),
                      target_box, target_cat))
    if not batch:
        raise ValueError(f"no annotated training images in {train_ann}")

    model.train()
    for _ in range(max(1, epochs)):
        for pixels, target_box, target_cat in batch:
            boxes, logits = model(pixels.unsqueeze(0).to(dev))
            box_loss = torch.abs(boxes[0, 0] - target_box.to(dev)).sum()
            cls_target = torch.zeros(len(val_cat_ids), device=dev)
            cls_target[target_cat] = 1.0
            cls_loss = nn.functional.binary_cross_entropy_with_logits(
                logits[0, 0], cls_target
            )
            loss = box_loss + cls_loss
            optim.zero_grad()
            loss.backward()
            optim.step()

    model.eval()
    results = []
    with torch.no_grad():
        for im_id, im in sorted(val_images.items()):
            boxes, logits = model(_load_pixels(images_dir, im["file_name"], torch)
                                  .unsqueeze(0).to(dev))
            scores = logits[0].sigmoid()
            for p in range(NUM_PROPOSALS):
                cx, cy, w, h = (float(v) for v in boxes[0, p])
                conf, cat_pos = scores[p].max(dim=0)
                bw = max(1.0, w * im["width"])
                bh = max(1.0, h * im["height"])
                bx = min(max(cx * im["width"] - bw / 2, 0.0), im["width"] - 1.0)
                by = min(max(cy * im["height"] - bh / 2, 0.0), im["height"] - 1.0)
                bw = min(bw, im["width"] - bx)
                bh = min(bh, im["height"] - by)
                results.append({
                    "image_id": im_id,
                    "category_id": val_cat_ids[int(cat_pos)],
                    "bbox": [bx, by, bw, bh],
                    "score": round(float(conf), 6),
                })
    with open(out_dets, "w", encoding="utf-8") as fh:
        json.dump(results, fh)
