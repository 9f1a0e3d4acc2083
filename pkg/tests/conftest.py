"""Shared fixture builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from ets.augment import LabeledBox, Sample
from ets.boxes import BBox
from ets.dataset import Annotation, DetDataset, ImageRecord
from ets.evaluation import Detection


def make_dataset(spec, categories, split_tag="test"):
    """Build a DetDataset from a compact spec.

    spec: list of (image_id, width, height, [(ann_id, cat_id, x, y, w, h, iscrowd), ...]).
    categories: dict of id -> name.
    """
    images = []
    annotations = []
    for image_id, width, height, anns in spec:
        images.append(ImageRecord(id=image_id, file_name=f"img_{image_id}.png",
                                  width=width, height=height))
        for ann_id, cat_id, x, y, w, h, iscrowd in anns:
            annotations.append(Annotation(id=ann_id, image_id=image_id, category_id=cat_id,
                                          bbox=BBox(x, y, w, h), iscrowd=bool(iscrowd)))
    return DetDataset(images=images, annotations=annotations,
                      categories=dict(categories), split_tag=split_tag)


def coco_doc(ds: DetDataset) -> dict:
    """Plain-dict view of a dataset for the reference oracle."""
    return ds.to_coco_dict()


def det_doc(dets: list[Detection]) -> list[dict]:
    return [
        {"image_id": d.image_id, "category_id": d.category_id,
         "bbox": d.bbox.as_xywh(), "score": d.score}
        for d in dets
    ]


def random_eval_instance(rng: np.random.Generator, max_images=10, max_boxes=20,
                         max_cats=3, allow_crowd=True):
    """Random small ground truth plus detections exercising varied match patterns."""
    n_img = int(rng.integers(1, max_images + 1))
    n_cat = int(rng.integers(1, max_cats + 1))
    categories = {cid: f"cat{cid}" for cid in range(1, n_cat + 1)}

    images = []
    for i in range(n_img):
        images.append(ImageRecord(id=i + 1, file_name=f"im{i + 1}.png",
                                  width=int(rng.integers(40, 121)),
                                  height=int(rng.integers(40, 121))))

    def random_box(im):
        w = float(rng.uniform(3, im.width * 0.6))
        h = float(rng.uniform(3, im.height * 0.6))
        x = float(rng.uniform(0, im.width - w))
        y = float(rng.uniform(0, im.height - h))
        return BBox(x, y, w, h)

    n_box = int(rng.integers(0, max_boxes + 1))
    annotations = []
    for aid in range(1, n_box + 1):
        im = images[int(rng.integers(len(images)))]
        iscrowd = allow_crowd and rng.random() < 0.1
        annotations.append(Annotation(id=aid, image_id=im.id,
                                      category_id=int(rng.integers(1, n_cat + 1)),
                                      bbox=random_box(im), iscrowd=iscrowd))
    ds = DetDataset(images=images, annotations=annotations, categories=categories,
                    split_tag="test")

    by_image = {im.id: im for im in images}
    dets: list[Detection] = []
    # noisy copies of ground truth: matches at assorted IoU levels, duplicates included
    for a in annotations:
        for _ in range(int(rng.integers(0, 3))):
            im = by_image[a.image_id]
            b = a.bbox
            shift = rng.normal(0, 0.15, size=4)
            x = min(max(b.x + shift[0] * b.w, 0.0), im.width - 1.0)
            y = min(max(b.y + shift[1] * b.h, 0.0), im.height - 1.0)
            w = min(max(b.w * (1 + shift[2]), 1.0), im.width - x)
            h = min(max(b.h * (1 + shift[3]), 1.0), im.height - y)
            cat = a.category_id
            if rng.random() < 0.1:
                cat = int(rng.integers(1, n_cat + 1))
            dets.append(Detection(image_id=a.image_id, category_id=cat,
                                  bbox=BBox(x, y, w, h),
                                  score=float(rng.uniform(0.05, 0.95))))
    # pure noise detections, some on images without ground truth
    for _ in range(int(rng.integers(0, 6))):
        im = images[int(rng.integers(len(images)))]
        dets.append(Detection(image_id=im.id, category_id=int(rng.integers(1, n_cat + 1)),
                              bbox=random_box(im), score=float(rng.uniform(0.05, 0.95))))
    return ds, dets


def random_sample(rng: np.random.Generator, min_size=24, max_size=96, max_boxes=6) -> Sample:
    """Random uint8 image with a handful of in-bounds labeled boxes.

    Box coordinates are quantized to 1/64 px: a dyadic grid (like real
    annotation precision) keeps reflection arithmetic exact, so flip
    involutions are byte-exact as the contract states.
    """
    w = int(rng.integers(min_size, max_size + 1))
    h = int(rng.integers(min_size, max_size + 1))
    pixels = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)

    def q(v: float) -> float:
        return np.floor(v * 64.0) / 64.0

    boxes = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        bw = q(rng.uniform(2, w * 0.7))
        bh = q(rng.uniform(2, h * 0.7))
        bx = q(rng.uniform(0, w - bw))
        by = q(rng.uniform(0, h - bh))
        boxes.append(LabeledBox(BBox(bx, by, bw, bh), int(rng.integers(1, 4))))
    return Sample(pixels=pixels, boxes=boxes)


@pytest.fixture
def tiny_gt() -> DetDataset:
    """Two images, three categories, five annotations."""
    return make_dataset(
        [
            (1, 100, 100, [(1, 1, 10, 10, 20, 20, 0), (2, 2, 50, 50, 30, 30, 0)]),
            (2, 80, 120, [(3, 1, 5, 5, 10, 10, 0), (4, 1, 30, 40, 25, 50, 0),
                          (5, 3, 0, 0, 40, 60, 0)]),
        ],
        {1: "a", 2: "b", 3: "c"},
    )


def perfect_detections(ds: DetDataset, score: float = 1.0) -> list[Detection]:
    return [
        Detection(image_id=a.image_id, category_id=a.category_id, bbox=a.bbox, score=score)
        for a in ds.annotations
        if not a.iscrowd
    ]
