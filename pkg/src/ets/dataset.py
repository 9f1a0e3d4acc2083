"""COCO-format detection datasets: ingestion, K-shot episodes, stratified validation sets.

The validation-set builder samples annotations stratified by category so the
per-category quota stays within {floor(rate*n_c), ceil(rate*n_c)}, relabels the
result with coarse category ids, and optionally emits the complementary
remainder split for leak-free evaluation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

from .boxes import BBox
from .rng import substream

log = logging.getLogger(__name__)


class DatasetError(Exception):
    """Base class for dataset ingestion and sampling failures."""


class CocoParseError(DatasetError):
    """Malformed COCO JSON; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class IntegrityError(DatasetError):
    """Dangling image/category reference, named after the offending annotation."""


class BoxValidationError(DatasetError):
    """Annotation box violates size or containment invariants."""


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise BoxValidationError(
                f"image {self.id} has non-positive dimensions {self.width}x{self.height}"
            )


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: BBox
    iscrowd: bool = False


@dataclass
class DetDataset:
    """COCO-style image and annotation collection with a category table."""

    images: list[ImageRecord]
    annotations: list[Annotation]
    categories: dict[int, str]
    split_tag: str = "train"

    def __post_init__(self):
        self.validate()

    def validate(self):
        img_ids = [im.id for im in self.images]
        if len(img_ids) != len(set(img_ids)):
            raise IntegrityError("duplicate image ids in dataset")
        ann_ids = [a.id for a in self.annotations]
        if len(ann_ids) != len(set(ann_ids)):
            raise IntegrityError("duplicate annotation ids in dataset")
        by_id = {im.id: im for im in self.images}
        for a in self.annotations:
            if a.image_id not in by_id:
                raise IntegrityError(
                    f"annotation {a.id} references missing image_id {a.image_id}"
                )
            if a.category_id not in self.categories:
                raise IntegrityError(
                    f"annotation {a.id} references missing category_id {a.category_id}"
                )
            im = by_id[a.image_id]
            if not a.bbox.fits_in(im.width, im.height):
                raise BoxValidationError(
                    f"annotation {a.id} box {a.bbox.as_xywh()} exceeds image "
                    f"{im.id} bounds {im.width}x{im.height}"
                )

    def images_by_id(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out

    def category_counts(self) -> dict[int, int]:
        """Annotation counts per category id, including zero-count categories."""
        counts = {cid: 0 for cid in self.categories}
        for a in self.annotations:
            counts[a.category_id] += 1
        return counts

    def to_coco_dict(self) -> dict:
        return {
            "images": [
                {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
                for im in self.images
            ],
            "annotations": [
                {
                    "id": a.id,
                    "image_id": a.image_id,
                    "category_id": a.category_id,
                    "bbox": a.bbox.as_xywh(),
                    "area": float(a.bbox.area),
                    "iscrowd": int(a.iscrowd),
                }
                for a in self.annotations
            ],
            "categories": [
                {"id": cid, "name": name} for cid, name in sorted(self.categories.items())
            ],
        }

    def canonical_bytes(self) -> bytes:
        """Deterministic serialization used for digests and byte-equality checks."""
        return json.dumps(self.to_coco_dict(), sort_keys=True, separators=(",", ":")).encode()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_coco_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class Episode:
    """K-shot training subset: min(K, n_c) annotations retained per category."""

    base: DetDataset
    k: int
    seed: int


@dataclass
class CoarseLabelMap:
    """Total mapping from fine category ids to a coarse category table."""

    entries: dict[int, int]
    categories: dict[int, str]

    def __post_init__(self):
        for fine, coarse in self.entries.items():
            if coarse not in self.categories:
                raise IntegrityError(
                    f"coarse map sends fine id {fine} to unknown coarse id {coarse}"
                )

    @classmethod
    def identity(cls, categories: dict[int, str]) -> "CoarseLabelMap":
        return cls(entries={cid: cid for cid in categories}, categories=dict(categories))

    def check_total(self, categories: dict[int, str]) -> None:
        missing = sorted(set(categories) - set(self.entries))
        if missing:
            raise IntegrityError(f"coarse map is not total: fine ids {missing} unmapped")

    @classmethod
    def parse(cls, text: str) -> "CoarseLabelMap":
        """Parse the `fine_id coarse_id coarse_name` per-line format."""
        entries: dict[int, int] = {}
        categories: dict[int, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(maxsplit=2)
            if len(parts) < 3:
                raise CocoParseError(f"coarse map line {lineno}: expected 'fine coarse name'")
            fine, coarse, name = int(parts[0]), int(parts[1]), parts[2]
            entries[fine] = coarse
            if coarse in categories and categories[coarse] != name:
                raise IntegrityError(
                    f"coarse id {coarse} named both {categories[coarse]!r} and {name!r}"
                )
            categories[coarse] = name
        return cls(entries=entries, categories=categories)

    def dump(self) -> str:
        lines = [
            f"{fine} {coarse} {self.categories[coarse]}"
            for fine, coarse in sorted(self.entries.items())
        ]
        return "\n".join(lines) + "\n"


def parse_coco(raw: bytes | str, lenient: bool = False) -> DetDataset:
    """Parse COCO annotation JSON into a validated DetDataset.

    With lenient=True, annotations whose boxes have non-positive dimensions or
    exceed image bounds are dropped with a warning instead of raising.
    """
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise CocoParseError(f"malformed COCO JSON: {e.msg}", offset=offset) from e
    return dataset_from_coco_dict(doc, lenient=lenient)


def dataset_from_coco_dict(doc: dict, lenient: bool = False) -> DetDataset:
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise CocoParseError(f"missing top-level '{key}' array")

    categories = {int(c["id"]): str(c["name"]) for c in doc["categories"]}
    images = [
        ImageRecord(
            id=int(im["id"]),
            file_name=str(im["file_name"]),
            width=int(im["width"]),
            height=int(im["height"]),
        )
        for im in doc["images"]
    ]
    img_by_id = {im.id: im for im in images}

    annotations: list[Annotation] = []
    for rec in doc["annotations"]:
        aid = int(rec["id"])
        image_id = int(rec["image_id"])
        category_id = int(rec["category_id"])
        if image_id not in img_by_id:
            raise IntegrityError(f"annotation {aid} references missing image_id {image_id}")
        if category_id not in categories:
            raise IntegrityError(f"annotation {aid} references missing category_id {category_id}")
        x, y, w, h = (float(v) for v in rec["bbox"])
        im = img_by_id[image_id]
        try:
            box = BBox(x, y, w, h)
            if not box.fits_in(im.width, im.height):
                raise ValueError(
                    f"box {box.as_xywh()} exceeds image bounds {im.width}x{im.height}"
                )
        except ValueError as e:
            if lenient:
                log.warning("dropping annotation %d: %s", aid, e)
                continue
            raise BoxValidationError(f"annotation {aid}: {e}") from e
        annotations.append(
            Annotation(
                id=aid,
                image_id=image_id,
                category_id=category_id,
                bbox=box,
                iscrowd=bool(rec.get("iscrowd", 0)),
            )
        )
    return DetDataset(images=images, annotations=annotations, categories=categories)


def load_coco(path, split_tag: str = "train", lenient: bool = False) -> DetDataset:
    with open(path, "rb") as fh:
        ds = parse_coco(fh.read(), lenient=lenient)
    ds.split_tag = split_tag
    return ds


def save_episode(episode: Episode, path) -> None:
    """Write an episode as COCO JSON with a sidecar `episode` metadata key."""
    doc = episode.base.to_coco_dict()
    doc["episode"] = {"k": episode.k, "seed": episode.seed}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_episode(path) -> Episode:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    meta = doc.get("episode", {})
    base = dataset_from_coco_dict(doc)
    base.split_tag = "train"
    return Episode(base=base, k=int(meta.get("k", 1)), seed=int(meta.get("seed", 0)))


def _restrict(ds: DetDataset, ann_ids: set[int], split_tag: str) -> DetDataset:
    """Dataset restricted to the given annotations plus the images they live on."""
    keep_anns = [a for a in ds.annotations if a.id in ann_ids]
    keep_imgs = {a.image_id for a in keep_anns}
    return DetDataset(
        images=[im for im in ds.images if im.id in keep_imgs],
        annotations=keep_anns,
        categories=dict(ds.categories),
        split_tag=split_tag,
    )


def sample_kshot(ds: DetDataset, k: int, seed: int) -> Episode:
    """Draw min(k, n_c) annotations per category, uniformly without replacement.

    Selection per category uses an independent substream keyed by the category
    id, so the draw for one category does not depend on which other categories
    exist. An image enters the episode iff it contributes a selected annotation.
    """
    if k <= 0:
        raise ValueError(f"k must be >= 1, got {k}")
    if not ds.images:
        raise ValueError("cannot sample an episode from an empty dataset")

    by_cat: dict[int, list[Annotation]] = {cid: [] for cid in ds.categories}
    for a in ds.annotations:
        by_cat[a.category_id].append(a)

    selected: set[int] = set()
    for cid in sorted(ds.categories):
        pool = by_cat[cid]
        if not pool:
            log.warning("category %d (%s) has no instances; skipped", cid, ds.categories[cid])
            continue
        m = min(k, len(pool))
        rng = substream(seed, cid)
        picks = rng.choice(len(pool), size=m, replace=False)
        selected.update(pool[i].id for i in picks)

    return Episode(base=_restrict(ds, selected, split_tag="train"), k=k, seed=seed)


def _largest_remainder_quotas(counts: dict[int, int], rate: float) -> dict[int, int]:
    """Floor each rate*n_c, then hand out remainders by largest fractional part.

    Exact products are snapped to the nearest integer when within 1e-9 so float
    dust neither earns nor forfeits a remainder bump. Ties break by ascending
    category id.
    """
    exact: dict[int, float] = {}
    for cid, n in counts.items():
        v = rate * n
        r = round(v)
        exact[cid] = float(r) if abs(v - r) < 1e-9 else v
    floors = {cid: int(math.floor(v)) for cid, v in exact.items()}
    fracs = {cid: exact[cid] - floors[cid] for cid in exact}
    total_target = int(math.floor(sum(exact.values()) + 0.5))
    deficit = total_target - sum(floors.values())
    order = sorted((cid for cid in fracs if fracs[cid] > 0), key=lambda c: (-fracs[c], c))
    quotas = dict(floors)
    for cid in order[:max(deficit, 0)]:
        quotas[cid] += 1
    return quotas


def apply_coarse_map(ds: DetDataset, coarse: CoarseLabelMap, split_tag: str | None = None) -> DetDataset:
    """Relabel every annotation with its coarse category id."""
    coarse.check_total({a.category_id: "" for a in ds.annotations})
    return DetDataset(
        images=list(ds.images),
        annotations=[replace(a, category_id=coarse.entries[a.category_id]) for a in ds.annotations],
        categories=dict(coarse.categories),
        split_tag=split_tag if split_tag is not None else ds.split_tag,
    )


def build_validation_set(
    test: DetDataset,
    rate: float,
    coarse: CoarseLabelMap | None = None,
    seed: int = 0,
    disjoint: bool = False,
):
    """Sample a validation set from the test split, stratified by category.

    Per category c the sampled-annotation quota is floor(rate*n_c) or
    ceil(rate*n_c) (largest-remainder rounding). Images enter the set whole, so
    residual annotations on an included image ride along and count toward their
    own category's quota. Output annotations carry coarse category ids.

    Returns the val dataset, or (val, remainder) when disjoint is set; the
    remainder keeps fine labels and partitions the test image ids with val.
    """
    if not (0.0 < rate <= 1.0):
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    if coarse is None:
        coarse = CoarseLabelMap.identity(test.categories)
    coarse.check_total(test.categories)

    counts = {cid: n for cid, n in test.category_counts().items() if n > 0}
    quotas = _largest_remainder_quotas(counts, rate)
    for cid, q in quotas.items():
        if q == 0:
            log.warning(
                "category %d (%s) got a zero quota at rate %.3g; force-including one instance",
                cid, test.categories[cid], rate,
            )
            quotas[cid] = 1

    anns_by_image = test.annotations_by_image()
    by_cat: dict[int, list[Annotation]] = {cid: [] for cid in counts}
    for a in test.annotations:
        by_cat[a.category_id].append(a)

    selected_imgs: set[int] = set()

    def included_count(cid: int) -> int:
        return sum(1 for a in by_cat[cid] if a.image_id in selected_imgs)

    for cid in sorted(counts):
        rng = substream(seed, cid)
        # one annotation at a time: an image pick may drag along more instances
        # of this same category, which must count against the quota
        while included_count(cid) < quotas[cid]:
            pool = [a for a in by_cat[cid] if a.image_id not in selected_imgs]
            if not pool:
                break
            pick = pool[int(rng.integers(len(pool)))]
            selected_imgs.add(pick.image_id)

    val_fine = DetDataset(
        images=[im for im in test.images if im.id in selected_imgs],
        annotations=[a for a in test.annotations if a.image_id in selected_imgs],
        categories=dict(test.categories),
        split_tag="val",
    )
    val = apply_coarse_map(val_fine, coarse, split_tag="val")

    if not disjoint:
        return val
    remainder = DetDataset(
        images=[im for im in test.images if im.id not in selected_imgs],
        annotations=[a for a in test.annotations if a.image_id not in selected_imgs],
        categories=dict(test.categories),
        split_tag="test",
    )
    return val, remainder


@dataclass
class DistributionReport:
    """Per-category proportion comparison between a val set and its reference."""

    rows: list[tuple[int, str, float, float]] = field(default_factory=list)
    max_abs_deviation: float = 0.0

    def to_dict(self) -> dict:
        return {
            "categories": [
                {"id": cid, "name": name, "p_val": pv, "p_ref": pr}
                for cid, name, pv, pr in self.rows
            ],
            "max_abs_deviation": self.max_abs_deviation,
        }


def distribution_report(val: DetDataset, reference: DetDataset) -> DistributionReport:
    """Compare per-category annotation proportions of val against a reference."""
    shared = set(val.categories) & set(reference.categories)
    if not shared:
        raise ValueError("val and reference datasets have disjoint category tables")
    all_ids = sorted(set(val.categories) | set(reference.categories))

    vc = val.category_counts()
    rc = reference.category_counts()
    v_total = sum(vc.values())
    r_total = sum(rc.values())

    rows = []
    max_dev = 0.0
    for cid in all_ids:
        pv = vc.get(cid, 0) / v_total if v_total else 0.0
        pr = rc.get(cid, 0) / r_total if r_total else 0.0
        name = val.categories.get(cid) or reference.categories.get(cid, "")
        rows.append((cid, name, pv, pr))
        max_dev = max(max_dev, abs(pv - pr))
    return DistributionReport(rows=rows, max_abs_deviation=max_dev)
