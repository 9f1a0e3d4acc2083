"""Bounding-box-aware image augmentation operators and the probabilistic pipeline.

Six operators: mosaic (four-image composite), hsv_jitter (photometric), flip,
mixup (two-image blend with label union), resize, crop. Each fires
independently with its configured probability; multi-image operators draw
partners from a FIFO sample cache. All randomness derives from
(seed, image index, op index) substreams, so parallel workers reproduce the
serial stream exactly.

Geometry conventions, pinned so golden outputs are portable:
  - bilinear resampling with half-pixel centers, float64, rint rounding;
  - mosaic canvas is 2x the base image, pad value 114, sources keep-ratio
    scaled to the base size and anchored at the jittered center;
  - mixup letterboxes the partner to the target size (top-left placement) and
    blends with round-half-up;
  - clipped boxes are dropped below min_box_area or min_visibility.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import yaml
from PIL import Image

from .boxes import BBox, clip_box
from .rng import substream

log = logging.getLogger(__name__)

OP_KINDS = ("mosaic", "hsv_jitter", "flip", "mixup", "resize", "crop")
PAD_VALUE = 114


class CacheUnderfillError(Exception):
    """A multi-image operator was invoked without enough cached partners."""


@dataclass(frozen=True)
class LabeledBox:
    bbox: BBox
    category_id: int


@dataclass
class Sample:
    """One training image with its labeled boxes (uint8 RGB, HxWx3)."""

    pixels: np.ndarray
    boxes: list[LabeledBox]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def copy(self) -> "Sample":
        return Sample(pixels=self.pixels.copy(), boxes=list(self.boxes))

    def check(self) -> None:
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("sample pixels must be uint8 HxWx3")
        for lb in self.boxes:
            b = lb.bbox
            if b.x < -1e-6 or b.y < -1e-6 or b.x2 > self.width + 1e-6 or b.y2 > self.height + 1e-6:
                raise ValueError(f"box {b.as_xywh()} escapes image {self.width}x{self.height}")


# ---------------------------------------------------------------------------
# resampling and colorspace primitives


def bilinear_resize(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resample to (width, height) with half-pixel-center bilinear weights.

    Identical dimensions short-circuit to a byte-exact copy.
    """
    w, h = size
    if w <= 0 or h <= 0:
        raise ValueError(f"resize target must be positive, got {size}")
    sh, sw = pixels.shape[:2]
    if (sw, sh) == (w, h):
        return pixels.copy()
    xs = (np.arange(w, dtype=np.float64) + 0.5) * (sw / w) - 0.5
    ys = (np.arange(h, dtype=np.float64) + 0.5) * (sh / h) - 0.5
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    wx = (xs - x0)[None, :, None]
    wy = (ys - y0)[:, None, None]
    x0c = np.clip(x0, 0, sw - 1)
    x1c = np.clip(x0 + 1, 0, sw - 1)
    y0c = np.clip(y0, 0, sh - 1)
    y1c = np.clip(y0 + 1, 0, sh - 1)
    img = pixels.astype(np.float64)
    top = img[y0c][:, x0c] * (1.0 - wx) + img[y0c][:, x1c] * wx
    bot = img[y1c][:, x0c] * (1.0 - wx) + img[y1c][:, x1c] * wx
    out = top * (1.0 - wy) + bot * wy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def rgb_to_hsv(pixels: np.ndarray) -> np.ndarray:
    """uint8 RGB to float64 HSV with H in [0, 180) and S, V in [0, 255]."""
    arr = pixels.astype(np.float64) / 255.0
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    v = arr.max(axis=-1)
    c = v - arr.min(axis=-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    h = np.zeros_like(v)
    chroma = np.where(c > 0, c, 1.0)
    rm = (c > 0) & (v == r)
    gm = (c > 0) & (v == g) & ~rm
    bm = (c > 0) & ~rm & ~gm
    h[rm] = ((g - b)[rm] / chroma[rm]) % 6.0
    h[gm] = (b - r)[gm] / chroma[gm] + 2.0
    h[bm] = (r - g)[bm] / chroma[bm] + 4.0
    return np.stack([h * 30.0, s * 255.0, v * 255.0], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_hsv; returns float64 RGB in [0, 255]."""
    sector = (hsv[..., 0] / 30.0) % 6.0
    s = hsv[..., 1] / 255.0
    v = hsv[..., 2] / 255.0
    i = np.floor(sector)
    f = sector - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1) * 255.0


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(pixels).save(path, format="PNG")


# ---------------------------------------------------------------------------
# operators


def _remap_clip_boxes(
    boxes: list[LabeledBox],
    sx: float,
    sy: float,
    ox: float,
    oy: float,
    width: float,
    height: float,
    min_box_area: float,
    min_visibility: float,
) -> list[LabeledBox]:
    """Affine-remap boxes, clip to a window, and drop slivers."""
    out = []
    for lb in boxes:
        b = lb.bbox
        x1 = b.x * sx + ox
        y1 = b.y * sy + oy
        full_w = b.w * sx
        full_h = b.h * sy
        x2 = x1 + full_w
        y2 = y1 + full_h
        cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
        cx2, cy2 = min(x2, width), min(y2, height)
        # unclipped axes keep their exact scaled extent (x2 - x1 re-derivation
        # would perturb the last float bits of an untouched box)
        new_w = full_w if (cx1 == x1 and cx2 == x2) else cx2 - cx1
        new_h = full_h if (cy1 == y1 and cy2 == y2) else cy2 - cy1
        if new_w <= 0 or new_h <= 0:
            continue
        area = new_w * new_h
        if area < min_box_area or area / (full_w * full_h) < min_visibility:
            continue
        out.append(LabeledBox(BBox(cx1, cy1, new_w, new_h), lb.category_id))
    return out


def mosaic(
    target: Sample,
    partners: list[Sample],
    center_jitter: float = 0.5,
    pad_value: int = PAD_VALUE,
    rng: np.random.Generator | None = None,
    min_box_area: float = 1.0,
    min_visibility: float = 0.1,
) -> Sample:
    """Compose the target plus three partners into one 2x-size canvas.

    The mosaic center is drawn uniformly inside the jitter window
    [base*(1 - center_jitter), base*(1 + center_jitter)] on each axis
    (center_jitter 0.5 spans the central half of the canvas). Each source is
    keep-ratio scaled to the base size and anchored at the center corner of
    its quadrant: target top-left, partners top-right, bottom-left,
    bottom-right. Boxes are affine-remapped with the exact pixel scale
    factors, clipped at canvas bounds, and dropped below the sliver limits.
    """
    if len(partners) != 3:
        raise CacheUnderfillError(f"mosaic needs 3 partners, got {len(partners)}")
    base_h, base_w = target.pixels.shape[:2]
    cw, ch = 2 * base_w, 2 * base_h
    canvas = np.full((ch, cw, 3), pad_value, dtype=np.uint8)

    if center_jitter > 0:
        if rng is None:
            raise ValueError("center_jitter > 0 requires an rng")
        cx = int(round(base_w + (2.0 * rng.random() - 1.0) * center_jitter * base_w))
        cy = int(round(base_h + (2.0 * rng.random() - 1.0) * center_jitter * base_h))
    else:
        cx, cy = base_w, base_h

    boxes: list[LabeledBox] = []
    for quadrant, src in enumerate([target] + list(partners)):
        h, w = src.pixels.shape[:2]
        scale = min(base_h / h, base_w / w)
        sw = max(1, int(round(w * scale)))
        sh = max(1, int(round(h * scale)))
        scaled = bilinear_resize(src.pixels, (sw, sh))
        if quadrant == 0:
            ox, oy = cx - sw, cy - sh
        elif quadrant == 1:
            ox, oy = cx, cy - sh
        elif quadrant == 2:
            ox, oy = cx - sw, cy
        else:
            ox, oy = cx, cy
        x1p, y1p = max(ox, 0), max(oy, 0)
        x2p, y2p = min(ox + sw, cw), min(oy + sh, ch)
        if x2p > x1p and y2p > y1p:
            canvas[y1p:y2p, x1p:x2p] = scaled[y1p - oy : y2p - oy, x1p - ox : x2p - ox]
        boxes.extend(
            _remap_clip_boxes(
                src.boxes, sw / w, sh / h, ox, oy, cw, ch, min_box_area, min_visibility
            )
        )
    return Sample(pixels=canvas, boxes=boxes)


def hsv_jitter(
    s: Sample,
    hue_delta: float = 5,
    sat_delta: float = 30,
    val_delta: float = 30,
    rng: np.random.Generator | None = None,
) -> Sample:
    """Shift hue/saturation/value by per-image offsets uniform in [-delta, +delta].

    Deltas live on the 8-bit scale (hue in [0, 180) units); hue wraps, the
    other channels clamp. Boxes are untouched.
    """
    if hue_delta < 0 or sat_delta < 0 or val_delta < 0:
        raise ValueError("deltas must be non-negative")
    if rng is None:
        rng = np.random.default_rng()
    dh = rng.uniform(-hue_delta, hue_delta)
    ds = rng.uniform(-sat_delta, sat_delta)
    dv = rng.uniform(-val_delta, val_delta)
    if dh == 0.0 and ds == 0.0 and dv == 0.0:
        return s.copy()
    hsv = rgb_to_hsv(s.pixels)
    hsv[..., 0] = (hsv[..., 0] + dh) % 180.0
    hsv[..., 1] = np.clip(hsv[..., 1] + ds, 0.0, 255.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + dv, 0.0, 255.0)
    out = np.clip(np.rint(hsv_to_rgb(hsv)), 0, 255).astype(np.uint8)
    return Sample(pixels=out, boxes=list(s.boxes))


def flip(s: Sample, horizontal: bool = False, vertical: bool = False) -> Sample:
    """Mirror pixels and boxes; applying the same flip twice is a byte-exact identity."""
    if not (horizontal or vertical):
        raise ValueError("at least one flip direction must be set")
    px = s.pixels
    if horizontal:
        px = px[:, ::-1]
    if vertical:
        px = px[::-1]
    w, h = s.width, s.height
    boxes = []
    for lb in s.boxes:
        b = lb.bbox
        x = w - b.x - b.w if horizontal else b.x
        y = h - b.y - b.h if vertical else b.y
        boxes.append(LabeledBox(BBox(x, y, b.w, b.h), lb.category_id))
    return Sample(pixels=np.ascontiguousarray(px), boxes=boxes)


def mixup(a: Sample, b: Sample, lam: float = 0.5, pad_value: int = PAD_VALUE) -> Sample:
    """Blend two samples as lam*a + (1-lam)*b and take the union of their boxes.

    The partner is letterboxed to the target's size first (keep-ratio scale,
    top-left placement, pad_value fill); its boxes are remapped by the exact
    letterbox scale. Blending rounds half up.
    """
    if not (0.0 < lam < 1.0):
        raise ValueError(f"lam must be strictly inside (0, 1), got {lam}")
    ha, wa = a.pixels.shape[:2]
    hb, wb = b.pixels.shape[:2]
    if (wb, hb) == (wa, ha):
        b_pixels = b.pixels
        b_boxes = list(b.boxes)
    else:
        scale = min(wa / wb, ha / hb)
        sw = max(1, int(round(wb * scale)))
        sh = max(1, int(round(hb * scale)))
        b_pixels = np.full((ha, wa, 3), pad_value, dtype=np.uint8)
        b_pixels[:sh, :sw] = bilinear_resize(b.pixels, (sw, sh))
        sx, sy = sw / wb, sh / hb
        b_boxes = [
            LabeledBox(BBox(lb.bbox.x * sx, lb.bbox.y * sy, lb.bbox.w * sx, lb.bbox.h * sy), lb.category_id)
            for lb in b.boxes
        ]
    blend = lam * a.pixels.astype(np.float64) + (1.0 - lam) * b_pixels.astype(np.float64)
    out = np.clip(np.floor(blend + 0.5), 0, 255).astype(np.uint8)
    return Sample(pixels=out, boxes=list(a.boxes) + b_boxes)


def resize(
    s: Sample,
    target: tuple[int, int] | None = None,
    scale_range: tuple[float, float] | None = None,
    keep_ratio: bool = False,
    pad_value: int = PAD_VALUE,
    rng: np.random.Generator | None = None,
) -> Sample:
    """Resize to explicit dimensions or by a factor drawn from scale_range.

    Boxes scale by the exact pixel ratios and are never dropped. keep_ratio
    with an explicit target letterboxes into the target canvas.
    """
    if (target is None) == (scale_range is None):
        raise ValueError("provide exactly one of target or scale_range")
    h, w = s.pixels.shape[:2]
    if scale_range is not None:
        lo, hi = scale_range
        if lo <= 0 or hi <= 0 or hi < lo:
            raise ValueError(f"invalid scale range {scale_range}")
        if rng is None:
            raise ValueError("scale_range requires an rng")
        factor = float(rng.uniform(lo, hi))
        new_w = max(1, int(round(w * factor)))
        new_h = max(1, int(round(h * factor)))
        pixels = bilinear_resize(s.pixels, (new_w, new_h))
        sx, sy = new_w / w, new_h / h
        boxes = [
            LabeledBox(BBox(lb.bbox.x * sx, lb.bbox.y * sy, lb.bbox.w * sx, lb.bbox.h * sy), lb.category_id)
            for lb in s.boxes
        ]
        return Sample(pixels=pixels, boxes=boxes)

    tw, th = target
    if tw <= 0 or th <= 0:
        raise ValueError(f"resize target must be positive, got {target}")
    if keep_ratio:
        scale = min(tw / w, th / h)
        sw = max(1, int(round(w * scale)))
        sh = max(1, int(round(h * scale)))
        canvas = np.full((th, tw, 3), pad_value, dtype=np.uint8)
        canvas[:sh, :sw] = bilinear_resize(s.pixels, (sw, sh))
        sx, sy = sw / w, sh / h
        pixels = canvas
    else:
        sx, sy = tw / w, th / h
        pixels = bilinear_resize(s.pixels, (tw, th))
    boxes = [
        LabeledBox(BBox(lb.bbox.x * sx, lb.bbox.y * sy, lb.bbox.w * sx, lb.bbox.h * sy), lb.category_id)
        for lb in s.boxes
    ]
    return Sample(pixels=pixels, boxes=boxes)


def crop(
    s: Sample,
    crop_size: tuple[int, int],
    rng: np.random.Generator | None = None,
    min_box_area: float = 1.0,
    min_visibility: float = 0.1,
    pad_value: int = PAD_VALUE,
    origin: tuple[int, int] | None = None,
) -> Sample:
    """Take a window of crop_size at a uniformly drawn origin.

    Images smaller than the window are padded bottom-right first. Boxes are
    translated into the window, clipped, and dropped below the sliver limits.
    An explicit origin bypasses the draw (used by tests and previews).
    """
    cw, ch = crop_size
    if cw <= 0 or ch <= 0:
        raise ValueError(f"crop size must be positive, got {crop_size}")
    pixels = s.pixels
    h, w = pixels.shape[:2]
    if cw > w or ch > h:
        padded = np.full((max(h, ch), max(w, cw), 3), pad_value, dtype=np.uint8)
        padded[:h, :w] = pixels
        pixels = padded
        h, w = pixels.shape[:2]
    if origin is None:
        if rng is None:
            raise ValueError("crop requires an rng when origin is not forced")
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
    else:
        x0, y0 = origin
        if not (0 <= x0 <= w - cw and 0 <= y0 <= h - ch):
            raise ValueError(f"origin {origin} invalid for crop {crop_size} of {w}x{h}")
    window = pixels[y0 : y0 + ch, x0 : x0 + cw].copy()
    boxes = _remap_clip_boxes(
        s.boxes, 1.0, 1.0, -float(x0), -float(y0), float(cw), float(ch),
        min_box_area, min_visibility,
    )
    return Sample(pixels=window, boxes=boxes)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class AugOpSpec:
    """One pipeline entry: operator kind, firing probability, parameters."""

    kind: str
    probability: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}; expected one of {OP_KINDS}")
        if not (0.0 <= self.probability <= 1.0):
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")


@dataclass
class AugPipelineSpec:
    ops: list[AugOpSpec]
    cache_capacity: int = 8
    min_box_area: float = 1.0
    min_visibility: float = 0.1

    def __post_init__(self):
        kinds = {op.kind for op in self.ops}
        if "mosaic" in kinds and self.cache_capacity < 4:
            raise ValueError("cache_capacity must be >= 4 when mosaic is present")
        if "mixup" in kinds and self.cache_capacity < 2:
            raise ValueError("cache_capacity must be >= 2 when mixup is present")


class SampleCache:
    """FIFO ring buffer of recent samples feeding mosaic/mixup partner picks."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[Sample] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, s: Sample) -> None:
        self._buf.append(s)

    def pick(self, rng: np.random.Generator, n: int) -> list[Sample]:
        """Draw n partners uniformly (with replacement) from the buffer."""
        if not self._buf:
            raise CacheUnderfillError("sample cache is empty")
        return [self._buf[int(rng.integers(len(self._buf)))] for _ in range(n)]


def default_pipeline_spec() -> AugPipelineSpec:
    """Default mixed pipeline: mosaic 0.6, flip 0.5, mixup 0.3 plus the common ops.

    The hsv/resize/crop probabilities (0.5, 1.0, 0.5) are toolkit defaults,
    not externally fixed values.
    """
    return AugPipelineSpec(
        ops=[
            AugOpSpec("mosaic", 0.6, {"center_jitter": 0.5, "pad_value": PAD_VALUE}),
            AugOpSpec("hsv_jitter", 0.5, {"hue_delta": 5, "sat_delta": 30, "val_delta": 30}),
            AugOpSpec("flip", 0.5, {"horizontal": True}),
            AugOpSpec("mixup", 0.3, {"lam": 0.5}),
            AugOpSpec("resize", 1.0, {"scale_range": [0.5, 1.5]}),
            AugOpSpec("crop", 0.5, {"rel_size": [0.8, 0.8]}),
        ],
    )


def load_pipeline_spec(path) -> AugPipelineSpec:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    ops = [
        AugOpSpec(kind=o["kind"], probability=float(o.get("p", 1.0)), params=dict(o.get("params", {})))
        for o in doc.get("ops", [])
    ]
    return AugPipelineSpec(
        ops=ops,
        cache_capacity=int(doc.get("cache_capacity", 8)),
        min_box_area=float(doc.get("min_box_area", 1.0)),
        min_visibility=float(doc.get("min_visibility", 0.1)),
    )


def dump_pipeline_spec(spec: AugPipelineSpec, path) -> None:
    doc = {
        "cache_capacity": spec.cache_capacity,
        "min_box_area": spec.min_box_area,
        "min_visibility": spec.min_visibility,
        "ops": [
            {"kind": op.kind, "p": op.probability, "params": op.params} for op in spec.ops
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def _apply_op(
    s: Sample,
    op: AugOpSpec,
    spec: AugPipelineSpec,
    cache: SampleCache,
    rng: np.random.Generator,
) -> Sample | None:
    """Apply one fired operator; None means skipped (cache still warming up)."""
    p = op.params
    if op.kind == "mosaic":
        if len(cache) < 3:
            log.warning("mosaic skipped: cache holds %d samples, need 3", len(cache))
            return None
        partners = cache.pick(rng, 3)
        return mosaic(
            s,
            partners,
            center_jitter=float(p.get("center_jitter", 0.5)),
            pad_value=int(p.get("pad_value", PAD_VALUE)),
            rng=rng,
            min_box_area=spec.min_box_area,
            min_visibility=spec.min_visibility,
        )
    if op.kind == "hsv_jitter":
        return hsv_jitter(
            s,
            hue_delta=float(p.get("hue_delta", 5)),
            sat_delta=float(p.get("sat_delta", 30)),
            val_delta=float(p.get("val_delta", 30)),
            rng=rng,
        )
    if op.kind == "flip":
        return flip(
            s,
            horizontal=bool(p.get("horizontal", True)),
            vertical=bool(p.get("vertical", False)),
        )
    if op.kind == "mixup":
        if len(cache) < 1:
            log.warning("mixup skipped: cache is empty")
            return None
        partner = cache.pick(rng, 1)[0]
        return mixup(s, partner, lam=float(p.get("lam", 0.5)), pad_value=int(p.get("pad_value", PAD_VALUE)))
    if op.kind == "resize":
        if "scale_range" in p:
            lo, hi = p["scale_range"]
            return resize(s, scale_range=(float(lo), float(hi)), rng=rng)
        if "target" not in p:
            raise ValueError("resize op needs a scale_range or target param")
        tw, th = p["target"]
        return resize(
            s, target=(int(tw), int(th)), keep_ratio=bool(p.get("keep_ratio", False)),
            pad_value=int(p.get("pad_value", PAD_VALUE)), rng=rng,
        )
    if op.kind == "crop":
        if "rel_size" in p:
            fw, fh = p["rel_size"]
            size = (max(1, int(round(s.width * float(fw)))), max(1, int(round(s.height * float(fh)))))
        else:
            size = (int(p["size"][0]), int(p["size"][1]))
        return crop(
            s, size, rng=rng, min_box_area=spec.min_box_area,
            min_visibility=spec.min_visibility, pad_value=int(p.get("pad_value", PAD_VALUE)),
        )
    raise AssertionError(f"unhandled op kind {op.kind}")


def apply_pipeline(
    s: Sample,
    spec: AugPipelineSpec,
    cache: SampleCache,
    seed: int,
    index: int = 0,
    trace: list[str] | None = None,
) -> Sample:
    """Run the ordered pipeline on one sample.

    Each op draws from substream(seed, index, op position): first one uniform
    gate draw against its probability, then its own parameter draws. The
    pristine input is pushed into the cache after processing. When trace is a
    list, the kinds of ops that actually ran are appended to it.
    """
    current = s
    for op_i, op in enumerate(spec.ops):
        rng = substream(seed, index, op_i)
        if rng.random() >= op.probability:
            continue
        result = _apply_op(current, op, spec, cache, rng)
        if result is None:
            continue
        current = result
        if trace is not None:
            trace.append(op.kind)
    cache.push(s)
    return current


def sample_digest(s: Sample) -> str:
    """Stable content digest of pixels and boxes, for byte-exactness checks."""
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(s.pixels).tobytes())
    payload = [(lb.bbox.as_xywh(), lb.category_id) for lb in s.boxes]
    h.update(json.dumps(payload).encode())
    return h.hexdigest()
