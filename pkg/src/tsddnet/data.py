"""Dataset records, manifest I/O, patient-level fold planning and ROI cropping."""

from __future__ import annotations

import csv
import enum
import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

ROI_SIZE = 224
MANIFEST_HEADER = ["image_id", "patient_id", "label", "x", "y", "w", "h", "image_path"]


class DataError(ValueError):
    """Raised for unreadable or inconsistent dataset inputs."""


class AnnotationKind(str, enum.Enum):
    FULLY = "FULLY"
    PARTIAL = "PARTIAL"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates: left, top, width, height."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive area, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x2, self.y2)

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2) -> "BoundingBox":
        return cls(float(x1), float(y1), float(x2) - float(x1), float(y2) - float(y1))

    def clip(self, width: int, height: int) -> "BoundingBox":
        """Clip to ``[0, width] x [0, height]``; raises ValueError if nothing remains."""
        x1 = min(max(self.x, 0.0), width)
        y1 = min(max(self.y, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return BoundingBox.from_xyxy(x1, y1, x2, y2)

    def within(self, width: int, height: int, tol: float = 1e-9) -> bool:
        return (self.x >= -tol and self.y >= -tol
                and self.x2 <= width + tol and self.y2 <= height + tol)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.as_tuple()]


@dataclass
class ImageRecord:
    """One grayscale image plus its labels.

    ``hidden_roi`` keeps the manual box of an image whose ROI was withheld by
    :func:`apply_annotation_fraction`. Training code must only read ``manual_roi``.
    """

    image_id: str
    patient_id: str
    label: int
    manual_roi: BoundingBox | None = None
    image_path: str | None = None
    hidden_roi: BoundingBox | None = field(default=None, repr=False)
    _pixels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    @property
    def annotation_kind(self) -> AnnotationKind:
        return AnnotationKind.FULLY if self.manual_roi is not None else AnnotationKind.PARTIAL

    @property
    def pixels(self) -> np.ndarray:
        if self._pixels is None:
            if self.image_path is None:
                raise DataError(f"{self.image_id}: no pixels and no image path")
            self._pixels = read_gray_png(self.image_path)
        return self._pixels

    @pixels.setter
    def pixels(self, value: np.ndarray):
        self._pixels = value

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # (H, W)

    @property
    def reference_roi(self) -> BoundingBox | None:
        """Manual box whether visible or withheld (evaluation only)."""
        return self.manual_roi if self.manual_roi is not None else self.hidden_roi


def read_gray_png(path: str | Path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG into float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.dtype == np.uint8:
        out = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32, np.int16):
        out = arr.astype(np.float32) / 65535.0
    else:
        raise DataError(f"{path}: unsupported PNG dtype {arr.dtype}")
    return out


def write_gray_png(path: str | Path, pixels: np.ndarray):
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, optimize=False)


# ---------------------------------------------------------------------------
# manifest


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def load_manifest(path: str | Path, eager: bool = False) -> list[ImageRecord]:
    """Parse a manifest CSV. Empty box fields mean the image is partially annotated.

    Image paths are resolved relative to the manifest's directory. Boxes are
    clipped to the image bounds when the image size can be read.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            records.append(_parse_row(row, root, lineno, path, eager))
    return records


def _parse_row(row, root: Path, lineno: int, path: Path, eager: bool) -> ImageRecord:
    image_id, patient_id, label_s, *box_s, image_path = [c.strip() for c in row]
    if not image_id or not patient_id:
        raise DataError(f"{path}:{lineno}: empty image_id or patient_id")
    try:
        label = int(label_s)
    except ValueError:
        raise DataError(f"{path}:{lineno}: bad label {label_s!r}") from None
    if label not in (0, 1):
        raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label}")

    box = None
    if any(box_s):
        if not all(box_s):
            raise DataError(f"{path}:{lineno}: box fields must be all present or all empty")
        try:
            x, y, w, h = (float(v) for v in box_s)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric box field") from None
        try:
            box = BoundingBox(x, y, w, h)
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: invalid box: {e}") from None

    full_path = None
    if image_path:
        full_path = str(Path(image_path) if Path(image_path).is_absolute() else root / image_path)
    rec = ImageRecord(image_id, patient_id, label, box, full_path)
    if full_path is not None and (eager or box is not None):
        if not Path(full_path).is_file():
            raise DataError(f"{path}:{lineno}: image not found: {full_path}")
        if eager:
            rec.pixels = read_gray_png(full_path)
            H, W = rec.pixels.shape
        else:
            with Image.open(full_path) as im:
                W, H = im.size
        if box is not None:
            try:
                rec.manual_roi = box.clip(W, H)
            except ValueError:
                raise DataError(f"{path}:{lineno}: box {box.as_tuple()} lies outside the {W}x{H} image") from None
    return rec


def write_manifest(records: Iterable[ImageRecord], path: str | Path, root: str | Path | None = None):
    """Write records as a manifest. Image paths are made relative to ``root`` when possible."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            box = [""] * 4 if r.manual_roi is None else [_fmt(v) for v in r.manual_roi.as_tuple()]
            ipath = ""
            if r.image_path:
                try:
                    ipath = str(Path(r.image_path).relative_to(root))
                except ValueError:
                    ipath = str(r.image_path)
            w.writerow([r.image_id, r.patient_id, r.label, *box, ipath])


# ---------------------------------------------------------------------------
# folds and annotation fraction


@dataclass
class Fold:
    train: list[str]
    val: list[str]
    test: list[str]


@dataclass
class FoldPlan:
    folds: list[Fold]
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed,
                           "folds": [{"train": f.train, "val": f.val, "test": f.test} for f in self.folds]},
                          indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls([Fold(f["train"], f["val"], f["test"]) for f in d["folds"]], d.get("seed", 0))


def largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    """Apportion ``total`` integer units proportionally to ``weights``.

    Ties in the remainders go to the earlier weight.
    """
    s = float(sum(weights))
    quotas = [total * w / s for w in weights]
    counts = [math.floor(q + 1e-9) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def patient_ids(records: Iterable[ImageRecord]) -> list[str]:
    return sorted({r.patient_id for r in records})


def make_fold_plan(records: Sequence[ImageRecord], n_folds: int = 5, seed: int = 0,
                   proportions: Sequence[float] = (0.7, 0.1, 0.2)) -> FoldPlan:
    """Patient-disjoint train/val/test folds where every patient is tested exactly once.

    Patients are shuffled by ``seed`` and split into ``n_folds`` contiguous test
    blocks. The validation set of fold ``i`` is taken from the patients that
    follow block ``i`` in the cyclic shuffled order; its size is the
    largest-remainder share of the validation proportion.
    """
    pids = patient_ids(records)
    n = len(pids)
    if n < n_folds:
        raise DataError(f"need at least {n_folds} patients for {n_folds}-fold CV, got {n}")
    order = pids[:]
    random.Random(seed).shuffle(order)

    block_sizes = largest_remainder(n, [1.0] * n_folds)
    n_val = largest_remainder(n, proportions)[1]
    folds = []
    start = 0
    for size in block_sizes:
        test = order[start:start + size]
        rest = order[start + size:] + order[:start]
        val = rest[:n_val]
        train = rest[n_val:]
        folds.append(Fold(sorted(train), sorted(val), sorted(test)))
        start += size
    return FoldPlan(folds, seed)


def n_annotated(n_patients: int, p: float) -> int:
    # epsilon guards against 0.6 * 10 == 6.000000000000001
    return min(n_patients, math.ceil(p * n_patients - 1e-9))


def apply_annotation_fraction(records: Sequence[ImageRecord], p: float, seed: int = 0) -> list[ImageRecord]:
    """Keep manual ROIs for ``ceil(p * #patients)`` seeded-random patients.

    All images of the other patients become partially annotated; their boxes
    move to ``hidden_roi``. The patient ordering depends only on the seed and
    the patient set, so the annotated set at a smaller ``p`` is a subset of the
    one at a larger ``p``.
    """
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p must lie in (0, 1], got {p}")
    for r in records:
        if r.reference_roi is None:
            raise DataError(f"{r.image_id}: apply_annotation_fraction needs a manual ROI on every record")
    pids = patient_ids(records)
    order = pids[:]
    random.Random(seed).shuffle(order)
    keep = set(order[:n_annotated(len(pids), p)])
    out = []
    for r in records:
        box = r.reference_roi
        if r.patient_id in keep:
            out.append(replace(r, manual_roi=box, hidden_roi=None))
        else:
            out.append(replace(r, manual_roi=None, hidden_roi=box))
    return out


def select_patients(records: Iterable[ImageRecord], pids: Iterable[str]) -> list[ImageRecord]:
    keep = set(pids)
    return [r for r in records if r.patient_id in keep]


# ---------------------------------------------------------------------------
# cropping


def crop_rois(images: torch.Tensor, boxes: torch.Tensor, size: int = ROI_SIZE) -> torch.Tensor:
    """Bilinear crop-and-resize.

    images: (N, C, H, W); boxes: (N, 4) as (x, y, w, h) in pixels. Output pixel
    centres are spread evenly over the box (half-pixel convention); samples
    outside the image take the nearest edge value.
    """
    n, _, H, W = images.shape
    boxes = boxes.to(images.dtype)
    t = (torch.arange(size, dtype=images.dtype) + 0.5) / size
    # source pixel-index coordinates
    xs = boxes[:, 0:1] + t[None, :] * boxes[:, 2:3] - 0.5
    ys = boxes[:, 1:2] + t[None, :] * boxes[:, 3:4] - 0.5
    gx = (2 * xs + 1) / W - 1
    gy = (2 * ys + 1) / H - 1
    grid = torch.stack(torch.broadcast_tensors(gx[:, None, :], gy[:, :, None]), dim=-1)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)


def crop_roi(pixels: np.ndarray, box: BoundingBox, size: int = ROI_SIZE) -> np.ndarray:
    """Crop ``box`` out of an ``H x W`` image and resample to ``size x size``."""
    H, W = pixels.shape
    try:
        box = box.clip(W, H)
    except ValueError:
        raise ValueError(f"box {box.as_tuple()} has no area inside the {W}x{H} image") from None
    img = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float64))[None, None]
    b = torch.tensor([box.as_tuple()], dtype=torch.float64)
    return crop_rois(img, b, size)[0, 0].numpy()


@dataclass(frozen=True)
class Letterbox:
    """Aspect-preserving resize onto a zero-padded square canvas."""

    scale: float
    offset_x: float
    offset_y: float

    def box(self, b: BoundingBox) -> BoundingBox:
        return BoundingBox(b.x * self.scale + self.offset_x, b.y * self.scale + self.offset_y,
                           b.w * self.scale, b.h * self.scale)

    def inverse(self, b: BoundingBox) -> BoundingBox:
        return BoundingBox((b.x - self.offset_x) / self.scale, (b.y - self.offset_y) / self.scale,
                           b.w / self.scale, b.h / self.scale)


def letterbox(pixels: np.ndarray, size: int) -> tuple[np.ndarray, Letterbox]:
    H, W = pixels.shape
    s = size / max(H, W)
    h, w = max(1, round(H * s)), max(1, round(W * s))
    out = np.zeros((size, size), dtype=np.float32)
    oy, ox = (size - h) // 2, (size - w) // 2
    if (h, w) == (H, W):
        out[oy:oy + h, ox:ox + w] = pixels
    else:
        t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))[None, None]
        r = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=s < 1)
        out[oy:oy + h, ox:ox + w] = r[0, 0].clamp(0, 1).numpy()
    return out, Letterbox(s, float(ox), float(oy))


def letterbox_record(rec: ImageRecord, size: int) -> tuple[ImageRecord, Letterbox]:
    """Copy of ``rec`` resampled to ``size x size``, boxes mapped along."""
    pixels, lb = letterbox(rec.pixels, size)
    conv = lambda b: None if b is None else lb.box(b).clip(size, size)
    return replace(rec, manual_roi=conv(rec.manual_roi), hidden_roi=conv(rec.hidden_roi), _pixels=pixels), lb
