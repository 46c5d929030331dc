"""Synthetic ultrasound-like lesion phantom with known tight boxes.

Each patient gets one class label and one lesion prototype; each of its images
is a perturbed view of that prototype on fresh speckle. A latent per-patient
severity controls boundary irregularity, interior heterogeneity and the
posterior acoustic feature below the lesion: benign patients draw low
severities (smooth, thin rim, bright posterior enhancement), malignant
patients high ones (lobulated, thick echogenic halo, dark posterior shadow).
Interior heterogeneity and calcifications are wired in but off by default
(``HETERO_GAIN``, ``CALC_PER_SEVERITY``), so the class cannot be read from any
patch of lesion interior. The manifest
stores a jittered "coarse" box as the manual ROI; ``ground_truth.json`` keeps
the tight box for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import BoundingBox, ImageRecord, write_gray_png, write_manifest

SPECKLE_SIGMA = 0.15
AXIS_RANGE = (0.12, 0.30)  # full lesion axis as a fraction of the image side
MAX_PLACEMENT_TRIES = 50
# per-class range of the latent "severity" driving boundary irregularity,
# interior heterogeneity and the posterior feature; the gap keeps classes separable
SEVERITY_RANGE = {0: (0.0, 0.3), 1: (0.45, 1.0)}
SEVERITY_PIVOT = 0.375
POSTERIOR_SLOPE = 0.6
POSTERIOR_LENGTH = 0.25  # strip height as a fraction of the lesion height
HETERO_GAIN = 0.0
CALC_PER_SEVERITY = 0  # bright echogenic foci inside the lesion
CALC_INTENSITY = 0.85
# echogenic band along the inside of the lesion margin: a thin capsule for
# severity 0 growing into a thick halo for severity 1
RIM_WIDTH = (1.0, 5.0)
RIM_INTENSITY = 0.7
# surrounding-tissue clutter: small cyst-like hypoechoic blobs and isolated bright
# foci, class-independent, scattered in a ring around the lesion
CLUTTER_CYSTS = (1, 4)
CLUTTER_FOCI = (2, 8)
CLUTTER_CYST_AXIS = (0.03, 0.07)
CLUTTER_RING = 0.6  # ring extent beyond the tight box, as a fraction of its size


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    n_patients: int = 60
    images_per_patient: int = 10
    image_size: int = 256
    coarse_jitter: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 5:
            raise ValueError("n_patients must be >= 5")
        if self.images_per_patient < 1:
            raise ValueError("images_per_patient must be >= 1")
        if not 0.0 <= self.coarse_jitter <= 0.5:
            raise ValueError("coarse_jitter must lie in [0, 0.5]")
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")


@dataclass
class PhantomImage:
    pixels: np.ndarray
    mask: np.ndarray
    tight: BoundingBox
    coarse: BoundingBox
    posterior: BoundingBox | None  # strip below the lesion carrying the posterior cue


def patient_labels(n_patients: int, seed: int) -> np.ndarray:
    """Balanced labels (counts differ by at most one) in a seeded order."""
    labels = np.arange(n_patients) % 2
    np.random.default_rng([seed, 0xC1A55]).shuffle(labels)
    return labels


def _prototype(rng: np.random.Generator, label: int, size: int) -> dict:
    lo, hi = AXIS_RANGE
    sev_lo, sev_hi = SEVERITY_RANGE[label]
    severity = rng.uniform(sev_lo, sev_hi)
    n_harm = 5
    return {
        "axes": rng.uniform(lo, hi, size=2) * size,  # full axis lengths (w, h)
        "angle": rng.uniform(-0.4, 0.4),
        "interior": rng.uniform(0.12, 0.22),
        "center": rng.uniform(0.3, 0.7, size=2) * size,
        "severity": severity,
        "harm_amp": severity * rng.uniform(0.08, 0.14, size=n_harm) / np.arange(1, n_harm + 1) ** 0.3,
        "harm_phase": rng.uniform(0, 2 * np.pi, size=n_harm),
        "hetero": HETERO_GAIN * severity,
        "n_calc": int(round(CALC_PER_SEVERITY * severity)),
        # multiplicative gain of the strip below the lesion: >1 enhancement, <1 shadow
        "posterior": 1.0 + POSTERIOR_SLOPE * (SEVERITY_PIVOT - severity),
    }


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy = np.linspace(0.0, 1.0, size)[:, None]
    base = 0.5 + 0.12 * np.sin(np.pi * yy * rng.uniform(1.0, 3.0) + rng.uniform(0, np.pi))
    tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 24)
    tex /= np.abs(tex).max() + 1e-12
    return np.clip(base + 0.1 * tex, 0.2, 0.9)


def _lesion_mask(shape, center, axes, angle, proto, rng) -> np.ndarray:
    size = shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx + 0.5 - center[0], yy + 0.5 - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / (axes[0] / 2)
    v = (-sa * dx + ca * dy) / (axes[1] / 2)
    r = np.hypot(u, v)
    if proto["severity"] > 0:
        theta = np.arctan2(v, u)
        k = np.arange(2, 2 + len(proto["harm_amp"]))
        jitter_phase = proto["harm_phase"] + rng.normal(0, 0.2, size=len(k))
        bound = 1.0 + np.tensordot(proto["harm_amp"],
                                   np.cos(k[:, None, None] * theta[None] + jitter_phase[:, None, None]),
                                   axes=1)
        bound = bound / (1.0 + 0.5 * proto["harm_amp"].sum())
        return r <= bound
    return r <= 1.0


def _tight_box(mask: np.ndarray) -> BoundingBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(float(cols[0]), float(rows[0]),
                       float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1))


def jitter_box(tight: BoundingBox, jitter: float, rng: np.random.Generator, size: int) -> BoundingBox:
    """Coarse annotation: independent width/height scaling in ``[1-j, 1+j]`` and a
    centre shift of at most ``j/2`` of the box size, rounded to whole pixels.

    With ``j <= 0.25`` the coarse box keeps IoU above 0.5 with the tight box
    (before rounding and clipping).
    """
    if jitter == 0:
        return tight
    sw, sh = rng.uniform(1 - jitter, 1 + jitter, size=2)
    ox, oy = rng.uniform(-jitter / 2, jitter / 2, size=2)
    cx = tight.x + tight.w / 2 + ox * tight.w
    cy = tight.y + tight.h / 2 + oy * tight.h
    w, h = tight.w * sw, tight.h * sh
    x1, y1 = np.round(cx - w / 2), np.round(cy - h / 2)
    x2, y2 = np.round(cx + w / 2), np.round(cy + h / 2)
    x2, y2 = max(x2, x1 + 1), max(y2, y1 + 1)
    return BoundingBox.from_xyxy(x1, y1, x2, y2).clip(size, size)


def _ring_point(tight: BoundingBox, size: int, margin: float, rng: np.random.Generator):
    """Point in the ring around ``tight`` at least ``margin`` pixels outside it, or None."""
    ex, ey = CLUTTER_RING * tight.w, CLUTTER_RING * tight.h
    for _ in range(MAX_PLACEMENT_TRIES):
        x = rng.uniform(max(0.0, tight.x - ex), min(size, tight.x2 + ex))
        y = rng.uniform(max(0.0, tight.y - ey), min(size, tight.y2 + ey))
        if tight.x - margin <= x <= tight.x2 + margin and tight.y - margin <= y <= tight.y2 + margin:
            continue
        return x, y
    return None


def _clutter(pixels: np.ndarray, tight: BoundingBox, rng: np.random.Generator) -> np.ndarray:
    size = pixels.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for _ in range(rng.integers(CLUTTER_CYSTS[0], CLUTTER_CYSTS[1] + 1)):
        a, b = rng.uniform(*CLUTTER_CYST_AXIS, size=2) * size / 2
        pt = _ring_point(tight, size, max(a, b) + 2, rng)
        if pt is None:
            continue
        ang = rng.uniform(0, np.pi)
        dx, dy = xx - pt[0], yy - pt[1]
        r = np.hypot((np.cos(ang) * dx + np.sin(ang) * dy) / a, (-np.sin(ang) * dx + np.cos(ang) * dy) / b)
        soft = ndimage.gaussian_filter((r <= 1).astype(np.float64), sigma=1.0)
        pixels = pixels * (1 - soft) + rng.uniform(0.12, 0.25) * soft
    dots = np.zeros_like(pixels)
    for _ in range(rng.integers(CLUTTER_FOCI[0], CLUTTER_FOCI[1] + 1)):
        pt = _ring_point(tight, size, 2.0, rng)
        if pt is not None:
            dots[min(int(pt[1]), size - 1), min(int(pt[0]), size - 1)] = 1.0
    dots = np.clip(ndimage.gaussian_filter(dots, sigma=1.0) * (2 * np.pi), 0.0, 1.0)
    return pixels * (1 - dots) + CALC_INTENSITY * dots


def render_image(spec: PhantomSpec, label: int, proto: dict, rng: np.random.Generator) -> PhantomImage:
    size = spec.image_size
    pixels = _background(rng, size)

    for _ in range(MAX_PLACEMENT_TRIES):
        axes = proto["axes"] * rng.uniform(0.9, 1.1, size=2)
        center = proto["center"] + rng.normal(0, 0.04 * size, size=2)
        angle = proto["angle"] + rng.normal(0, 0.05)
        mask = _lesion_mask((size, size), center, axes, angle, proto, rng)
        if not mask.any():
            continue
        if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
            continue
        break
    else:
        raise PlacementError("lesion does not fit inside the image")
    tight = _tight_box(mask)

    inner = np.full((size, size), proto["interior"])
    if proto["hetero"] > 0:
        blob = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=2.0)
        blob /= blob.std() + 1e-12
        inner = inner * (1.0 + proto["hetero"] * blob)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.5 - proto["severity"])
    pixels = pixels * (1 - soft) + inner * soft
    if RIM_INTENSITY > 0:
        depth = ndimage.distance_transform_edt(mask)
        width = RIM_WIDTH[0] + (RIM_WIDTH[1] - RIM_WIDTH[0]) * proto["severity"]
        band = np.clip(1.0 - (depth - 0.5) / width, 0.0, 1.0) * mask
        pixels = pixels * (1 - band) + RIM_INTENSITY * band
    if proto["n_calc"]:
        core = np.argwhere(ndimage.binary_erosion(mask, iterations=3))
        if len(core):
            dots = np.zeros((size, size))
            pick = core[rng.choice(len(core), size=min(proto["n_calc"], len(core)), replace=False)]
            dots[pick[:, 0], pick[:, 1]] = 1.0
            dots = ndimage.gaussian_filter(dots, sigma=1.0) * (2 * np.pi)
            dots = np.clip(dots, 0.0, 1.0)
            pixels = pixels * (1 - dots) + CALC_INTENSITY * dots

    posterior = None
    y0 = int(tight.y2)
    y1 = min(size, y0 + max(1, int(round(POSTERIOR_LENGTH * tight.h))))
    if y1 > y0:
        posterior = BoundingBox(tight.x, float(y0), tight.w, float(y1 - y0))
        col = np.zeros(size)
        col[int(tight.x):int(tight.x2)] = 1.0
        col = ndimage.gaussian_filter1d(col, sigma=2.0)
        ramp = np.zeros(size)
        ramp[y0:y1] = np.linspace(1.0, 0.2, y1 - y0)
        pixels = pixels * (1.0 + (proto["posterior"] - 1.0) * np.outer(ramp, col))

    pixels = _clutter(pixels, tight, rng)
    pixels = pixels * (1.0 + SPECKLE_SIGMA * rng.standard_normal((size, size)))
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    coarse = jitter_box(tight, spec.coarse_jitter, rng, size)
    return PhantomImage(pixels, mask, tight, coarse, posterior)


def iter_phantom(spec: PhantomSpec):
    """Yield ``(image_id, patient_id, label, PhantomImage)`` in a fixed order."""
    labels = patient_labels(spec.n_patients, spec.seed)
    for pi in range(spec.n_patients):
        label = int(labels[pi])
        proto = _prototype(np.random.default_rng([spec.seed, pi, 0xBEEF]), label, spec.image_size)
        pid = f"P{pi:03d}"
        for ii in range(spec.images_per_patient):
            rng = np.random.default_rng([spec.seed, pi, ii])
            yield f"{pid}_{ii:02d}", pid, label, render_image(spec, label, proto, rng)


def generate(spec: PhantomSpec, out_dir: str | Path) -> Path:
    """Write PNGs, ``manifest.csv`` and ``ground_truth.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records, truth = [], {}
    for image_id, pid, label, img in iter_phantom(spec):
        rel = Path("images") / f"{image_id}.png"
        write_gray_png(out_dir / rel, img.pixels)
        records.append(ImageRecord(image_id, pid, label, img.coarse, str(out_dir / rel)))
        truth[image_id] = img.tight.to_list()
    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest, root=out_dir)
    with open(out_dir / "ground_truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
    with open(out_dir / "phantom_spec.json", "w", encoding="utf-8") as fh:
        json.dump(spec.__dict__, fh, indent=1, sort_keys=True)
    return manifest


def load_ground_truth(path: str | Path) -> dict[str, BoundingBox]:
    with open(path, encoding="utf-8") as fh:
        return {k: BoundingBox(*v) for k, v in json.load(fh).items()}
