"""Localization-only anchor detector: anchors, matching, box coding, losses and the network.

The detector follows the RetinaNet layout (ResNet + FPN, P3..P7, 9 anchors per
cell) but drops the disease-classification branch. A one-channel
"lesion-ness" confidence head is kept for ranking candidates and NMS only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import nms

from .backbone import RESNET34_BLOCKS, BackboneConfig, ResNet
from .data import BoundingBox

ANCHOR_SCALES = (2 ** 0, 2 ** (1 / 3), 2 ** (2 / 3))
ANCHOR_RATIOS = (0.5, 1.0, 2.0)  # height / width
LEVEL_STRIDES = (8, 16, 32, 64, 128)
LEVEL_SIZES = (32, 64, 128, 256, 512)
BOX_VARIANCES = (0.1, 0.1, 0.2, 0.2)
POS_IOU = 0.5
NEG_IOU = 0.4
NMS_IOU = 0.5
PRE_NMS_TOP = 1000
MIN_BOX_SIZE = 1.0
# exp() guard on decoded log-sizes, as in torchvision's box coder
MAX_LOG_SCALE = math.log(1000.0 / 16)


class AnchorState(enum.IntEnum):
    IGNORED = -1
    NEGATIVE = 0
    POSITIVE = 1


# ---------------------------------------------------------------------------
# anchors


@dataclass(frozen=True)
class AnchorLevel:
    stride: int
    base_size: float
    rows: int
    cols: int

    @property
    def num_anchors(self) -> int:
        return self.rows * self.cols * len(ANCHOR_SCALES) * len(ANCHOR_RATIOS)

    def templates(self) -> np.ndarray:
        """(9, 2) widths/heights, scale-major then ratio."""
        out = []
        for s in ANCHOR_SCALES:
            for r in ANCHOR_RATIOS:
                size = self.base_size * s
                out.append((size / math.sqrt(r), size * math.sqrt(r)))
        return np.array(out)

    def boxes_xyxy(self) -> np.ndarray:
        """Anchors ordered (row, col, template) to match the head output layout."""
        cy = (np.arange(self.rows) + 0.5) * self.stride
        cx = (np.arange(self.cols) + 0.5) * self.stride
        cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
        wh = self.templates()
        ctr = np.stack([cxx, cyy], axis=-1).reshape(-1, 1, 2)
        half = wh[None] / 2
        return np.concatenate([ctr - half, ctr + half], axis=-1).reshape(-1, 4)


@dataclass
class AnchorGrid:
    image_size: tuple[int, int]  # (H, W)
    levels: list[AnchorLevel]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return sum(lv.num_anchors for lv in self.levels)

    def boxes(self, dtype=torch.float32) -> torch.Tensor:
        """All anchors as an (A, 4) xyxy tensor."""
        if dtype not in self._cache:
            arr = np.concatenate([lv.boxes_xyxy() for lv in self.levels])
            self._cache[dtype] = torch.as_tensor(arr, dtype=dtype)
        return self._cache[dtype]

    def bounding_boxes(self) -> list[BoundingBox]:
        return [BoundingBox.from_xyxy(*row) for row in self.boxes(torch.float64).tolist()]

    def header(self) -> dict:
        return {"image_size": list(self.image_size), "strides": [lv.stride for lv in self.levels],
                "base_sizes": [lv.base_size for lv in self.levels],
                "scales": list(ANCHOR_SCALES), "ratios": list(ANCHOR_RATIOS)}


def build_anchor_grid(image_size: int | tuple[int, int]) -> AnchorGrid:
    """Anchor grid for levels P3..P7; grid shape per level is ``ceil(side / stride)``."""
    H, W = (image_size, image_size) if isinstance(image_size, int) else image_size
    if min(H, W) < max(LEVEL_STRIDES):
        raise ValueError(f"image {H}x{W} is smaller than the largest stride {max(LEVEL_STRIDES)}")
    levels = [AnchorLevel(s, float(b), math.ceil(H / s), math.ceil(W / s))
              for s, b in zip(LEVEL_STRIDES, LEVEL_SIZES)]
    return AnchorGrid((H, W), levels)


# ---------------------------------------------------------------------------
# IoU and matching


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between (N, 4) and (M, 4) xyxy tensors."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass
class AnchorAssignment:
    states: torch.Tensor  # (A,) int8 AnchorState values
    ious: torch.Tensor  # (A,)
    gt: BoundingBox

    @property
    def positive(self) -> torch.Tensor:
        return self.states == AnchorState.POSITIVE

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_states(ious: torch.Tensor) -> torch.Tensor:
    """Anchor states from IoU with the ground truth, over the last dimension.

    POSITIVE at IoU >= 0.5, NEGATIVE below 0.4, IGNORED in between; the
    highest-IoU anchor (first on ties) is always POSITIVE.
    """
    states = torch.full(ious.shape, int(AnchorState.IGNORED), dtype=torch.int8)
    states[ious < NEG_IOU] = AnchorState.NEGATIVE
    states[ious >= POS_IOU] = AnchorState.POSITIVE
    best = ious.argmax(dim=-1, keepdim=True)
    states.scatter_(-1, best, int(AnchorState.POSITIVE))
    return states


def match_anchors(grid: AnchorGrid, gt: BoundingBox) -> AnchorAssignment:
    anchors = grid.boxes(torch.float64)
    ious = box_iou(anchors, torch.tensor([gt.as_xyxy()], dtype=torch.float64))[:, 0]
    return AnchorAssignment(assign_states(ious), ious, gt)


# ---------------------------------------------------------------------------
# box coding


@dataclass(frozen=True)
class BoxDelta:
    t_x: float
    t_y: float
    t_w: float
    t_h: float

    def as_tuple(self):
        return (self.t_x, self.t_y, self.t_w, self.t_h)


def encode(boxes: torch.Tensor, anchors: torch.Tensor, variances: Sequence[float] = (1, 1, 1, 1)) -> torch.Tensor:
    """Centre-offset / log-size deltas of xyxy ``boxes`` relative to xyxy ``anchors``."""
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    bw = boxes[..., 2] - boxes[..., 0]
    bh = boxes[..., 3] - boxes[..., 1]
    bx = boxes[..., 0] + 0.5 * bw
    by = boxes[..., 1] + 0.5 * bh
    vx, vy, vw, vh = variances
    return torch.stack([(bx - ax) / aw / vx, (by - ay) / ah / vy,
                        torch.log(bw / aw) / vw, torch.log(bh / ah) / vh], dim=-1)


def decode(deltas: torch.Tensor, anchors: torch.Tensor, variances: Sequence[float] = (1, 1, 1, 1)) -> torch.Tensor:
    """Inverse of :func:`encode`; returns xyxy boxes."""
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    vx, vy, vw, vh = variances
    cx = ax + deltas[..., 0] * vx * aw
    cy = ay + deltas[..., 1] * vy * ah
    w = aw * torch.exp((deltas[..., 2] * vw).clamp(max=MAX_LOG_SCALE))
    h = ah * torch.exp((deltas[..., 3] * vh).clamp(max=MAX_LOG_SCALE))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def encode_box(b: BoundingBox, anchor: BoundingBox, variances: Sequence[float] = (1, 1, 1, 1)) -> BoxDelta:
    t = encode(torch.tensor(b.as_xyxy(), dtype=torch.float64),
               torch.tensor(anchor.as_xyxy(), dtype=torch.float64), variances)
    return BoxDelta(*t.tolist())


def decode_box(d: BoxDelta, anchor: BoundingBox, variances: Sequence[float] = (1, 1, 1, 1)) -> BoundingBox:
    if not all(math.isfinite(v) for v in d.as_tuple()):
        raise ValueError(f"non-finite delta {d}")
    b = decode(torch.tensor(d.as_tuple(), dtype=torch.float64),
               torch.tensor(anchor.as_xyxy(), dtype=torch.float64), variances)
    return BoundingBox.from_xyxy(*b.tolist())


# ---------------------------------------------------------------------------
# losses


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise. Works on floats and tensors."""
    if isinstance(x, torch.Tensor):
        ax = x.abs()
        return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


def loc_loss(pred_deltas: torch.Tensor, target_deltas: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 over (x, y, w, h) summed per positive anchor, averaged over positives."""
    pos = states == AnchorState.POSITIVE
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("loc_loss needs at least one positive anchor")
    return smooth_l1(pred_deltas[pos] - target_deltas[pos]).sum() / n_pos


def dnet_loss(loss_fa, loss_pa, alpha: float):
    """Detector loss: fully annotated term plus ``alpha`` times the partially annotated term."""
    return loss_fa + alpha * loss_pa


def focal_loss(logits: torch.Tensor, states: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Sigmoid focal loss on the confidence head, ignoring IGNORED anchors, per positive anchor."""
    valid = states != AnchorState.IGNORED
    target = (states == AnchorState.POSITIVE).to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    a_t = alpha * target + (1 - alpha) * (1 - target)
    loss = a_t * (1 - p_t) ** gamma * ce
    n_pos = (states == AnchorState.POSITIVE).sum(dim=-1).clamp(min=1)
    return (loss * valid).sum(dim=-1) / n_pos


def detection_losses(deltas: torch.Tensor, conf_logits: torch.Tensor, anchors: torch.Tensor,
                     gt_xyxy: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-image localization and confidence losses.

    deltas: (N, A, 4); conf_logits: (N, A); anchors: (A, 4); gt_xyxy: (N, 4).
    """
    anchors = anchors.to(deltas.dtype)
    gt_xyxy = gt_xyxy.to(deltas.dtype)
    states = assign_states(box_iou(gt_xyxy, anchors))  # (N, A)
    targets = encode(gt_xyxy[:, None, :].expand(-1, anchors.shape[0], -1), anchors[None], BOX_VARIANCES)
    loc = torch.stack([loc_loss(deltas[i], targets[i], states[i]) for i in range(deltas.shape[0])])
    return loc, focal_loss(conf_logits, states)


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class DNetConfig:
    backbone: BackboneConfig = BackboneConfig(blocks=RESNET34_BLOCKS)
    fpn_channels: int = 256
    head_convs: int = 4
    input_size: int = 256

    def header(self) -> dict:
        return {"arch": "dnet-retina-loc", "backbone": self.backbone.header(),
                "fpn_channels": self.fpn_channels, "head_convs": self.head_convs,
                "input_size": self.input_size}


class FPN(nn.Module):
    """P3..P5 from lateral + top-down paths, P6/P7 by strided convs on C5."""

    def __init__(self, in_channels: Sequence[int], ch: int):
        super().__init__()
        c3, c4, c5 = in_channels
        self.lat = nn.ModuleList([nn.Conv2d(c, ch, 1) for c in (c3, c4, c5)])
        self.smooth = nn.ModuleList([nn.Conv2d(ch, ch, 3, padding=1) for _ in range(3)])
        self.p6 = nn.Conv2d(c5, ch, 3, 2, 1)
        self.p7 = nn.Conv2d(ch, ch, 3, 2, 1)

    def forward(self, c3, c4, c5):
        l5 = self.lat[2](c5)
        l4 = self.lat[1](c4) + F.interpolate(l5, size=c4.shape[-2:], mode="nearest")
        l3 = self.lat[0](c3) + F.interpolate(l4, size=c3.shape[-2:], mode="nearest")
        p3, p4, p5 = (s(t) for s, t in zip(self.smooth, (l3, l4, l5)))
        p6 = self.p6(c5)
        p7 = self.p7(F.relu(p6))
        return [p3, p4, p5, p6, p7]


class Head(nn.Module):
    def __init__(self, ch: int, n_convs: int, n_out: int, bias_init: float = 0.0):
        super().__init__()
        layers = []
        for _ in range(n_convs):
            layers += [nn.Conv2d(ch, ch, 3, padding=1), nn.ReLU(inplace=True)]
        self.tower = nn.Sequential(*layers)
        self.out = nn.Conv2d(ch, n_out, 3, padding=1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.out.bias, bias_init)

    def forward(self, x):
        return self.out(self.tower(x))


@dataclass
class DetectorOutput:
    deltas: torch.Tensor  # (N, A, 4)
    conf_logits: torch.Tensor  # (N, A)
    top_feature: torch.Tensor  # (N, C, h, w), last pyramid level


class DNet(nn.Module):
    n_templates = len(ANCHOR_SCALES) * len(ANCHOR_RATIOS)

    def __init__(self, cfg: DNetConfig = DNetConfig(), conf_prior: float = 0.01):
        super().__init__()
        self.cfg = cfg
        self.backbone = ResNet(cfg.backbone)
        self.fpn = FPN(self.backbone.out_channels[1:], cfg.fpn_channels)
        self.reg_head = Head(cfg.fpn_channels, cfg.head_convs, self.n_templates * 4)
        prior_bias = -math.log((1 - conf_prior) / conf_prior) if conf_prior > 0 else 0.0
        self.conf_head = Head(cfg.fpn_channels, cfg.head_convs, self.n_templates, prior_bias)
        self.grid = build_anchor_grid(cfg.input_size)

    @property
    def feature_dim(self) -> int:
        return self.cfg.fpn_channels

    def pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        _, c3, c4, c5 = self.backbone(x)
        return self.fpn(c3, c4, c5)

    def forward(self, x: torch.Tensor) -> DetectorOutput:
        feats = self.pyramid(x)
        n = x.shape[0]
        deltas, logits = [], []
        for f in feats:
            # (N, 9*4, H, W) -> (N, H*W*9, 4): row, col, template order
            d = self.reg_head(f).permute(0, 2, 3, 1).reshape(n, -1, 4)
            c = self.conf_head(f).permute(0, 2, 3, 1).reshape(n, -1)
            deltas.append(d)
            logits.append(c)
        return DetectorOutput(torch.cat(deltas, 1), torch.cat(logits, 1), feats[-1])


def pool_features(feature_map: torch.Tensor) -> torch.Tensor:
    return feature_map.mean(dim=(2, 3))


# ---------------------------------------------------------------------------
# inference


@dataclass
class CandidateSet:
    boxes: list[BoundingBox]
    scores: list[float]

    def __len__(self):
        return len(self.boxes)


def as_batch(images) -> torch.Tensor:
    """Accept (H, W) arrays, lists of them, or (N, 1, H, W) tensors."""
    if isinstance(images, torch.Tensor):
        t = images.float()
    elif isinstance(images, np.ndarray) and images.ndim == 2:
        t = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))[None]
    else:
        t = torch.stack([torch.as_tensor(np.asarray(im, dtype=np.float32)) for im in images])
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    return t


def select_candidates(deltas: torch.Tensor, conf_logits: torch.Tensor, anchors: torch.Tensor,
                      k: int, image_hw: tuple[int, int]) -> CandidateSet:
    """Decode one image's regressions, clip, NMS at 0.5 and keep the top ``k``."""
    H, W = image_hw
    scores = torch.sigmoid(conf_logits)
    top = torch.argsort(scores, descending=True, stable=True)[:PRE_NMS_TOP]
    boxes = decode(deltas[top], anchors[top], BOX_VARIANCES)
    boxes = torch.stack([boxes[:, 0].clamp(0, W), boxes[:, 1].clamp(0, H),
                         boxes[:, 2].clamp(0, W), boxes[:, 3].clamp(0, H)], dim=1)
    s = scores[top]
    ok = ((boxes[:, 2] - boxes[:, 0]) >= MIN_BOX_SIZE) & ((boxes[:, 3] - boxes[:, 1]) >= MIN_BOX_SIZE)
    if not ok.any():
        # every regression collapsed: fall back to the best anchor itself
        a = anchors[top[:1]].clone()
        a[:, 0::2] = a[:, 0::2].clamp(0, W)
        a[:, 1::2] = a[:, 1::2].clamp(0, H)
        boxes, s, ok = a, s[:1], torch.ones(1, dtype=torch.bool)
    boxes, s = boxes[ok], s[ok]
    keep = nms(boxes.double(), s.double(), NMS_IOU)[:k]
    return CandidateSet([BoundingBox.from_xyxy(*b) for b in boxes[keep].double().tolist()],
                        [float(v) for v in s[keep]])


@torch.no_grad()
def predict_candidates(model: DNet, images, k: int) -> list[CandidateSet]:
    """Top-``k`` lesion candidates per image, sorted by confidence."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = as_batch(images)
    was_training = model.training
    model.eval()
    out = model(x)
    model.train(was_training)
    anchors = model.grid.boxes(out.deltas.dtype)
    hw = tuple(x.shape[-2:])
    return [select_candidates(out.deltas[i], out.conf_logits[i], anchors, k, hw) for i in range(x.shape[0])]


@torch.no_grad()
def extract_location_features(model: DNet, images) -> torch.Tensor:
    """Global-average-pooled top pyramid level, shape (N, fpn_channels)."""
    x = as_batch(images)
    was_training = model.training
    model.eval()
    feat = pool_features(model.pyramid(x)[-1])
    model.train(was_training)
    return feat
