"""ROI classifier on 224x224 crops: probabilities, losses, candidate scoring, features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbone import RESNET18_BLOCKS, BackboneConfig, ResNet
from .data import ROI_SIZE, BoundingBox, crop_rois

EPS = 1e-7


@dataclass(frozen=True)
class ClassProbabilities:
    p_benign: float
    p_malignant: float

    def __getitem__(self, label: int) -> float:
        return (self.p_benign, self.p_malignant)[label]


@dataclass(frozen=True)
class CNetConfig:
    backbone: BackboneConfig = BackboneConfig(blocks=RESNET18_BLOCKS)
    roi_size: int = ROI_SIZE
    # "true_class": probability of the image's known label; "max": max over classes
    score_mode: str = "true_class"

    def header(self) -> dict:
        return {"arch": "cnet-resnet", "backbone": self.backbone.header(), "roi_size": self.roi_size}


class CNet(nn.Module):
    def __init__(self, cfg: CNetConfig = CNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = ResNet(cfg.backbone)
        self.fc = nn.Linear(self.feature_dim, 2)

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_channels[-1]

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)[-1]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_map(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits (N, 2)."""
        return self.fc(self.features(x))


def ce_loss(q: torch.Tensor, y: torch.Tensor, n: int | None = None) -> torch.Tensor:
    """Mean binary cross-entropy where ``q`` is the predicted malignant probability.

    ``q`` is clamped to ``[EPS, 1 - EPS]`` before taking logs.
    """
    q = torch.as_tensor(q, dtype=torch.float64) if not isinstance(q, torch.Tensor) else q
    y = torch.as_tensor(y, dtype=q.dtype)
    n = q.numel() if n is None else n
    if n < 1:
        raise ValueError("ce_loss needs at least one sample")
    q = q.clamp(EPS, 1 - EPS)
    return -(y * torch.log(q) + (1 - y) * torch.log(1 - q)).sum() / n


def ce_from_logits(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ce_loss(torch.softmax(logits, dim=1)[:, 1], y)


def cnet_loss(loss_fa, loss_pa, beta: float):
    """Classifier loss: fully annotated term plus ``beta`` times the partially annotated term."""
    return loss_fa + beta * loss_pa


def _roi_batch(rois, size: int) -> torch.Tensor:
    if isinstance(rois, torch.Tensor):
        t = rois.float()
    else:
        arr = np.asarray(rois, dtype=np.float32)
        t = torch.from_numpy(np.ascontiguousarray(arr))
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    if tuple(t.shape[-2:]) != (size, size) or t.shape[1] != 1:
        raise ValueError(f"expected {size}x{size} grayscale ROI(s), got shape {tuple(t.shape)}")
    return t


@torch.no_grad()
def predict_proba(model: CNet, rois) -> torch.Tensor:
    """(N, 2) softmax probabilities for a batch of ROIs."""
    x = _roi_batch(rois, model.cfg.roi_size)
    was_training = model.training
    model.eval()
    p = torch.softmax(model(x).double(), dim=1)
    model.train(was_training)
    return p


def classify(model: CNet, roi) -> ClassProbabilities:
    p = predict_proba(model, roi)[0]
    return ClassProbabilities(float(p[0]), float(p[1]))


def score_from_proba(proba: torch.Tensor, labels: torch.Tensor, mode: str = "true_class") -> torch.Tensor:
    if mode == "true_class":
        return proba.gather(1, labels.long().view(-1, 1))[:, 0]
    if mode == "max":
        return proba.max(dim=1).values
    raise ValueError(f"unknown score mode {mode!r}")


def score_candidate(model: CNet, roi, label: int) -> float:
    """Probability the classifier assigns to the image's known label (or the max class)."""
    return float(score_from_proba(predict_proba(model, roi), torch.tensor([label]), model.cfg.score_mode)[0])


@torch.no_grad()
def score_boxes(model: CNet, image: torch.Tensor, boxes: Sequence[BoundingBox], label: int,
                batch_size: int = 1) -> list[float]:
    """Score several boxes of one (H, W) or (1, H, W) image tensor.

    The default of one crop per forward pass keeps a box's score independent
    of the other boxes scored with it (batched float32 convolutions are not).
    """
    img = image.float().reshape(1, 1, *image.shape[-2:])
    b = torch.tensor([bx.as_tuple() for bx in boxes], dtype=torch.float32)
    out = []
    for i in range(0, len(boxes), batch_size):
        bb = b[i:i + batch_size]
        crops = crop_rois(img.expand(bb.shape[0], -1, -1, -1), bb, model.cfg.roi_size)
        p = predict_proba(model, crops)
        out.append(score_from_proba(p, torch.full((bb.shape[0],), label), model.cfg.score_mode))
    return torch.cat(out).tolist()


@torch.no_grad()
def extract_disc_features(model: CNet, rois) -> torch.Tensor:
    """Global-average-pooled last convolutional map, shape (N, feature_dim)."""
    x = _roi_batch(rois, model.cfg.roi_size)
    was_training = model.training
    model.eval()
    f = model.features(x)
    model.train(was_training)
    return f
