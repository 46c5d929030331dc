"""Tensor datasets and epoch loops for the detector and the ROI classifier."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch.optim.swa_utils import update_bn

from .cnet import CNet, ce_from_logits, cnet_loss
from .data import BoundingBox, ImageRecord, crop_rois
from .dnet import DNet, detection_losses, dnet_loss


class DivergenceError(RuntimeError):
    pass


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


@dataclass
class TensorSet:
    """Images of a record list stacked into one tensor, plus labels and fa/pa flags."""

    ids: list[str]
    images: torch.Tensor  # (N, 1, H, W) float32
    labels: torch.Tensor  # (N,) long
    is_fa: torch.Tensor  # (N,) bool

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord]) -> "TensorSet":
        if not records:
            raise ValueError("empty record list")
        images = torch.stack([torch.from_numpy(np.ascontiguousarray(r.pixels, dtype=np.float32))
                              for r in records])[:, None]
        return cls([r.image_id for r in records], images,
                   torch.tensor([r.label for r in records], dtype=torch.long),
                   torch.tensor([r.manual_roi is not None for r in records], dtype=torch.bool))

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, mask: torch.Tensor) -> "TensorSet":
        idx = torch.nonzero(mask)[:, 0]
        return TensorSet([self.ids[i] for i in idx.tolist()], self.images[idx], self.labels[idx], self.is_fa[idx])

    def boxes(self, boxes: Mapping[str, BoundingBox]) -> torch.Tensor:
        """(N, 4) xywh tensor of the given labels, in image order."""
        return torch.tensor([boxes[i].as_tuple() for i in self.ids], dtype=torch.float32)


def xywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([b[:, :2], b[:, :2] + b[:, 2:]], dim=1)


def batches(n: int, batch_size: int, gen: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=gen)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def hflip(images: torch.Tensor, boxes_xywh: torch.Tensor, flip: torch.Tensor):
    """Mirror the flagged images and their boxes left-right."""
    if not flip.any():
        return images, boxes_xywh
    W = images.shape[-1]
    images = torch.where(flip[:, None, None, None], images.flip(-1), images)
    b = boxes_xywh.clone()
    b[flip, 0] = W - boxes_xywh[flip, 0] - boxes_xywh[flip, 2]
    return images, b


def group_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if mask.any():
        return values[mask].mean()
    return values.sum() * 0.0


def recalibrate_bn(model: torch.nn.Module, inputs: Iterable[torch.Tensor]):
    """Recompute BatchNorm running statistics as a plain average under the final weights.

    The exponential running averages lag behind quickly moving weights, which can
    leave eval-mode predictions far from train-mode ones after short schedules.
    """
    update_bn(inputs, model)


def _check(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss ({float(loss)}) in {where}")


def detector_step_loss(model: DNet, images: torch.Tensor, boxes_xywh: torch.Tensor, is_fa: torch.Tensor,
                       alpha: float) -> tuple[torch.Tensor, dict, object]:
    """Detector loss on one batch; also returns the raw forward output."""
    out = model(images)
    loc, conf = detection_losses(out.deltas, out.conf_logits, model.grid.boxes(out.deltas.dtype),
                                 xywh_to_xyxy(boxes_xywh))
    loss = dnet_loss(group_mean(loc, is_fa), group_mean(loc, ~is_fa), alpha)
    loss = loss + dnet_loss(group_mean(conf, is_fa), group_mean(conf, ~is_fa), alpha)
    return loss, {"loc": float(loc.detach().mean()), "conf": float(conf.detach().mean())}, out


def train_detector(model: DNet, opt: torch.optim.Optimizer, data: TensorSet, boxes: Mapping[str, BoundingBox],
                   alpha: float, epochs: int, batch_size: int, gen: torch.Generator,
                   log: Callable[[dict], None] | None = None, tag: str = "dnet"):
    model.train()
    all_boxes = data.boxes(boxes)
    for epoch in range(epochs):
        for step, idx in enumerate(batches(len(data), batch_size, gen)):
            flip = torch.rand(len(idx), generator=gen) < 0.5
            x, b = hflip(data.images[idx], all_boxes[idx], flip)
            loss, parts, _ = detector_step_loss(model, x, b, data.is_fa[idx], alpha)
            _check(loss, f"{tag} epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if log is not None:
                log({"event": "loss", "net": tag, "epoch": epoch, "step": step, "loss": float(loss.detach()), **parts})
    if epochs > 0:
        recalibrate_bn(model, (data.images[i:i + batch_size] for i in range(0, len(data), batch_size)))


def classifier_step_loss(model: CNet, images: torch.Tensor, boxes_xywh: torch.Tensor, labels: torch.Tensor,
                         is_fa: torch.Tensor, beta: float) -> torch.Tensor:
    crops = crop_rois(images, boxes_xywh, model.cfg.roi_size)
    logits = model(crops)
    zero = logits.sum() * 0.0
    l_fa = ce_from_logits(logits[is_fa], labels[is_fa]) if is_fa.any() else zero
    l_pa = ce_from_logits(logits[~is_fa], labels[~is_fa]) if (~is_fa).any() else zero
    return cnet_loss(l_fa, l_pa, beta)


def train_classifier(model: CNet, opt: torch.optim.Optimizer, data: TensorSet, boxes: Mapping[str, BoundingBox],
                     beta: float, epochs: int, batch_size: int, gen: torch.Generator,
                     log: Callable[[dict], None] | None = None, tag: str = "cnet"):
    model.train()
    all_boxes = data.boxes(boxes)
    for epoch in range(epochs):
        for step, idx in enumerate(batches(len(data), batch_size, gen)):
            flip = torch.rand(len(idx), generator=gen) < 0.5
            x, b = hflip(data.images[idx], all_boxes[idx], flip)
            loss = classifier_step_loss(model, x, b, data.labels[idx], data.is_fa[idx], beta)
            _check(loss, f"{tag} epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if log is not None:
                log({"event": "loss", "net": tag, "epoch": epoch, "step": step, "loss": float(loss.detach())})
    if epochs > 0:
        size = model.cfg.roi_size
        recalibrate_bn(model, (crop_rois(data.images[i:i + batch_size], all_boxes[i:i + batch_size], size)
                               for i in range(0, len(data), batch_size)))
