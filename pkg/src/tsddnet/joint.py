"""Stage 2: cascaded detector -> crop -> classifier -> fusion head, with self-distillation.

During joint training two auxiliary classifiers read the last feature maps of
the detector and of the classifier. They only contribute loss terms and are
not on the inference path.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .cnet import CNet, CNetConfig, ce_from_logits, ClassProbabilities
from .data import BoundingBox, ImageRecord, crop_rois
from .dnet import DNet, DNetConfig, as_batch, detection_losses, dnet_loss, pool_features, select_candidates
from .labels import LabelStore
from .train import TensorSet, _check, batches, group_mean, hflip, recalibrate_bn, xywh_to_xyxy

log = logging.getLogger(__name__)

FUSION_HIDDEN = 256
MIN_CASCADE_BOX = 4.0  # predicted boxes thinner than this fall back to the stored label


class FusionHead(nn.Module):
    """Two affine layers with a ReLU between; softmax is applied by the caller."""

    def __init__(self, loc_dim: int, disc_dim: int, hidden: int = FUSION_HIDDEN):
        super().__init__()
        self.loc_dim, self.disc_dim = loc_dim, disc_dim
        self.fc1 = nn.Linear(loc_dim + disc_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, loc_feat: torch.Tensor, disc_feat: torch.Tensor) -> torch.Tensor:
        # concatenation order: location features first, then discriminative features
        return self.fc2(F.relu(self.fc1(torch.cat([loc_feat, disc_feat], dim=1))))


class AuxiliaryClassifier(nn.Module):
    """Global average pooling + one affine layer on a host's last feature map."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc = nn.Linear(channels, 2)

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        return self.fc(pool_features(feature_map))


@dataclass
class CascadeOutput:
    boxes: list[BoundingBox]
    fused: torch.Tensor  # (N, 2) probabilities
    aux_det: torch.Tensor | None
    aux_cls: torch.Tensor | None
    fallbacks: int = 0


class TSDDNet(nn.Module):
    def __init__(self, detector: DNet, classifier: CNet, self_distillation: bool = True):
        super().__init__()
        self.detector = detector
        self.classifier = classifier
        self.fusion = FusionHead(detector.feature_dim, classifier.feature_dim)
        self.aux_det = AuxiliaryClassifier(detector.feature_dim) if self_distillation else None
        self.aux_cls = AuxiliaryClassifier(classifier.feature_dim) if self_distillation else None

    def drop_aux(self):
        self.aux_det = None
        self.aux_cls = None

    def top1_boxes(self, deltas: torch.Tensor, conf: torch.Tensor, hw, fallback: Sequence[BoundingBox] | None):
        anchors = self.detector.grid.boxes(deltas.dtype)
        boxes, n_fb = [], 0
        for i in range(deltas.shape[0]):
            b = select_candidates(deltas[i].detach(), conf[i].detach(), anchors, 1, hw).boxes[0]
            if (b.w < MIN_CASCADE_BOX or b.h < MIN_CASCADE_BOX) and fallback is not None:
                b, n_fb = fallback[i], n_fb + 1
            boxes.append(b)
        return boxes, n_fb

    def forward(self, x: torch.Tensor, fallback: Sequence[BoundingBox] | None = None):
        """Full cascade. Returns (detector output, boxes, fused logits, aux logits, aux logits, fallbacks).

        Box selection is detached: classification losses reach the detector only
        through its location features and auxiliary head.
        """
        det_out = self.detector(x)
        boxes, n_fb = self.top1_boxes(det_out.deltas, det_out.conf_logits, tuple(x.shape[-2:]), fallback)
        t = torch.tensor([b.as_tuple() for b in boxes], dtype=x.dtype)
        crops = crop_rois(x, t, self.classifier.cfg.roi_size)
        cmap = self.classifier.feature_map(crops)
        loc_feat = pool_features(det_out.top_feature)
        disc_feat = pool_features(cmap)
        fused = self.fusion(loc_feat, disc_feat)
        a1 = self.aux_det(det_out.top_feature) if self.aux_det is not None else None
        a2 = self.aux_cls(cmap) if self.aux_cls is not None else None
        return det_out, boxes, fused, a1, a2, n_fb


@torch.no_grad()
def cascaded_forward(model: TSDDNet, images, fallback: Sequence[BoundingBox] | None = None) -> CascadeOutput:
    x = as_batch(images)
    was_training = model.training
    model.eval()
    _, boxes, fused, a1, a2, n_fb = model(x, fallback)
    model.train(was_training)
    if n_fb:
        log.warning("cascade: %d degenerate detector boxes replaced by stored labels", n_fb)
    sm = lambda t: None if t is None else torch.softmax(t.double(), dim=1)
    return CascadeOutput(boxes, sm(fused), sm(a1), sm(a2), n_fb)


def infer(model: TSDDNet, images, batch_size: int = 16) -> list[tuple[BoundingBox, ClassProbabilities]]:
    """Detector top-1 box and fusion-head probabilities per image."""
    x = as_batch(images)
    out = []
    for i in range(0, x.shape[0], batch_size):
        co = cascaded_forward(model, x[i:i + batch_size])
        out.extend((b, ClassProbabilities(float(p[0]), float(p[1]))) for b, p in zip(co.boxes, co.fused))
    return out


def joint_loss(l_dnet, l_fnet, l_cls1, l_cls2):
    """Stage-2 objective: detector loss plus the fusion-head and two auxiliary classification losses."""
    return l_dnet + l_fnet + l_cls1 + l_cls2


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 10
    alpha: float = 1.0
    beta: float = 1.0
    learning_rate: float = 1e-5
    batch_size: int = 16
    k: int = 1
    seed: int = 0
    self_distillation: bool = True
    # optional soft-target term from the fusion head to the auxiliary heads; 0 disables it
    kd_weight: float = 0.0
    kd_temperature: float = 3.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.k != 1:
            raise ValueError("stage 2 crops the detector's top-1 box; k must be 1")
        if self.alpha < 0 or self.beta < 0 or self.kd_weight < 0:
            raise ValueError("loss weights must be >= 0")


def _weighted_ce(logits: torch.Tensor, y: torch.Tensor, is_fa: torch.Tensor, beta: float) -> torch.Tensor:
    zero = logits.sum() * 0.0
    l_fa = ce_from_logits(logits[is_fa], y[is_fa]) if is_fa.any() else zero
    l_pa = ce_from_logits(logits[~is_fa], y[~is_fa]) if (~is_fa).any() else zero
    return l_fa + beta * l_pa


def _kd(student: torch.Tensor, teacher: torch.Tensor, T: float) -> torch.Tensor:
    return F.kl_div(F.log_softmax(student / T, 1), F.softmax(teacher.detach() / T, 1),
                    reduction="batchmean") * T * T


def joint_step_loss(model: TSDDNet, x: torch.Tensor, boxes_xywh: torch.Tensor, y: torch.Tensor,
                    is_fa: torch.Tensor, cfg: Stage2Config) -> tuple[torch.Tensor, dict]:
    fallback = [BoundingBox(*b) for b in boxes_xywh.tolist()]
    det_out, _, fused, a1, a2, n_fb = model(x, fallback)
    loc, conf = detection_losses(det_out.deltas, det_out.conf_logits,
                                 model.detector.grid.boxes(det_out.deltas.dtype), xywh_to_xyxy(boxes_xywh))
    l_dnet = dnet_loss(group_mean(loc + conf, is_fa), group_mean(loc + conf, ~is_fa), cfg.alpha)
    l_fnet = _weighted_ce(fused, y, is_fa, cfg.beta)
    zero = fused.sum() * 0.0
    l1 = _weighted_ce(a1, y, is_fa, cfg.beta) if a1 is not None else zero
    l2 = _weighted_ce(a2, y, is_fa, cfg.beta) if a2 is not None else zero
    total = joint_loss(l_dnet, l_fnet, l1, l2)
    if cfg.kd_weight > 0 and a1 is not None:
        total = total + cfg.kd_weight * (_kd(a1, fused, cfg.kd_temperature) + _kd(a2, fused, cfg.kd_temperature))
    parts = {"dnet": float(l_dnet.detach()), "fnet": float(l_fnet.detach()),
             "cls1": float(l1.detach()), "cls2": float(l2.detach()), "fallbacks": n_fb}
    return total, parts


@dataclass
class Stage2Result:
    model: TSDDNet
    events: list[dict] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)


def evaluate_cascade(model: TSDDNet, data: TensorSet) -> tuple[list[BoundingBox], torch.Tensor]:
    boxes, probs = [], []
    for i in range(0, len(data), 16):
        co = cascaded_forward(model, data.images[i:i + 16])
        boxes.extend(co.boxes)
        probs.append(co.fused)
    return boxes, torch.cat(probs)


def recalibrate_cascade(model: TSDDNet, data: TensorSet, fallback: torch.Tensor, batch_size: int = 16):
    """Detector BatchNorm statistics from the images, then classifier statistics from the cascade crops."""
    chunks = range(0, len(data), batch_size)
    recalibrate_bn(model.detector, (data.images[i:i + batch_size] for i in chunks))
    size = model.classifier.cfg.roi_size
    crops = []
    for i in chunks:
        fb = [BoundingBox(*b) for b in fallback[i:i + batch_size].tolist()]
        boxes = cascaded_forward(model, data.images[i:i + batch_size], fb).boxes
        t = torch.tensor([b.as_tuple() for b in boxes], dtype=torch.float32)
        crops.append(crop_rois(data.images[i:i + batch_size], t, size))
    recalibrate_bn(model.classifier, crops)


def run_stage2(train: Sequence[ImageRecord], store: LabelStore, detector: DNet, classifier: CNet,
               cfg: Stage2Config, val: Sequence[ImageRecord] | None = None,
               data: TensorSet | None = None) -> Stage2Result:
    """Joint fine-tuning from stage-1 weights against the frozen refined labels.

    The stage-1 networks are copied, not modified. Auxiliary heads are removed
    from the returned model. With ``val`` the snapshot with the best fused
    validation accuracy is kept (later epochs win ties).
    """
    torch.manual_seed(cfg.seed + 1)
    model = TSDDNet(copy.deepcopy(detector), copy.deepcopy(classifier), cfg.self_distillation)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    data = data if data is not None else TensorSet.from_records(train)
    all_boxes = data.boxes(store.boxes())
    result = Stage2Result(model)
    val_data = TensorSet.from_records(val) if val else None
    best = None

    def snapshot(epoch: int):
        nonlocal best
        if val_data is None:
            return
        _, probs = evaluate_cascade(model, val_data)
        acc = float((probs.argmax(1) == val_data.labels).double().mean())
        result.val_history.append((epoch, acc))
        result.events.append({"event": "val", "stage": 2, "epoch": epoch, "accuracy": acc})
        if best is None or acc >= best[0]:
            best = (acc, copy.deepcopy(model.state_dict()))

    if cfg.epochs > 0:
        snapshot(0)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        for step, idx in enumerate(batches(len(data), cfg.batch_size, gen)):
            flip = torch.rand(len(idx), generator=gen) < 0.5
            x, b = hflip(data.images[idx], all_boxes[idx], flip)
            loss, parts = joint_step_loss(model, x, b, data.labels[idx], data.is_fa[idx], cfg)
            _check(loss, f"stage2 epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.events.append({"event": "loss", "net": "joint", "epoch": epoch, "step": step,
                                  "loss": float(loss.detach()), **parts})
        recalibrate_cascade(model, data, all_boxes, cfg.batch_size)
        snapshot(epoch)

    if best is not None:
        model.load_state_dict(best[1])
    model.drop_aux()
    return result


# ---------------------------------------------------------------------------
# bundle persistence


def save_bundle(model: TSDDNet, out_dir: str | Path, manifest: dict, store: LabelStore | None = None) -> Path:
    """Per-component checkpoints plus ``manifest.json`` (and the label snapshot)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"created": manifest.get("created", "")}
    save_checkpoint(model.detector, out_dir / "dnet", model.detector.cfg.header(), meta)
    save_checkpoint(model.classifier, out_dir / "cnet", model.classifier.cfg.header(), meta)
    save_checkpoint(model.fusion, out_dir / "fnet", fusion_header(model), meta)
    m = dict(manifest)
    m["components"] = ["dnet", "cnet", "fnet"]
    if store is not None:
        store.write_jsonl(out_dir / "labels.jsonl")
        m["label_snapshot"] = "labels.jsonl"
    (out_dir / "manifest.json").write_text(json.dumps(m, indent=1, sort_keys=True, default=str), encoding="utf-8")
    return out_dir


def fusion_header(model: TSDDNet) -> dict:
    return {"arch": "fnet-mlp", "loc_dim": model.fusion.loc_dim, "disc_dim": model.fusion.disc_dim,
            "hidden": model.fusion.fc1.out_features}


def load_bundle(out_dir: str | Path, dnet_cfg: DNetConfig, cnet_cfg: CNetConfig) -> TSDDNet:
    out_dir = Path(out_dir)
    model = TSDDNet(DNet(dnet_cfg), CNet(cnet_cfg), self_distillation=False)
    load_checkpoint(model.detector, out_dir / "dnet", dnet_cfg.header())
    load_checkpoint(model.classifier, out_dir / "cnet", cnet_cfg.header())
    load_checkpoint(model.fusion, out_dir / "fnet", fusion_header(model))
    model.eval()
    return model
