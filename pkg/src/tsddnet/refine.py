"""Class-label-guided candidate selection and the stage-1 train/refine loop.

Detector candidates are scored by the classifier with the probability of the
image's known class; the best candidate replaces the current ROI label only if
it scores strictly higher than the current label under the same classifier.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .cnet import CNet, CNetConfig, predict_proba, score_boxes
from .data import BoundingBox, ImageRecord, crop_rois
from .dnet import CandidateSet, DNet, DNetConfig, predict_candidates
from .labels import LabelStore, Origin
from .train import TensorSet, seed_everything, train_classifier, train_detector

log = logging.getLogger(__name__)

Proposer = Callable[[Sequence[ImageRecord], int], list[CandidateSet]]
Scorer = Callable[[ImageRecord, Sequence[BoundingBox]], list[float]]


@dataclass(frozen=True)
class RefinementConfig:
    k_candidates: int = 10
    n_outer_iterations: int = 10
    epochs_per_iteration: int = 2
    warmup_epochs: int | None = None  # None: same as epochs_per_iteration
    alpha: float = 0.8
    beta: float = 0.8
    learning_rate: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    candidate_selection: bool = True

    def __post_init__(self):
        counts = (self.k_candidates, self.epochs_per_iteration, self.batch_size)
        if any(c < 1 for c in counts) or self.n_outer_iterations < 0:
            raise ValueError("counts must be >= 1 (n_outer_iterations >= 0)")
        if self.warmup_epochs is not None and self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")

    @property
    def n_warmup_epochs(self) -> int:
        return self.warmup_epochs if self.warmup_epochs is not None else self.epochs_per_iteration


# ---------------------------------------------------------------------------
# candidate selection


def best_index(scores: Sequence[float]) -> int:
    """Argmax with ties going to the lowest index."""
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


def generate_pseudo_labels(pa_records: Sequence[ImageRecord], propose: Proposer, score: Scorer, k: int,
                           store: LabelStore, iteration: int = 0) -> LabelStore:
    """Label each partially annotated image with its best-scoring of ``k`` candidates."""
    cands = propose(pa_records, k)
    picks = []
    for rec, cs in zip(pa_records, cands):
        if len(cs) == 0:
            raise RuntimeError(f"{rec.image_id}: detector returned no candidates")
        scores = score(rec, cs.boxes)
        i = best_index(scores)
        picks.append((rec.image_id, cs.boxes[i], scores[i]))
    for image_id, box, s in picks:
        store.add(image_id, box, s, Origin.PSEUDO, iteration)
    return store


def seed_manual_labels(fa_records: Sequence[ImageRecord], score: Scorer, store: LabelStore,
                       iteration: int = 0) -> LabelStore:
    for rec in fa_records:
        store.add(rec.image_id, rec.manual_roi, score(rec, [rec.manual_roi])[0], Origin.MANUAL, iteration)
    return store


def refine_labels(records: Sequence[ImageRecord], store: LabelStore, propose: Proposer, score: Scorer,
                  k: int, iteration: int) -> LabelStore:
    """One refinement pass over ``records``.

    The incumbent label is rescored together with the ``k`` candidates; it is
    replaced only by a strictly higher-scoring candidate. All decisions are
    computed first and committed afterwards, so each pass sees one model state.
    """
    cands = propose(records, k)
    decisions = []
    for rec, cs in zip(records, cands):
        entry = store[rec.image_id]
        scores = score(rec, [entry.current_roi, *cs.boxes])
        cur, cand_scores = scores[0], scores[1:]
        if cand_scores:
            i = best_index(cand_scores)
            if cand_scores[i] > cur:
                decisions.append((rec.image_id, cs.boxes[i], cand_scores[i], True))
                continue
        decisions.append((rec.image_id, entry.current_roi, cur, False))
    for image_id, box, s, replaced in decisions:
        store.commit(image_id, iteration, box, s, replaced)
    return store


def detector_proposer(model: DNet, images: dict[str, torch.Tensor], batch_size: int = 16) -> Proposer:
    def propose(records: Sequence[ImageRecord], k: int) -> list[CandidateSet]:
        out = []
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            x = torch.stack([images[r.image_id] for r in chunk])
            out.extend(predict_candidates(model, x, k))
        return out
    return propose


def classifier_scorer(model: CNet, images: dict[str, torch.Tensor]) -> Scorer:
    def score(rec: ImageRecord, boxes: Sequence[BoundingBox]) -> list[float]:
        return score_boxes(model, images[rec.image_id], boxes, rec.label)
    return score


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1State:
    detector: DNet
    classifier: CNet
    det_opt: torch.optim.Optimizer
    cls_opt: torch.optim.Optimizer
    gen: torch.Generator
    store: LabelStore | None = None
    events: list[dict] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)

    def fork(self) -> "Stage1State":
        """Independent copy: models, optimizer moments, RNG state and store."""
        det = copy.deepcopy(self.detector)
        cls = copy.deepcopy(self.classifier)
        det_opt = type(self.det_opt)(det.parameters(), **self.det_opt.defaults)
        det_opt.load_state_dict(copy.deepcopy(self.det_opt.state_dict()))
        cls_opt = type(self.cls_opt)(cls.parameters(), **self.cls_opt.defaults)
        cls_opt.load_state_dict(copy.deepcopy(self.cls_opt.state_dict()))
        gen = torch.Generator().set_state(self.gen.get_state())
        return Stage1State(det, cls, det_opt, cls_opt, gen,
                           self.store.copy() if self.store is not None else None,
                           list(self.events), list(self.val_history))


def image_map(data: TensorSet) -> dict[str, torch.Tensor]:
    return {i: data.images[j] for j, i in enumerate(data.ids)}


@torch.no_grad()
def stage1_predict(detector: DNet, classifier: CNet, data: TensorSet, batch_size: int = 16) -> tuple[list[BoundingBox], torch.Tensor]:
    """Top-1 detector box per image and the classifier's probabilities on that crop."""
    boxes, probs = [], []
    for i in range(0, len(data), batch_size):
        x = data.images[i:i + batch_size]
        cs = predict_candidates(detector, x, 1)
        bb = [c.boxes[0] for c in cs]
        t = torch.tensor([b.as_tuple() for b in bb], dtype=torch.float32)
        probs.append(predict_proba(classifier, crop_rois(x, t, classifier.cfg.roi_size)))
        boxes.extend(bb)
    return boxes, torch.cat(probs)


def _accuracy(probs: torch.Tensor, labels: torch.Tensor) -> float:
    return float((probs.argmax(dim=1) == labels).double().mean())


def warm_up(train: Sequence[ImageRecord], cfg: RefinementConfig, dnet_cfg: DNetConfig, cnet_cfg: CNetConfig,
            data: TensorSet | None = None) -> Stage1State:
    """Train both networks on the fully annotated images only."""
    fa = [r for r in train if r.manual_roi is not None]
    if not fa:
        raise ValueError("stage 1 needs at least one fully annotated image")
    seed_everything(cfg.seed)
    detector = DNet(dnet_cfg)
    classifier = CNet(cnet_cfg)
    st = Stage1State(detector, classifier,
                     torch.optim.Adam(detector.parameters(), lr=cfg.learning_rate),
                     torch.optim.Adam(classifier.parameters(), lr=cfg.learning_rate),
                     torch.Generator().manual_seed(cfg.seed))
    data = data if data is not None else TensorSet.from_records(train)
    fa_data = data.subset(data.is_fa)
    manual = {r.image_id: r.manual_roi for r in fa}
    sink = st.events.append
    train_detector(st.detector, st.det_opt, fa_data, manual, 0.0, cfg.n_warmup_epochs, cfg.batch_size, st.gen,
                   sink, "dnet/warmup")
    train_classifier(st.classifier, st.cls_opt, fa_data, manual, 0.0, cfg.n_warmup_epochs, cfg.batch_size,
                     st.gen, sink, "cnet/warmup")
    return st


def run_stage1(train: Sequence[ImageRecord], cfg: RefinementConfig, dnet_cfg: DNetConfig = DNetConfig(),
               cnet_cfg: CNetConfig = CNetConfig(), val: Sequence[ImageRecord] | None = None,
               warm: Stage1State | None = None, jsonl_path: str | Path | None = None,
               data: TensorSet | None = None) -> Stage1State:
    """Warm-up, pseudo-labelling, then ``n_outer_iterations`` rounds of train + refine.

    Without candidate selection the pseudo label is the detector's top-1 box and
    labels are never replaced. With ``val`` given, the returned networks are
    the snapshot with the best validation accuracy (later snapshots win ties);
    the label store is always the final one.
    """
    data = data if data is not None else TensorSet.from_records(train)
    st = warm.fork() if warm is not None else warm_up(train, cfg, dnet_cfg, cnet_cfg, data)
    images = image_map(data)
    propose = detector_proposer(st.detector, images)
    score = classifier_scorer(st.classifier, images)
    fa = [r for r in train if r.manual_roi is not None]
    pa = [r for r in train if r.manual_roi is None]

    st.store = LabelStore()
    seed_manual_labels(fa, score, st.store)
    if pa:
        generate_pseudo_labels(pa, propose, score, cfg.k_candidates if cfg.candidate_selection else 1, st.store)
    if jsonl_path is not None:
        st.store.write_jsonl(jsonl_path)

    val_data = TensorSet.from_records(val) if val else None
    best = None

    def snapshot(it: int):
        nonlocal best
        if val_data is None:
            return
        _, probs = stage1_predict(st.detector, st.classifier, val_data)
        acc = _accuracy(probs, val_data.labels)
        st.val_history.append((it, acc))
        st.events.append({"event": "val", "stage": 1, "iteration": it, "accuracy": acc})
        if best is None or acc >= best[0]:
            best = (acc, copy.deepcopy(st.detector.state_dict()), copy.deepcopy(st.classifier.state_dict()))

    snapshot(0)
    sink = st.events.append
    for it in range(1, cfg.n_outer_iterations + 1):
        boxes = st.store.boxes()
        train_detector(st.detector, st.det_opt, data, boxes, cfg.alpha, cfg.epochs_per_iteration,
                       cfg.batch_size, st.gen, sink, f"dnet/it{it}")
        train_classifier(st.classifier, st.cls_opt, data, boxes, cfg.beta, cfg.epochs_per_iteration,
                         cfg.batch_size, st.gen, sink, f"cnet/it{it}")
        if cfg.candidate_selection:
            refine_labels(train, st.store, propose, score, cfg.k_candidates, it)
            n_ref = sum(e.history[-1].box != e.history[-2].box for e in st.store.entries())
            st.events.append({"event": "refine", "iteration": it, "replaced": n_ref})
            log.info("stage1 iteration %d: %d labels replaced", it, n_ref)
            if jsonl_path is not None:
                st.store.append_jsonl(jsonl_path, min_iteration=it)
        snapshot(it)

    if best is not None:
        st.detector.load_state_dict(best[1])
        st.classifier.load_state_dict(best[2])
    return st
