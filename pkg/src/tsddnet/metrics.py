"""Classification and detection metrics, ROC/AUC, and fold-aggregated report tables.

Malignant (label 1) is the positive class throughout: sensitivity is the
malignant recall, specificity the benign recall.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import BoundingBox
from .dnet import iou

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "youden", "auc")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise MetricError(f"negative count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, pred: Sequence[int], labels: Sequence[int]) -> "ConfusionCounts":
        pred = np.asarray(pred, dtype=int)
        labels = np.asarray(labels, dtype=int)
        if pred.shape != labels.shape:
            raise MetricError("predictions and labels differ in length")
        return cls(int(((pred == 1) & (labels == 1)).sum()), int(((pred == 1) & (labels == 0)).sum()),
                   int(((pred == 0) & (labels == 0)).sum()), int(((pred == 0) & (labels == 1)).sum()))


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    sensitivity: float
    specificity: float
    youden: float


def confusion_metrics(c: ConfusionCounts) -> ClassificationMetrics:
    if c.tp + c.fn == 0:
        raise MetricError("sensitivity undefined: no malignant samples")
    if c.tn + c.fp == 0:
        raise MetricError("specificity undefined: no benign samples")
    sens = c.tp / (c.tp + c.fn)
    spec = c.tn / (c.tn + c.fp)
    return ClassificationMetrics((c.tp + c.tn) / c.total, sens, spec, sens + spec - 1.0)


def youden_index(sensitivity: float, specificity: float) -> float:
    return sensitivity + specificity - 1.0


def predictions_from_proba(proba: np.ndarray) -> np.ndarray:
    """Argmax over the (benign, malignant) pair; exact 0.5 goes to benign."""
    proba = np.asarray(proba, dtype=np.float64)
    return (proba[:, 1] > proba[:, 0]).astype(int)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outranks random negative), ties counted 1/2 (Mann-Whitney form)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(s)  # average ranks give the tie-1/2 convention
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float]]:
    """(FPR, TPR) pairs from (0, 0) to (1, 1), one per distinct threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both classes")
    pts = [(0.0, 0.0)]
    for t in np.unique(s)[::-1]:
        hit = s >= t
        pts.append((float((hit & (y == 0)).sum() / n_neg), float((hit & (y == 1)).sum() / n_pos)))
    return pts


def detection_quality(predicted: Mapping[str, BoundingBox], tight: Mapping[str, BoundingBox],
                      threshold: float = 0.5) -> tuple[float, float]:
    """(mean IoU, fraction with IoU >= threshold) over paired image ids."""
    if set(predicted) != set(tight):
        missing = sorted(set(predicted) ^ set(tight))
        raise MetricError(f"unpaired image ids: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    if not predicted:
        raise MetricError("no boxes")
    vals = np.array([iou(predicted[k], tight[k]) for k in sorted(predicted)])
    return float(vals.mean()), float((vals >= threshold).mean())


def evaluate_classification(proba: np.ndarray, labels: Sequence[int]) -> dict[str, float]:
    proba = np.asarray(proba, dtype=np.float64)
    m = confusion_metrics(ConfusionCounts.from_predictions(predictions_from_proba(proba), labels))
    return {**asdict(m), "auc": roc_auc(proba[:, 1], labels)}


# ---------------------------------------------------------------------------
# report tables


def mean_std(values: Sequence[float], ddof: int = 0) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        raise MetricError("no values")
    if len(v) <= ddof:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=ddof))


def format_pm(mean: float, std: float, percent: bool = True) -> str:
    scale = 100.0 if percent else 1.0
    return f"{mean * scale:.2f}±{std * scale:.2f}"


@dataclass
class ReportRow:
    group: str  # e.g. variant name or "p=0.2"
    n_folds: int
    stats: dict[str, tuple[float, float]]


def aggregate(results: Mapping[str, Sequence[Mapping[str, float]]], metrics: Sequence[str] = METRIC_NAMES,
              ddof: int = 0) -> list[ReportRow]:
    """One row per group: mean and standard deviation of each metric over the group's folds."""
    rows = []
    for group, folds in results.items():
        if not folds:
            raise MetricError(f"group {group!r} has no completed folds")
        stats = {m: mean_std([f[m] for f in folds if not _missing(f.get(m))], ddof)
                 for m in metrics if any(not _missing(f.get(m)) for f in folds)}
        rows.append(ReportRow(group, len(folds), stats))
    return rows


def _missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def render_text(rows: Sequence[ReportRow], title: str = "", ddof: int = 0) -> str:
    metrics = [m for m in METRIC_NAMES if any(m in r.stats for r in rows)]
    header = ["group", "folds", *(m for m in metrics)]
    body = [[r.group, str(r.n_folds), *(format_pm(*r.stats[m]) if m in r.stats else "n/a" for m in metrics)]
            for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    lines = []
    if title:
        lines.append(title)
    lines.append(f"# positive class: malignant; values in %, mean±std over folds ({'population' if ddof == 0 else 'sample'} std)")
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body)
    return "\n".join(lines) + "\n"


def render_csv(rows: Sequence[ReportRow]) -> str:
    metrics = [m for m in METRIC_NAMES if any(m in r.stats for r in rows)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "n_folds", *(f"{m}_{s}" for m in metrics for s in ("mean", "std"))])
    for r in rows:
        w.writerow([r.group, r.n_folds, *(repr(r.stats[m][j]) if m in r.stats else "" for m in metrics
                                           for j in (0, 1))])
    return buf.getvalue()


def parse_csv(text: str) -> list[ReportRow]:
    rows = []
    for d in csv.DictReader(io.StringIO(text)):
        stats = {}
        for key in d:
            if key.endswith("_mean") and d[key] != "":
                m = key[:-5]
                stats[m] = (float(d[key]), float(d[f"{m}_std"]))
        rows.append(ReportRow(d["group"], int(d["n_folds"]), stats))
    return rows


def write_report(rows: Sequence[ReportRow], out_dir: str | Path, stem: str = "report", title: str = "",
                 ddof: int = 0) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"txt": out / f"{stem}.txt", "csv": out / f"{stem}.csv", "json": out / f"{stem}.json"}
    paths["txt"].write_text(render_text(rows, title, ddof), encoding="utf-8")
    paths["csv"].write_text(render_csv(rows), encoding="utf-8")
    paths["json"].write_text(json.dumps([{"group": r.group, "n_folds": r.n_folds,
                                          "stats": {m: list(v) for m, v in r.stats.items()}} for r in rows],
                                        indent=1, sort_keys=True), encoding="utf-8")
    return paths
