"""Experiment configuration, fold orchestration, run directories and reports.

A run directory is ``<out_dir>/<config hash>``; it holds the resolved config,
the fold plan, one JSON-lines event stream, per fold and variant the stage-1
label history, the stage-2 model bundle and a ``metrics.json``, and the
aggregated report. Metrics files carry no timestamps so that reruns with the
same config and seed reproduce them byte for byte.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import shutil
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backbone import RESNET18_BLOCKS, RESNET34_BLOCKS, RESNET_WIDTHS, BackboneConfig
from .cnet import CNetConfig, score_candidate
from .data import BoundingBox, DataError, ImageRecord, apply_annotation_fraction, crop_roi, letterbox_record, \
    load_manifest, \
    make_fold_plan, select_patients
from .dnet import DNetConfig
from .joint import Stage2Config, TSDDNet, evaluate_cascade, load_bundle, run_stage2, save_bundle
from .labels import LabelStore
from .metrics import METRIC_NAMES, MetricError, aggregate, detection_quality, evaluate_classification, \
    write_report
from .phantom import PhantomSpec, generate, load_ground_truth
from .refine import RefinementConfig, Stage1State, run_stage1, warm_up
from .train import TensorSet

log = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
EVENTS_FILE = "events.jsonl"


class Variant(str, enum.Enum):
    B = "B"  # neither candidate selection nor self-distillation
    CS = "CS"  # stage-1 candidate selection only
    SD = "SD"  # stage-2 auxiliary heads only
    FULL = "FULL"

    @property
    def candidate_selection(self) -> bool:
        return self in (Variant.CS, Variant.FULL)

    @property
    def self_distillation(self) -> bool:
        return self in (Variant.SD, Variant.FULL)


ALL_VARIANTS = (Variant.B, Variant.CS, Variant.SD, Variant.FULL)


class ConfigError(ValueError):
    pass


class RunExistsError(RuntimeError):
    pass


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a run. ``out_dir`` is the only field excluded from the hash."""

    data_dir: str = ""
    out_dir: str = "runs"
    profile: str = "desk"
    variant: str = "FULL"
    p: float = 0.2
    n_folds: int = 5
    folds: str = "all"  # "all" or comma-separated fold indices
    seed: int = 0
    # stage 1
    k_candidates: int = 3
    n_outer_iterations: int = 3
    epochs_per_iteration: int = 2
    warmup_epochs: int = 30
    alpha: float = 0.8
    beta: float = 0.8
    learning_rate: float = 1e-3
    batch_size: int = 8
    # stage 2
    s2_epochs: int = 3
    s2_alpha: float = 1.0
    s2_beta: float = 1.0
    s2_learning_rate: float = 1e-4
    s2_batch_size: int = 16
    kd_weight: float = 0.0
    # networks
    dnet_blocks: str = "1,1,1,1"
    dnet_widths: str = "8,16,32,32"
    dnet_stem: int = 8
    fpn_channels: int = 32
    head_convs: int = 2
    cnet_blocks: str = "1,1,1,1"
    cnet_widths: str = "8,16,32,32"
    cnet_stem: int = 8
    image_size: int = 256

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of B, CS, SD, FULL") from None
        if not 0.0 < self.p <= 1.0:
            raise ConfigError("p must lie in (0, 1]")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.folds != "all":
            try:
                idx = _ints(self.folds)
            except ValueError:
                raise ConfigError(f"folds must be 'all' or comma-separated integers, got {self.folds!r}") from None
            if not idx or any(i < 0 or i >= self.n_folds for i in idx):
                raise ConfigError(f"fold indices {self.folds!r} outside 0..{self.n_folds - 1}")
        for name in ("dnet_blocks", "dnet_widths", "cnet_blocks", "cnet_widths"):
            v = getattr(self, name)
            try:
                vals = _ints(v)
            except ValueError:
                raise ConfigError(f"{name} must be comma-separated integers, got {v!r}") from None
            if len(vals) != 4 or min(vals) < 1:
                raise ConfigError(f"{name} needs four positive integers")
        try:
            self.stage1(Variant.FULL)
            self.stage2(Variant.FULL)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # derived configs

    @property
    def fold_indices(self) -> list[int]:
        return list(range(self.n_folds)) if self.folds == "all" else sorted(set(_ints(self.folds)))

    def stage1(self, variant: Variant) -> RefinementConfig:
        return RefinementConfig(self.k_candidates, self.n_outer_iterations, self.epochs_per_iteration,
                                self.warmup_epochs, self.alpha, self.beta, self.learning_rate, self.batch_size,
                                self.seed, variant.candidate_selection)

    def stage2(self, variant: Variant) -> Stage2Config:
        return Stage2Config(self.s2_epochs, self.s2_alpha, self.s2_beta, self.s2_learning_rate,
                            self.s2_batch_size, 1, self.seed, variant.self_distillation, self.kd_weight)

    def dnet(self) -> DNetConfig:
        bb = BackboneConfig(_ints(self.dnet_blocks), _ints(self.dnet_widths), self.dnet_stem)
        return DNetConfig(bb, self.fpn_channels, self.head_convs, self.image_size)

    def cnet(self) -> CNetConfig:
        return CNetConfig(BackboneConfig(_ints(self.cnet_blocks), _ints(self.cnet_widths), self.cnet_stem))

    # serialization

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def to_text(self) -> str:
        lines = ["# experiment config: one key = value per line"]
        lines += [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def coerce(key: str, value) -> object:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = _TYPES[key]
    try:
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        return str(value).strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {t}") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = coerce(k, v)
    return out


PROFILES: dict[str, dict] = {
    # CPU-sized: narrow one-block-per-stage backbones, short schedules
    "desk": {},
    "paper": {
        "k_candidates": 10, "n_outer_iterations": 10, "epochs_per_iteration": 2, "warmup_epochs": 2,
        "alpha": 0.8, "beta": 0.8, "learning_rate": 1e-4, "batch_size": 8,
        "s2_epochs": 10, "s2_alpha": 1.0, "s2_beta": 1.0, "s2_learning_rate": 1e-5, "s2_batch_size": 16,
        "dnet_blocks": ",".join(map(str, RESNET34_BLOCKS)), "dnet_widths": ",".join(map(str, RESNET_WIDTHS)),
        "dnet_stem": 64, "fpn_channels": 256, "head_convs": 4,
        "cnet_blocks": ",".join(map(str, RESNET18_BLOCKS)), "cnet_widths": ",".join(map(str, RESNET_WIDTHS)),
        "cnet_stem": 64,
    },
}


def build_config(file: str | Path | None = None, overrides: Mapping[str, object] | None = None) -> ExperimentConfig:
    """Profile defaults, then the config file, then explicit overrides."""
    values: dict = {}
    if file is not None:
        values.update(parse_config_text(Path(file).read_text(encoding="utf-8")))
    over = {k: coerce(k, v) for k, v in (overrides or {}).items() if v is not None}
    profile = over.get("profile", values.get("profile", "desk"))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    merged = {**PROFILES[profile], **values, **over, "profile": profile}
    return ExperimentConfig(**merged)


# ---------------------------------------------------------------------------
# data generation


def cmd_gen_data(out: str | Path, n_patients: int = 60, images_per_patient: int = 5, image_size: int = 256,
                 coarse_jitter: float = 0.25, seed: int = 0) -> Path:
    spec = PhantomSpec(n_patients, images_per_patient, image_size, coarse_jitter, seed)
    return generate(spec, out)


# ---------------------------------------------------------------------------
# training


class EventLog:
    def __init__(self, path: Path):
        self.path = path
        path.write_text("", encoding="utf-8")

    def write(self, events: Iterable[dict], **context):
        with open(self.path, "a", encoding="utf-8") as fh:
            for e in events:
                fh.write(json.dumps({**context, **e}, sort_keys=True) + "\n")


@dataclass
class Dataset:
    records: list[ImageRecord]
    truth: dict[str, BoundingBox] | None

    @classmethod
    def load(cls, data_dir: str | Path, size: int | None = None) -> "Dataset":
        """Read the manifest (and tight boxes if present); images not ``size`` square are letterboxed."""
        d = Path(data_dir)
        manifest = d / "manifest.csv" if d.is_dir() else d
        if not manifest.is_file():
            raise DataError(f"no manifest at {manifest}")
        records = load_manifest(manifest, eager=True)
        gt = manifest.parent / "ground_truth.json"
        truth = load_ground_truth(gt) if gt.is_file() else None
        if size is not None:
            records, truth = _fit(records, truth, size)
        return cls(records, truth)


def _fit(records, truth, size):
    out, fitted = [], dict(truth) if truth is not None else None
    for r in records:
        if r.shape == (size, size):
            out.append(r)
            continue
        r2, lb = letterbox_record(r, size)
        out.append(r2)
        if fitted is not None and r.image_id in fitted:
            fitted[r.image_id] = lb.box(fitted[r.image_id]).clip(size, size)
    return out, fitted


def _fold_split(cfg: ExperimentConfig, ds: Dataset, fold: int):
    plan = make_fold_plan(ds.records, cfg.n_folds, cfg.seed)
    f = plan.folds[fold]
    train = apply_annotation_fraction(select_patients(ds.records, f.train), cfg.p, cfg.seed + fold)
    return plan, train, select_patients(ds.records, f.val), select_patients(ds.records, f.test)


def evaluate_fold(model: TSDDNet, test: Sequence[ImageRecord], ds: Dataset, store: LabelStore | None,
                  train: Sequence[ImageRecord]) -> dict:
    """Test-set classification metrics plus, when tight boxes are known, localization quality."""
    data = TensorSet.from_records(test)
    boxes, probs = evaluate_cascade(model, data)
    probs = probs.numpy()
    labels = data.labels.numpy()
    try:
        m = evaluate_classification(probs, labels)
    except MetricError as e:
        log.warning("fold metrics undefined: %s", e)
        m = {k: float("nan") for k in METRIC_NAMES}
    m["n_test"] = len(test)
    if ds.truth is not None:
        pred = {i: b for i, b in zip(data.ids, boxes)}
        m["test_iou"], m["test_hit"] = detection_quality(pred, {i: ds.truth[i] for i in pred})
        if store is not None:
            ids = [r.image_id for r in train]
            stored = {i: store[i].current_roi for i in ids}
            coarse = {r.image_id: r.reference_roi for r in train}
            tight = {i: ds.truth[i] for i in ids}
            m["stored_iou"], m["stored_hit"] = detection_quality(stored, tight)
            m["coarse_iou"], m["coarse_hit"] = detection_quality(coarse, tight)
    m["predictions"] = {i: {"box": b.to_list(), "p_malignant": float(p[1])}
                        for i, b, p in zip(data.ids, boxes, probs)}
    return m


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _clean(m: Mapping) -> dict:
    """Drop non-finite values so the JSON stays strict."""
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in m.items()}


def prepare_run_dir(cfg: ExperimentConfig, force: bool = False) -> Path:
    run = Path(cfg.out_dir) / cfg.config_hash()
    if (run / CONFIG_FILE).exists():
        if not force:
            raise RunExistsError(f"{run} already holds a run with this config; pass --force to overwrite")
        shutil.rmtree(run)
    run.mkdir(parents=True, exist_ok=True)
    (run / CONFIG_FILE).write_text(cfg.to_text(), encoding="utf-8")
    return run


def metrics_path(run: Path, fold: int, variant: Variant) -> Path:
    return run / f"fold{fold}" / variant.value / "metrics.json"


def cmd_train(cfg: ExperimentConfig, force: bool = False, variants: Sequence[Variant] | None = None,
              dataset: Dataset | None = None) -> Path:
    """Train and evaluate every requested fold and variant; returns the run directory.

    Variants requested together share the warm-up, and variants with the same
    stage-1 semantics share the stage-1 result. On divergence the finished
    folds stay on disk and the error propagates.
    """
    variants = [Variant(cfg.variant)] if variants is None else [Variant(v) for v in variants]
    ds = dataset if dataset is not None else Dataset.load(cfg.data_dir, cfg.image_size)
    if any(r.shape != (cfg.image_size, cfg.image_size) for r in ds.records):
        ds = Dataset(*_fit(ds.records, ds.truth, cfg.image_size))
    run = prepare_run_dir(cfg, force)
    events = EventLog(run / EVENTS_FILE)
    results: dict[str, list[dict]] = {v.value: [] for v in variants}
    for fold in cfg.fold_indices:
        plan, train, val, test = _fold_split(cfg, ds, fold)
        if fold == cfg.fold_indices[0]:
            (run / "fold_plan.json").write_text(plan.to_json(), encoding="utf-8")
        data = TensorSet.from_records(train)
        warm: Stage1State = warm_up(train, cfg.stage1(Variant.FULL), cfg.dnet(), cfg.cnet(), data)
        events.write(warm.events, fold=fold, stage="warmup")
        stage1: dict[bool, tuple[Stage1State, Path]] = {}
        for v in variants:
            cs = v.candidate_selection
            vdir = run / f"fold{fold}" / v.value
            vdir.mkdir(parents=True, exist_ok=True)
            if cs not in stage1:
                st = run_stage1(train, cfg.stage1(v), cfg.dnet(), cfg.cnet(), val, warm,
                                vdir / "labels_stage1.jsonl", data)
                events.write(st.events[len(warm.events):], fold=fold, stage=1, candidate_selection=cs)
                stage1[cs] = st, vdir / "labels_stage1.jsonl"
            else:
                st, log_path = stage1[cs]
                shutil.copyfile(log_path, vdir / "labels_stage1.jsonl")
            res = run_stage2(train, st.store, st.detector, st.classifier, cfg.stage2(v), val, data)
            events.write(res.events, fold=fold, stage=2, variant=v.value)
            save_bundle(res.model, vdir / "bundle", {"variant": v.value, "fold": fold,
                                                     "config_hash": cfg.config_hash(), "created": ""}, st.store)
            m = evaluate_fold(res.model, test, ds, st.store, train)
            m.update(fold=fold, variant=v.value, p=cfg.p, seed=cfg.seed)
            _write_json(metrics_path(run, fold, v), _clean(m))
            results[v.value].append(m)
            log.info("fold %d variant %s: accuracy %.4f auc %.4f", fold, v.value, m["accuracy"], m["auc"])
    rows = aggregate(results)
    write_report(rows, run, title=f"p={cfg.p} folds={cfg.fold_indices}")
    return run


def cmd_ablate(cfg: ExperimentConfig, force: bool = False, dataset: Dataset | None = None) -> Path:
    return cmd_train(cfg, force, ALL_VARIANTS, dataset)


def load_fold_metrics(run: str | Path) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    for p in sorted(Path(run).glob("fold*/*/metrics.json")):
        m = json.loads(p.read_text(encoding="utf-8"))
        out.setdefault(m["variant"], []).append(m)
    if not out:
        raise DataError(f"no completed folds under {run}")
    return out


def load_run_config(run: str | Path) -> ExperimentConfig:
    p = Path(run) / CONFIG_FILE
    if not p.is_file():
        raise DataError(f"{run} is not a run directory (no {CONFIG_FILE})")
    return ExperimentConfig(**parse_config_text(p.read_text(encoding="utf-8")))


def cmd_eval(run: str | Path, dataset: Dataset | None = None) -> dict[str, list[dict]]:
    """Re-evaluate every saved bundle of a run on its test folds without retraining."""
    run = Path(run)
    cfg = load_run_config(run)
    ds = dataset if dataset is not None else Dataset.load(cfg.data_dir, cfg.image_size)
    results: dict[str, list[dict]] = {}
    for bundle in sorted(run.glob("fold*/*/bundle")):
        fold = int(bundle.parent.parent.name[4:])
        v = Variant(bundle.parent.name)
        _, train, _, test = _fold_split(cfg, ds, fold)
        model = load_bundle(bundle, cfg.dnet(), cfg.cnet())
        store = LabelStore.read_jsonl(bundle / "labels.jsonl")
        m = evaluate_fold(model, test, ds, store, train)
        m.update(fold=fold, variant=v.value, p=cfg.p, seed=cfg.seed)
        _write_json(bundle.parent / "metrics_eval.json", _clean(m))
        results.setdefault(v.value, []).append(m)
    if not results:
        raise DataError(f"no model bundles under {run}")
    write_report(aggregate(results), run, stem="report_eval", title=f"re-evaluation p={cfg.p}")
    return results


def dedupe_p(p_list: Sequence[float]) -> list[float]:
    if not p_list:
        raise ConfigError("empty p list")
    out = []
    for p in p_list:
        if p in out:
            warnings.warn(f"duplicate p={p} ignored", stacklevel=2)
            continue
        out.append(p)
    return out


def cmd_sweep_p(cfg: ExperimentConfig, p_list: Sequence[float], force: bool = False,
                dataset: Dataset | None = None) -> tuple[Path, list[Path]]:
    """One training run per p with shared folds and seeds, then a combined report."""
    ps = dedupe_p(p_list)
    ds = dataset if dataset is not None else Dataset.load(cfg.data_dir, cfg.image_size)
    runs, results = [], {}
    for p in ps:
        run = cmd_train(cfg.replace(p=p), force, dataset=ds)
        runs.append(run)
        for v, ms in load_fold_metrics(run).items():
            results[f"p={p:g} {v}"] = ms
    sweep = Path(cfg.out_dir) / f"sweep-{cfg.replace(p=1.0).config_hash()}"
    sweep.mkdir(parents=True, exist_ok=True)
    _write_json(sweep / "runs.json", {f"{p:g}": str(r) for p, r in zip(ps, runs)})
    write_report(aggregate(results), sweep, title="p sweep")
    return sweep, runs


# ---------------------------------------------------------------------------
# visualization


@dataclass
class Overlay:
    image_id: str
    label: int
    original: BoundingBox
    stored: BoundingBox
    predicted: BoundingBox
    probabilities: dict[str, float] = field(default_factory=dict)  # true-class probability per box


def find_image(run: Path, image_id: str) -> tuple[Path, str]:
    """Bundle directory that trained (or tested) on ``image_id``; training folds preferred."""
    test_hit = None
    for bundle in sorted(run.glob("fold*/*/bundle")):
        store = LabelStore.read_jsonl(bundle / "labels.jsonl")
        if image_id in store:
            return bundle, "train"
        m = json.loads((bundle.parent / "metrics.json").read_text(encoding="utf-8"))
        if test_hit is None and image_id in m.get("predictions", {}):
            test_hit = bundle
    if test_hit is not None:
        return test_hit, "test"
    raise KeyError(f"unknown image id {image_id!r}")


def build_overlay(run: str | Path, image_id: str, dataset: Dataset | None = None) -> Overlay:
    run = Path(run)
    cfg = load_run_config(run)
    ds = dataset if dataset is not None else Dataset.load(cfg.data_dir, cfg.image_size)
    recs = {r.image_id: r for r in ds.records}
    if image_id not in recs:
        raise KeyError(f"unknown image id {image_id!r}")
    rec = recs[image_id]
    bundle, _ = find_image(run, image_id)
    model = load_bundle(bundle, cfg.dnet(), cfg.cnet())
    store = LabelStore.read_jsonl(bundle / "labels.jsonl")
    entry = store[image_id] if image_id in store else None
    original = rec.manual_roi
    stored = entry.current_roi if entry is not None else original
    predicted = evaluate_cascade(model, TensorSet.from_records([rec]))[0][0]
    ov = Overlay(image_id, rec.label, original, stored, predicted)
    for name, box in (("original", original), ("stored", stored), ("predicted", predicted)):
        ov.probabilities[name] = score_candidate(model.classifier, crop_roi(rec.pixels, box), rec.label)
    return ov


COLORS = {"original": (255, 200, 0), "stored": (0, 220, 255), "predicted": (255, 60, 60)}


def render_overlay(pixels: np.ndarray, ov: Overlay, scale: int = 2):
    from PIL import Image, ImageDraw

    H, W = pixels.shape
    img = Image.fromarray((np.clip(pixels, 0, 1) * 255).astype(np.uint8)).convert("RGB")
    img = img.resize((W * scale, H * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for j, name in enumerate(("original", "stored", "predicted")):
        b = getattr(ov, name).clip(W, H)
        x1, y1, x2, y2 = (v * scale for v in b.as_xyxy())
        draw.rectangle([x1, y1, min(x2, W * scale - 1), min(y2, H * scale - 1)], outline=COLORS[name], width=2)
        draw.text((4, 4 + 12 * j), f"{name} PP={ov.probabilities[name]:.3f}", fill=COLORS[name])
    return img


def cmd_visualize(run: str | Path, image_ids: Sequence[str], out: str | Path | None = None,
                  dataset: Dataset | None = None) -> list[Path]:
    run = Path(run)
    cfg = load_run_config(run)
    ds = dataset if dataset is not None else Dataset.load(cfg.data_dir, cfg.image_size)
    recs = {r.image_id: r for r in ds.records}
    missing = [i for i in image_ids if i not in recs]
    if missing:
        raise KeyError(f"unknown image ids {missing}")
    out = Path(out) if out is not None else run / "overlays"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in image_ids:
        ov = build_overlay(run, i, ds)
        p = out / f"{i}.png"
        render_overlay(recs[i].pixels, ov).save(p)
        _write_json(out / f"{i}.json", {"image_id": i, "label": ov.label,
                                         **{k: getattr(ov, k).to_list() for k in ("original", "stored", "predicted")},
                                         "probabilities": ov.probabilities})
        paths.append(p)
    return paths
