"""Two-stage weakly supervised lesion detection and diagnosis for grayscale ultrasound images."""

from .data import BoundingBox, DataError, ImageRecord, load_manifest
from .labels import LabelStore, Origin
from .refine import RefinementConfig, run_stage1
from .joint import Stage2Config, TSDDNet, infer, run_stage2

__version__ = "0.1.0"

__all__ = ["BoundingBox", "DataError", "ImageRecord", "load_manifest", "LabelStore", "Origin", "RefinementConfig",
           "run_stage1", "Stage2Config", "TSDDNet", "infer", "run_stage2"]
