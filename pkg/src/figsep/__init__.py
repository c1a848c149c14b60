"""Compound figure separation: subfigure-label detection plus label-conditioned master-image detection."""

from .annotation import (
    BBox,
    DatasetManifest,
    FigureRecord,
    ManifestError,
    MasterImage,
    SubfigureLabel,
    load_manifest,
    save_manifest,
    split,
)
from .caption import associate_caption
from .classifier import LabelClassifier
from .label_detector import LabelDetector, detect_labels
from .master_detector import MasterDetector, decode_masters
from .metrics import Detection, EvalReport, evaluate_detections, iou, mean_ap, nms
from .pipeline import PipelineConfig, SeparationResult, evaluate_pipeline, separate

__all__ = [
    "BBox",
    "DatasetManifest",
    "FigureRecord",
    "ManifestError",
    "MasterImage",
    "SubfigureLabel",
    "load_manifest",
    "save_manifest",
    "split",
    "associate_caption",
    "LabelClassifier",
    "LabelDetector",
    "detect_labels",
    "MasterDetector",
    "decode_masters",
    "Detection",
    "EvalReport",
    "evaluate_detections",
    "iou",
    "mean_ap",
    "nms",
    "PipelineConfig",
    "SeparationResult",
    "evaluate_pipeline",
    "separate",
]
__version__ = "0.1.0"
