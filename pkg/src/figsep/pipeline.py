"""End-to-end separation: labels, masks, masters, captions, crops."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from PIL import Image

from .annotation import BBox, dedupe_letters
from .caption import associate_caption, caption_letters
from .classifier import LabelClassifier
from .label_detector import LabelDetector, detect_labels
from .master_detector import MasterDetector, evaluate_masters
from .metrics import Detection, evaluate_detections, nms

logger = logging.getLogger(__name__)

STATUSES = ("ok", "no-labels", "partial")
EXIT_OK, EXIT_ERROR, EXIT_INCOMPLETE = 0, 1, 2


class PipelineError(RuntimeError):
    """Unrecoverable input or configuration problem (exit code 1)."""


@dataclass
class PipelineConfig:
    """Checkpoints and run-time knobs for :func:`separate`.

    Relative checkpoint paths are resolved against ``base_dir`` (the config
    file's directory when loaded with :meth:`from_file`).
    """

    classifier: Optional[str] = None
    label_detector: Optional[str] = None
    master_detector: Optional[str] = None
    label_conf: float = 0.25
    label_nms: float = 0.45
    # labels of different letters never overlap; a second suppression pass
    # across letters drops the weaker of two overlapping candidates
    cross_letter_iou: float = 0.2
    eval_label_conf: float = 0.01
    eval_master_labels: str = "detected"
    weak_master_conf: float = 0.3
    associate_captions: bool = True
    write_crops: bool = True
    output_dir: Optional[str] = None
    workers: int = 1
    base_dir: Optional[str] = None

    def __post_init__(self):
        if not 0 < self.label_nms <= 1 or not 0 < self.cross_letter_iou <= 1:
            raise ValueError("NMS thresholds must lie in (0, 1]")
        if not 0 <= self.label_conf <= 1 or not 0 <= self.eval_label_conf <= 1:
            raise ValueError("confidence thresholds must lie in [0, 1]")
        if self.eval_master_labels not in ("detected", "ground-truth"):
            raise ValueError("eval_master_labels must be 'detected' or 'ground-truth'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        """Build from a config document: ``checkpoints`` plus an optional ``pipeline`` section."""
        ck = doc.get("checkpoints", {})
        known = {f.name for f in fields(cls)}
        opts = dict(doc.get("pipeline", {}))
        unknown = set(opts) - known
        if unknown:
            raise ValueError(f"unknown pipeline options {sorted(unknown)}")
        return cls(
            classifier=ck.get("classifier"),
            label_detector=ck.get("label_detector"),
            master_detector=ck.get("master_detector"),
            base_dir=base_dir,
            **opts,
        )

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(doc, base_dir=os.path.dirname(os.path.abspath(path)))

    def resolve(self, path):
        if path is None:
            return None
        if self.base_dir and not os.path.isabs(path):
            return os.path.join(self.base_dir, path)
        return path

    def to_dict(self):
        return asdict(self)


@dataclass
class Models:
    classifier: Optional[LabelClassifier]
    label_detector: LabelDetector
    master_detector: MasterDetector


def load_models(config):
    """Load and cross-check the three checkpoints named by ``config``."""
    paths = {k: config.resolve(getattr(config, k)) for k in ("classifier", "label_detector", "master_detector")}
    for k in ("label_detector", "master_detector"):
        if paths[k] is None:
            raise PipelineError(f"config names no {k.replace('_', ' ')} checkpoint")
    for k, p in paths.items():
        if p is not None and not os.path.exists(p):
            raise PipelineError(f"{k.replace('_', ' ')} checkpoint not found: {p}")
    classifier = LabelClassifier.load(paths["classifier"]) if paths["classifier"] else None
    try:
        detector = LabelDetector.load(paths["label_detector"], classifier=classifier)
    except ValueError as exc:
        raise PipelineError(f"checkpoint mismatch: {exc}") from None
    if detector.recognition == "classifier" and classifier is None:
        raise PipelineError("label detector recognises through a classifier but none is configured")
    detector.set_params(conf_threshold=config.label_conf, nms_iou=config.label_nms)
    masters = MasterDetector.load(paths["master_detector"])
    return Models(classifier, detector, masters)


@dataclass
class SeparationEntry:
    letter: str
    box: BBox
    category: str
    confidence: float
    label_box: BBox
    caption: Optional[str] = None
    crop_path: Optional[str] = None

    def to_dict(self):
        return {
            "letter": self.letter,
            "box": list(self.box.as_tuple()),
            "category": self.category,
            "confidence": self.confidence,
            "label_box": list(self.label_box.as_tuple()),
            "caption": self.caption,
            "crop_path": self.crop_path,
        }


@dataclass
class SeparationResult:
    figure_id: str
    entries: list = field(default_factory=list)
    status: str = "ok"
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        letters = [e.letter for e in self.entries]
        if len(set(letters)) != len(letters):
            raise ValueError(f"duplicate letters in entries: {letters}")
        if (self.status == "no-labels") != (not self.entries):
            raise ValueError("status no-labels holds exactly when there are no entries")

    @property
    def letters(self):
        return [e.letter for e in self.entries]

    def to_dict(self):
        return {
            "figure_id": self.figure_id,
            "status": self.status,
            "entries": [e.to_dict() for e in self.entries],
            "warnings": list(self.warnings),
        }


def read_image(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise PipelineError(f"cannot read image {path}: {exc}") from None


def clean_labels(labels, cross_letter_iou=0.2):
    """Drop weaker overlapping candidates across letters, then keep one label per letter."""
    kept = nms([Detection(l.box, None, l.confidence) for l in labels], cross_letter_iou)
    ids = {id(d.box) for d in kept}
    return dedupe_letters([l for l in labels if id(l.box) in ids])


def pixel_box(box, width, height):
    """Smallest integer box covering ``box``, clipped to the image."""
    x0 = min(max(0, math.floor(box.x_min)), width - 1)
    y0 = min(max(0, math.floor(box.y_min)), height - 1)
    x1 = max(x0 + 1, min(width, math.ceil(box.x_max)))
    y1 = max(y0 + 1, min(height, math.ceil(box.y_max)))
    return BBox(x0, y0, x1, y1)


def separate(image, caption, config, models=None, figure_id=None, labels=None):
    """Separate one compound figure.

    ``image`` is a path or an HxWx3 array. ``caption`` may be ``None`` to skip
    caption association. ``labels`` overrides label detection (e.g. ground
    truth). Never raises on a figure without labels: the result then has status
    ``no-labels`` and no crops.
    """
    if isinstance(image, (str, os.PathLike)):
        if figure_id is None:
            figure_id = os.path.splitext(os.path.basename(str(image)))[0]
        img = read_image(image)
    else:
        img = np.asarray(image)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
            raise PipelineError(f"not an image: shape {img.shape}")
    figure_id = figure_id or "figure"
    models = models or load_models(config)
    H, W = img.shape[:2]
    warnings = []

    if labels is None:
        labels = detect_labels(models.label_detector, img, config.label_conf)
    labels = clean_labels(labels, config.cross_letter_iou)
    if not labels:
        warnings.append("no subfigure labels detected; master detection needs at least one label")
        return SeparationResult(figure_id, [], "no-labels", warnings)

    preds = models.master_detector.predict_one(img, labels)
    by_letter = {l.letter: l for l in labels}
    spans = {}
    status = "ok"
    if caption is not None and config.associate_captions:
        letters = [p.letter for p in preds]
        spans = associate_caption(caption, letters)
        unmatched = [l for l in letters if l not in spans]
        orphans = sorted(caption_letters(caption) - set(letters))
        if unmatched:
            warnings.append(f"letters without a caption marker: {''.join(unmatched)}")
        if orphans:
            warnings.append(f"caption markers without a detected label: {''.join(orphans)}")
        if unmatched or orphans:
            status = "partial"

    out_dir = None
    if config.write_crops and config.output_dir:
        out_dir = os.path.join(config.output_dir, figure_id)
        os.makedirs(out_dir, exist_ok=True)
    entries = []
    for p in preds:
        box = pixel_box(p.refined_box, W, H)
        if p.confidence < config.weak_master_conf:
            warnings.append(f"label {p.letter!r} has no convincing master region (confidence {p.confidence:.2f})")
        crop_path = None
        if out_dir is not None:
            crop_path = os.path.join(out_dir, f"{p.letter}.png")
            x0, y0, x1, y1 = (int(v) for v in box.as_tuple())
            Image.fromarray(np.ascontiguousarray(img[y0:y1, x0:x1])).save(crop_path)
        entries.append(
            SeparationEntry(p.letter, box, p.category, p.confidence, by_letter[p.letter].box, spans.get(p.letter), crop_path)
        )
    result = SeparationResult(figure_id, entries, status, warnings)
    if out_dir is not None:
        with open(os.path.join(out_dir, "result.json"), "w") as fh:
            json.dump(result.to_dict(), fh, indent=1)
    return result


def separate_many(items, config, models=None):
    """Run :func:`separate` over ``(image, caption, figure_id)`` triples with a bounded pool.

    Results come back in input order. Per-figure hard errors are turned into
    :class:`PipelineError` instances in the output list instead of aborting the batch.
    """
    models = models or load_models(config)

    def one(item):
        image, caption, fid = item
        fid = fid or (os.path.splitext(os.path.basename(str(image)))[0] if isinstance(image, (str, os.PathLike)) else "figure")
        try:
            return separate(image, caption, config, models=models, figure_id=fid)
        except PipelineError as exc:
            logger.error("%s: %s", fid, exc)
            return exc

    items = list(items)
    if config.workers == 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(one, items))


def exit_code(results):
    """0 when every figure is ok, 1 on any hard error, otherwise 2."""
    if any(isinstance(r, Exception) for r in results):
        return EXIT_ERROR
    if any(r.status != "ok" for r in results):
        return EXIT_INCOMPLETE
    return EXIT_OK


def evaluate_pipeline(manifest, config, models=None, images=None):
    """Label-detection and master-detection reports on the manifest's test split.

    Returns ``(label_report, master_report)``: per-letter AP over the label
    detector's alphabet and class-agnostic master AP@0.5. ``images`` may map
    image ids to arrays to skip reading from disk.
    """
    test = manifest.subset("test")
    if not len(test):
        raise ValueError("manifest has an empty test split")
    models = models or load_models(config)
    det = models.label_detector
    label_pairs, master_preds, master_gts = [], [], []
    for rec in test:
        img = images[rec.image_id] if images is not None else rec.load_image(manifest.root)
        found = detect_labels(det, img, config.eval_label_conf)
        label_pairs.append(
            ([Detection(l.box, l.letter, l.confidence) for l in found], [(l.letter, l.box) for l in rec.labels])
        )
        if config.eval_master_labels == "ground-truth":
            cond = list(rec.labels)
        else:
            cond = clean_labels([l for l in found if l.confidence >= config.label_conf], config.cross_letter_iou)
        master_preds.append(models.master_detector.predict_one(img, cond) if cond else [])
        master_gts.append(list(rec.masters))
    label_report = evaluate_detections(label_pairs, classes=list(det.alphabet))
    master_report = evaluate_masters(master_preds, master_gts)
    return label_report, master_report


def fully_matched(result, record):
    """Whether ``result`` recovered exactly the record's letters, each with a caption span."""
    if isinstance(result, Exception) or result.status != "ok":
        return False
    expected = sorted(l.letter for l in record.labels)
    return sorted(result.letters) == expected and all(e.caption is not None for e in result.entries)
