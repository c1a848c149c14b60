"""Domain types and the JSON annotation schema for compound figures."""

from __future__ import annotations

import json
import logging
import math
import os
import string
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_ALPHABET = tuple(string.ascii_lowercase)
CATEGORIES = ("microscopy", "parent", "diffraction", "graph", "illustration")
SPLITS = ("train", "test")


class ManifestError(ValueError):
    """Raised when a manifest violates the schema or a record invariant."""

    def __init__(self, message, record_id=None):
        self.record_id = record_id
        if record_id is not None:
            message = f"record {record_id!r}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class BBox:
    """Half-open pixel rectangle ``[x_min, x_max) x [y_min, y_max)``."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def within(self, width, height):
        return self.x_max <= width and self.y_max <= height

    def contains_point(self, x, y):
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    def intersects(self, other):
        return (
            self.x_min < other.x_max
            and other.x_min < self.x_max
            and self.y_min < other.y_max
            and other.y_min < self.y_max
        )

    def clip(self, width, height):
        """Clamp to ``[0, width) x [0, height)``; returns None if nothing is left."""
        x0 = min(max(self.x_min, 0.0), width)
        y0 = min(max(self.y_min, 0.0), height)
        x1 = min(max(self.x_max, 0.0), width)
        y1 = min(max(self.y_max, 0.0), height)
        if x0 >= x1 or y0 >= y1:
            return None
        return BBox(x0, y0, x1, y1)

    def scaled(self, sx, sy=None):
        sy = sx if sy is None else sy
        return BBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)

    @classmethod
    def from_xyxy(cls, xyxy):
        return cls(*(float(v) for v in xyxy))


def normalize_letter(letter):
    if not isinstance(letter, str) or len(letter) != 1 or not letter.isalpha():
        raise ValueError(f"not a single letter: {letter!r}")
    return letter.lower()


@dataclass(frozen=True)
class SubfigureLabel:
    letter: str
    box: BBox
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "letter", normalize_letter(self.letter))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class MasterImage:
    box: BBox
    category: str
    letter: Optional[str] = None
    confidence: float = 1.0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.letter is not None:
            object.__setattr__(self, "letter", normalize_letter(self.letter))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class FigureRecord:
    image_id: str
    width: int
    height: int
    caption: str = ""
    labels: tuple = ()
    masters: tuple = ()
    split: Optional[str] = None
    image_path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "masters", tuple(self.masters))

    def validate(self, alphabet=DEFAULT_ALPHABET, categories=CATEGORIES):
        rid = self.image_id
        if self.width <= 0 or self.height <= 0:
            raise ManifestError("image dimensions must be positive", rid)
        if self.split is not None and self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}", rid)
        letters = set()
        for lab in self.labels:
            if lab.letter not in alphabet:
                raise ManifestError(f"label letter {lab.letter!r} not in alphabet", rid)
            if not lab.box.within(self.width, self.height):
                raise ManifestError(f"label box {lab.box.as_tuple()} out of image bounds", rid)
            letters.add(lab.letter)
        seen = set()
        for m in self.masters:
            if m.category not in categories:
                raise ManifestError(f"unknown category {m.category!r}", rid)
            if not m.box.within(self.width, self.height):
                raise ManifestError(f"master box {m.box.as_tuple()} out of image bounds", rid)
            if m.letter is not None:
                if m.letter not in letters:
                    raise ManifestError(
                        f"master letter {m.letter!r} has no matching subfigure label", rid
                    )
                if m.letter in seen:
                    raise ManifestError(f"letter {m.letter!r} governs two master images", rid)
                seen.add(m.letter)
        return self

    def load_image(self, root=None):
        from PIL import Image

        if self.image_path is None:
            raise FileNotFoundError(f"record {self.image_id!r} has no image path")
        path = self.image_path
        if root is not None and not os.path.isabs(path):
            path = os.path.join(root, path)
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    alphabet: tuple = DEFAULT_ALPHABET
    categories: tuple = CATEGORIES
    root: Optional[str] = None
    n_skipped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "alphabet", tuple(normalize_letter(a) for a in self.alphabet))
        object.__setattr__(self, "categories", tuple(self.categories))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self):
        if not self.records:
            raise ManifestError("empty manifest")
        unknown = set(self.categories) - set(CATEGORIES)
        if unknown:
            raise ManifestError(f"unknown categories {sorted(unknown)}")
        ids = Counter(r.image_id for r in self.records)
        dupes = [k for k, v in ids.items() if v > 1]
        if dupes:
            raise ManifestError(f"duplicate image ids {dupes[:5]}")
        for rec in self.records:
            rec.validate(self.alphabet, self.categories)
        return self

    def subset(self, split):
        return replace(self, records=tuple(r for r in self.records if r.split == split))

    def to_dict(self):
        return {
            "alphabet": list(self.alphabet),
            "categories": list(self.categories),
            "records": [record_to_dict(r) for r in self.records],
        }


def _box_fields(box):
    return {
        "x_min": _num(box.x_min),
        "y_min": _num(box.y_min),
        "x_max": _num(box.x_max),
        "y_max": _num(box.y_max),
    }


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


def record_to_dict(rec):
    return {
        "image_id": rec.image_id,
        "image_path": rec.image_path,
        "width": rec.width,
        "height": rec.height,
        "caption": rec.caption,
        "split": rec.split,
        "labels": [{"letter": lab.letter, **_box_fields(lab.box)} for lab in rec.labels],
        "masters": [
            {"category": m.category, "letter": m.letter, **_box_fields(m.box)} for m in rec.masters
        ],
    }


def _parse_box(d, rid):
    try:
        return BBox(*(float(d[k]) for k in ("x_min", "y_min", "x_max", "y_max")))
    except KeyError as exc:
        raise ManifestError(f"missing box field {exc.args[0]!r}", rid) from None
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"malformed box: {exc}", rid) from None


def record_from_dict(d):
    if not isinstance(d, dict):
        raise ManifestError(f"record must be an object, got {type(d).__name__}")
    rid = d.get("image_id")
    if not isinstance(rid, str) or not rid:
        raise ManifestError("missing or malformed image_id")
    try:
        width, height = int(d["width"]), int(d["height"])
    except KeyError as exc:
        raise ManifestError(f"missing field {exc.args[0]!r}", rid) from None
    except (TypeError, ValueError):
        raise ManifestError("malformed width/height", rid) from None
    try:
        labels = [
            SubfigureLabel(lab["letter"], _parse_box(lab, rid)) for lab in d.get("labels") or []
        ]
        masters = [
            MasterImage(_parse_box(m, rid), m["category"], m.get("letter"))
            for m in d.get("masters") or []
        ]
    except KeyError as exc:
        raise ManifestError(f"missing field {exc.args[0]!r}", rid) from None
    except ValueError as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(str(exc), rid) from None
    return FigureRecord(
        image_id=rid,
        width=width,
        height=height,
        caption=d.get("caption") or "",
        labels=labels,
        masters=masters,
        split=d.get("split"),
        image_path=d.get("image_path"),
    )


def manifest_from_dict(doc, root=None, check_images=True):
    if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
        raise ManifestError("manifest must be an object with a 'records' list")
    alphabet = doc.get("alphabet") or DEFAULT_ALPHABET
    categories = doc.get("categories") or CATEGORIES
    records = []
    skipped = 0
    for raw in doc["records"]:
        rec = record_from_dict(raw)
        if check_images and rec.image_path:
            path = rec.image_path
            if root is not None and not os.path.isabs(path):
                path = os.path.join(root, path)
            if not os.path.exists(path):
                logger.warning("skipping %s: image file %s not found", rec.image_id, path)
                skipped += 1
                continue
        records.append(rec)
    if skipped:
        logger.warning("%d record(s) skipped for missing image files", skipped)
    manifest = DatasetManifest(
        records=records,
        alphabet=alphabet,
        categories=categories,
        root=root,
        n_skipped=skipped,
    )
    return manifest.validate()


def load_manifest(path, check_images=True):
    """Load and validate a manifest JSON file.

    Image paths are resolved relative to the manifest's directory. Records whose
    image file is missing are skipped with a warning and counted in
    ``n_skipped`` when ``check_images`` is true.
    """
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON: {exc}") from None
    root = os.path.dirname(os.path.abspath(path))
    return manifest_from_dict(doc, root=root, check_images=check_images)


def save_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)


def letter_histogram(manifest):
    counts = {letter: 0 for letter in manifest.alphabet}
    for rec in manifest.records:
        for lab in rec.labels:
            counts[lab.letter] = counts.get(lab.letter, 0) + 1
    return counts


def split(manifest, ratio=0.8, seed=0):
    """Partition records into train and test manifests.

    Records already tagged ``train``/``test`` keep their tag; untagged records
    are shuffled with ``seed`` and the first ``round(ratio * n)`` go to train.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    tagged_train = [r for r in manifest.records if r.split == "train"]
    tagged_test = [r for r in manifest.records if r.split == "test"]
    untagged = [r for r in manifest.records if r.split is None]
    order = np.random.default_rng(seed).permutation(len(untagged))
    n_train = int(round(ratio * len(untagged)))
    train = tagged_train + [replace(untagged[i], split="train") for i in order[:n_train]]
    test = tagged_test + [replace(untagged[i], split="test") for i in order[n_train:]]
    if not train or not test:
        raise ValueError(f"split produced an empty partition ({len(train)} train / {len(test)} test)")
    return replace(manifest, records=tuple(train)), replace(manifest, records=tuple(test))


def records_by_letter(labels: Iterable[SubfigureLabel]) -> dict:
    return {lab.letter: lab for lab in labels}


def dedupe_letters(labels: Sequence[SubfigureLabel]) -> list:
    """Keep the most confident label per letter, ordered by letter."""
    best = {}
    for lab in labels:
        if lab.letter not in best or lab.confidence > best[lab.letter].confidence:
            best[lab.letter] = lab
    return [best[k] for k in sorted(best)]
