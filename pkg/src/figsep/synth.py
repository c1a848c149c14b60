"""Synthetic training data: letter patches and whole compound figures.

All generators are pure functions of their configuration and an integer seed
(plus a sample index for streams), so samples can be produced in any order or
in parallel and still be reproduced exactly.
"""

from __future__ import annotations

import itertools
import logging
import os
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .annotation import CATEGORIES, BBox, FigureRecord, MasterImage, SubfigureLabel, normalize_letter

logger = logging.getLogger(__name__)

FONT_DIR = os.path.join(os.path.dirname(__file__), "fonts")
FONT_SET_VERSION = "dejavu-2.37"
DEFAULT_FONTS = (
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSerif-Bold.ttf",
    "DejaVuSansMono.ttf",
)
DECORATIONS = {"plain": "{}", "paren": "({})", "close": "{})"}
CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")

# Panel-count distribution for synthetic corpora. Only 8-panel figures carry an
# "h", so P(8) = 69/794 reproduces the a:h imbalance of the training corpus.
IMBALANCED_LAYOUT = {2: 0.30, 3: 0.27, 4: 0.22, 6: 0.1231, 8: 69 / 794}
UNIFORM_LAYOUT = {2: 0.2, 3: 0.2, 4: 0.2, 6: 0.2, 8: 0.2}
_FACTORIZATIONS = {
    1: ((1, 1),),
    2: ((1, 2), (2, 1)),
    3: ((1, 3), (3, 1)),
    4: ((2, 2), (1, 4)),
    6: ((2, 3), (3, 2)),
    8: ((2, 4), (4, 2)),
}

_DESCRIPTIONS = {
    "microscopy": ("SEM image", "TEM micrograph", "HRTEM image", "optical micrograph"),
    "parent": ("photograph of the sample", "overview image", "low-magnification view"),
    "diffraction": ("SAED pattern", "XRD pattern", "electron diffraction pattern"),
    "graph": ("I-V curve", "absorption spectrum", "cycling performance", "Raman spectra"),
    "illustration": ("schematic of the device", "reaction scheme", "structure model"),
}


@dataclass(frozen=True)
class SynthConfig:
    alphabet: tuple = tuple("abcdefgh")
    fonts: tuple = DEFAULT_FONTS
    patch_size: tuple = (24, 40)
    case_randomization: bool = True
    letter_scale: tuple = (0.45, 0.8)
    seed: int = 0
    class_weights: Optional[dict] = None
    decoration: str = "plain"
    min_font_px: int = 7

    def __post_init__(self):
        object.__setattr__(self, "alphabet", tuple(normalize_letter(a) for a in self.alphabet))
        lo, hi = self.patch_size
        if not 0 < lo <= hi:
            raise ValueError(f"empty patch size range {self.patch_size}")
        slo, shi = self.letter_scale
        if not 0 < slo <= shi <= 1:
            raise ValueError(f"letter scale range must lie in (0, 1], got {self.letter_scale}")
        if not self.fonts:
            raise ValueError("at least one font is required")
        if self.decoration not in DECORATIONS and self.decoration != "mixed":
            raise ValueError(f"unknown decoration {self.decoration!r}")
        w = self.weights()
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("class weights must be >= 0 with at least one positive")

    def weights(self):
        if self.class_weights is None:
            return np.ones(len(self.alphabet))
        return np.array([float(self.class_weights.get(a, 0.0)) for a in self.alphabet])

    def probabilities(self):
        w = self.weights()
        return w / w.sum()


@dataclass(frozen=True)
class SynthFigureSpec:
    rows: int = 2
    cols: int = 2
    panel_size: tuple = (64, 64)  # (height, width)
    label_corner: str = "top-left"
    texture_family: str = "mixed"
    seed: int = 0
    gutter: int = 3
    label_px: tuple = (11, 15)
    labelled: bool = True  # False draws no letters: masters come back with letter None
    label_dropout: float = 0.0  # per-panel chance of leaving a labelled figure's panel unlettered

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if self.label_corner not in CORNERS + ("random",):
            raise ValueError(f"unknown label corner {self.label_corner!r}")
        if self.texture_family != "mixed" and self.texture_family not in CATEGORIES:
            raise ValueError(f"unknown texture family {self.texture_family!r}")
        if not 0.0 <= self.label_dropout < 1.0:
            raise ValueError(f"label dropout must lie in [0, 1), got {self.label_dropout}")

    @property
    def n_panels(self):
        return self.rows * self.cols

    @property
    def image_size(self):
        return self.rows * self.panel_size[0], self.cols * self.panel_size[1]


def font_path(name):
    if os.path.isabs(name) or os.path.exists(name):
        return name
    return os.path.join(FONT_DIR, name)


@lru_cache(maxsize=4096)
def _glyph_alpha(font, size, text):
    """Tightly cropped antialiased coverage mask of ``text``, as uint8."""
    f = ImageFont.truetype(font_path(font), size)
    l, t, r, b = f.getbbox(text)
    canvas = Image.new("L", (r - l + 4, b - t + 4), 0)
    ImageDraw.Draw(canvas).text((2 - l, 2 - t), text, font=f, fill=255)
    a = np.asarray(canvas)
    ys, xs = np.nonzero(a > 40)
    if len(ys) == 0:
        raise ValueError(f"font {font} renders nothing for {text!r}")
    return a[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1].copy()


def render_glyph(text, font, height_px):
    """Glyph coverage mask whose ink height is close to ``height_px``."""
    size = max(4, int(round(height_px)))
    alpha = _glyph_alpha(font, size, text)
    # rescale once so the ink height tracks the request across fonts and letters
    ratio = height_px / alpha.shape[0]
    if abs(ratio - 1) > 0.08:
        size = max(4, int(round(size * ratio)))
        alpha = _glyph_alpha(font, size, text)
    return alpha


def _blend(image, alpha, x, y, color):
    h, w = alpha.shape
    region = image[y : y + h, x : x + w].astype(np.float32)
    a = (alpha.astype(np.float32) / 255.0)[..., None]
    region = region * (1 - a) + np.asarray(color, np.float32) * a
    image[y : y + h, x : x + w] = np.clip(region + 0.5, 0, 255).astype(np.uint8)


def _luminance(region):
    r = region.astype(np.float32)
    return r[..., 0] * 0.299 + r[..., 1] * 0.587 + r[..., 2] * 0.114


def _draw_glyph(image, alpha, x, y):
    """Blend a glyph in whichever of black/white stays legible over its ink pixels.

    When neither colour is legible on most of the ink (busy or split
    backgrounds), a contrasting backing box is filled behind the glyph first,
    the way figure authors typically make labels readable.
    """
    h, w = alpha.shape
    lum = _luminance(image[y : y + h, x : x + w])
    ink = alpha > 127
    if not ink.any():
        ink = alpha > 0
    dark_bad = float(np.mean(lum[ink] < 100))  # black ink vanishes on dark pixels
    light_bad = float(np.mean(lum[ink] > 155))  # white ink vanishes on light pixels
    color = (0, 0, 0) if dark_bad <= light_bad else (255, 255, 255)
    if min(dark_bad, light_bad) > 0.15:
        H, W = image.shape[:2]
        backing = 255 - color[0]
        image[max(0, y - 1) : min(H, y + h + 1), max(0, x - 1) : min(W, x + w + 1)] = backing
    _blend(image, alpha, x, y, color)


def _letter_text(letter, rng, cfg):
    if cfg.case_randomization and rng.random() < 0.5:
        letter = letter.upper()
    deco = cfg.decoration
    if deco == "mixed":
        deco = ("plain", "paren", "close")[rng.integers(3)]
    return DECORATIONS[deco].format(letter)


def paste_letter(patch, letter, cfg, seed):
    """Render ``letter`` fully inside ``patch``.

    Returns the new image and the case-normalized class letter.
    """
    cls = normalize_letter(letter)
    rng = np.random.default_rng(seed)
    patch = np.array(patch, dtype=np.uint8, copy=True)
    h, w = patch.shape[:2]
    font = cfg.fonts[rng.integers(len(cfg.fonts))]
    text = _letter_text(cls, rng, cfg)
    side = min(h, w)
    smallest = render_glyph(text, font, max(cfg.min_font_px, cfg.letter_scale[0] * side))
    if smallest.shape[0] > h or smallest.shape[1] > w:
        raise ValueError(f"glyph {text!r} does not fit a {h}x{w} patch at minimum scale")
    scale = rng.uniform(*cfg.letter_scale)
    alpha = render_glyph(text, font, max(cfg.min_font_px, scale * side))
    if alpha.shape[0] > h or alpha.shape[1] > w:
        alpha = smallest
    gh, gw = alpha.shape
    x = int(rng.integers(0, w - gw + 1))
    y = int(rng.integers(0, h - gh + 1))
    _draw_glyph(patch, alpha, x, y)
    return patch, cls


def crop_background_patches(figure, labels, n, cfg, seed=0, max_attempts=None):
    """Square patches of ``figure`` that avoid every label box."""
    figure = np.asarray(figure)
    h, w = figure.shape[:2]
    lo, hi = cfg.patch_size
    if min(h, w) < lo:
        raise ValueError(f"figure {h}x{w} smaller than the minimum patch size {lo}")
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    boxes = [getattr(lab, "box", lab) for lab in labels]
    budget = max_attempts if max_attempts is not None else 50 * n
    out = []
    for _ in range(budget):
        s = int(rng.integers(lo, min(hi, h, w) + 1))
        x = int(rng.integers(0, w - s + 1))
        y = int(rng.integers(0, h - s + 1))
        cand = BBox(x, y, x + s, y + s)
        if any(cand.intersects(b) for b in boxes):
            continue
        out.append(figure[y : y + s, x : x + s].copy())
        if len(out) == n:
            break
    if len(out) < n:
        logger.warning("only %d of %d background patches found in %d attempts", len(out), n, budget)
    return out


def sample_at(cfg, backgrounds, k):
    """The ``k``-th element of the synthetic stream for ``cfg``."""
    if len(backgrounds) == 0:
        raise ValueError("empty background pool")
    rng = np.random.default_rng([cfg.seed, k])
    cls = cfg.alphabet[rng.choice(len(cfg.alphabet), p=cfg.probabilities())]
    bg = np.asarray(backgrounds[rng.integers(len(backgrounds))])
    if rng.random() < 0.5:
        bg = bg[:, ::-1]
    return paste_letter(bg, cls, cfg, seed=[cfg.seed, k, 1])


def sample_stream(cfg, backgrounds, start=0):
    """Unbounded stream of ``(image, letter)`` drawn on the fly."""
    if len(backgrounds) == 0:
        raise ValueError("empty background pool")
    for k in itertools.count(start):
        yield sample_at(cfg, backgrounds, k)


# -- textures ---------------------------------------------------------------


def _smooth_noise(rng, h, w, cells):
    low = rng.random((max(2, h // cells), max(2, w // cells))).astype(np.float32)
    img = Image.fromarray((low * 255).astype(np.uint8)).resize((w, h), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32) / 255.0


def _microscopy(rng, h, w):
    base = 0.6 * _smooth_noise(rng, h, w, int(rng.integers(3, 8))) + 0.4 * rng.random((h, w))
    lo, hi = sorted(rng.uniform(0.1, 0.9, 2))
    g = lo + (hi - lo + 0.2) * base
    return np.repeat(np.clip(g * 255, 0, 255)[..., None], 3, axis=2)


def _diffraction(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    cy, cx = h / 2 + rng.uniform(-3, 3), w / 2 + rng.uniform(-3, 3)
    r = np.hypot(yy - cy, xx - cx)
    freq = rng.uniform(0.35, 0.8)
    rings = 0.5 + 0.5 * np.cos(r * freq)
    img = rings * np.exp(-r / rng.uniform(10, 25)) + 0.08 * rng.random((h, w))
    img = np.clip(img * 255, 0, 255)
    return np.repeat(img[..., None], 3, axis=2)


def _graph(rng, h, w):
    im = Image.new("RGB", (w, h), (255, 255, 255))
    d = ImageDraw.Draw(im)
    x0, y1 = 6, h - 7
    d.line([(x0, 3), (x0, y1), (w - 3, y1)], fill=(0, 0, 0), width=1)
    for k in range(int(rng.integers(1, 3))):
        color = tuple(int(c) for c in rng.integers(0, 200, 3))
        xs = np.linspace(x0 + 1, w - 4, 12)
        ys = np.cumsum(rng.normal(0, 0.15 * h / 4, 12)) + rng.uniform(0.3, 0.7) * h
        ys = np.clip(ys, 4, y1 - 2)
        d.line(list(zip(xs.tolist(), ys.tolist())), fill=color, width=1)
    if rng.random() < 0.5:
        f = ImageFont.truetype(font_path("DejaVuSans.ttf"), 7)
        for k in range(int(rng.integers(2, 4))):
            d.text((x0 + 4 + k * (w - 12) / 3, y1 - 9), str(int(rng.integers(0, 10))), font=f, fill=(0, 0, 0))
    return np.asarray(im, dtype=np.float32)


def _illustration(rng, h, w):
    bg = tuple(int(c) for c in rng.integers(215, 256, 3))
    im = Image.new("RGB", (w, h), bg)
    d = ImageDraw.Draw(im)
    for _ in range(int(rng.integers(2, 5))):
        color = tuple(int(c) for c in rng.integers(30, 230, 3))
        x0, x1 = sorted(rng.integers(0, w, 2).tolist())
        y0, y1 = sorted(rng.integers(0, h, 2).tolist())
        shape = rng.integers(3)
        if shape == 0:
            d.rectangle([x0, y0, x1 + 2, y1 + 2], fill=color)
        elif shape == 1:
            d.ellipse([x0, y0, x1 + 2, y1 + 2], fill=color)
        else:
            d.line([(x0, y0), (x1, y1)], fill=color, width=2)
    return np.asarray(im, dtype=np.float32)


def _parent(rng, h, w):
    c0 = rng.uniform(0, 255, 3)
    c1 = rng.uniform(0, 255, 3)
    t = np.linspace(0, 1, w if rng.random() < 0.5 else h, dtype=np.float32)
    grad = c0 + (c1 - c0) * t[:, None]
    grad = grad[None, :, :] if grad.shape[0] == w else grad[:, None, :]
    img = np.broadcast_to(grad, (h, w, 3)).astype(np.float32)
    noise = _smooth_noise(rng, h, w, 6)[..., None]
    return np.clip(img * (0.7 + 0.6 * noise), 0, 255)


_TEXTURES = {
    "microscopy": _microscopy,
    "parent": _parent,
    "diffraction": _diffraction,
    "graph": _graph,
    "illustration": _illustration,
}


def render_texture(category, h, w, rng):
    img = _TEXTURES[category](rng, h, w)
    return np.clip(img, 0, 255).astype(np.uint8)


def _caption(letters, categories, rng, upper):
    parts = []
    for letter, cat in zip(letters, categories):
        desc = _DESCRIPTIONS[cat][rng.integers(len(_DESCRIPTIONS[cat]))]
        marker = letter.upper() if upper else letter
        parts.append(f"({marker}) {desc}, sample {int(rng.integers(1, 20))}.")
    return " ".join(parts)


def make_synthetic_figure(spec, cfg, image_id=None):
    """Render a ``rows x cols`` compound figure with full ground truth.

    Panels tile the image (each surrounded by a white gutter) and carry
    letters ``a, b, c, ...`` in row-major order at the configured corner.
    Returns ``(FigureRecord, image)``.
    """
    if spec.n_panels > len(cfg.alphabet):
        raise ValueError(f"{spec.n_panels} panels exceed the {len(cfg.alphabet)}-letter alphabet")
    rng = np.random.default_rng([spec.seed, 7919])
    ph, pw = spec.panel_size
    H, W = spec.image_size
    image = np.full((H, W, 3), 255, dtype=np.uint8)
    g = spec.gutter
    corner = spec.label_corner
    if corner == "random":
        corner = CORNERS[rng.integers(len(CORNERS))]
    upper = bool(cfg.case_randomization and rng.random() < 0.3)
    deco = cfg.decoration if cfg.decoration != "mixed" else ("plain", "paren", "close")[rng.integers(3)]
    font = cfg.fonts[rng.integers(len(cfg.fonts))]
    label_h = float(rng.uniform(*spec.label_px))
    labels, masters, cats = [], [], []
    for idx in range(spec.n_panels):
        r, c = divmod(idx, spec.cols)
        y0, x0 = r * ph, c * pw
        cat = spec.texture_family
        if cat == "mixed":
            cat = CATEGORIES[rng.integers(len(CATEGORIES))]
        image[y0 + g : y0 + ph - g, x0 + g : x0 + pw - g] = render_texture(cat, ph - 2 * g, pw - 2 * g, rng)
        cats.append(cat)
        if not spec.labelled or (spec.label_dropout and rng.random() < spec.label_dropout):
            masters.append(MasterImage(BBox(x0, y0, x0 + pw, y0 + ph), cat, None))
            continue
        letter = cfg.alphabet[idx]
        text = DECORATIONS[deco].format(letter.upper() if upper else letter)
        alpha = render_glyph(text, font, label_h)
        gh, gw = alpha.shape
        m = g + 2 + int(rng.integers(0, 3))
        ly = y0 + m if corner.startswith("top") else y0 + ph - m - gh
        lx = x0 + m if corner.endswith("left") else x0 + pw - m - gw
        _draw_glyph(image, alpha, lx, ly)
        labels.append(SubfigureLabel(letter, BBox(lx, ly, lx + gw, ly + gh)))
        masters.append(MasterImage(BBox(x0, y0, x0 + pw, y0 + ph), cat, letter))
    lettered = [(m.letter, m.category) for m in masters if m.letter is not None]
    caption = _caption([l for l, _ in lettered], [c for _, c in lettered], rng, upper)
    record = FigureRecord(
        image_id=image_id or f"synth-{spec.seed}",
        width=W,
        height=H,
        caption=caption,
        labels=labels,
        masters=masters,
    )
    return record.validate(cfg.alphabet), image


def random_figure_spec(seed, layout=None, panel_range=(48, 64), label_corner="top-left"):
    """Draw a figure layout; panel counts follow ``layout`` (count -> weight)."""
    layout = layout or IMBALANCED_LAYOUT
    rng = np.random.default_rng([seed, 104729])
    counts = sorted(layout)
    p = np.array([layout[k] for k in counts], dtype=float)
    n = counts[rng.choice(len(counts), p=p / p.sum())]
    options = _FACTORIZATIONS[n]
    rows, cols = options[rng.integers(len(options))]
    size = tuple(int(v) for v in rng.integers(panel_range[0], panel_range[1] + 1, 2))
    return SynthFigureSpec(rows=rows, cols=cols, panel_size=size, label_corner=label_corner, seed=seed)


def make_corpus(n, seed=0, layout=None, cfg=None, split=None, prefix="fig", unlabelled=0.0, label_dropout=0.0, **spec_kw):
    """``n`` synthetic figures as ``(records, images)``.

    A fraction ``unlabelled`` of them (chosen per figure by seed) carry no
    letters at all, and each panel of the rest loses its letter with
    probability ``label_dropout``. Detectors need such panels to learn that a
    panel corner alone is not a label.
    """
    if not 0.0 <= unlabelled <= 1.0:
        raise ValueError(f"unlabelled fraction must lie in [0, 1], got {unlabelled}")
    cfg = cfg or SynthConfig()
    records, images = [], []
    for i in range(n):
        spec = random_figure_spec(seed * 1_000_003 + i, layout=layout, **spec_kw)
        if unlabelled and np.random.default_rng([seed, i, 17]).random() < unlabelled:
            spec = replace(spec, labelled=False)
        elif label_dropout:
            spec = replace(spec, label_dropout=label_dropout)
        rec, img = make_synthetic_figure(spec, cfg, image_id=f"{prefix}-{seed}-{i:05d}")
        if split is not None:
            rec = FigureRecord(**{**rec.__dict__, "split": split})
        records.append(rec)
        images.append(img)
    return records, images


def background_pool(images, records, per_image=4, cfg=None, seed=0):
    """Label-free patches cropped from a set of figures."""
    cfg = cfg or SynthConfig()
    pool = []
    for i, (img, rec) in enumerate(zip(images, records)):
        pool.extend(crop_background_patches(img, rec.labels, per_image, cfg, seed=[seed, i]))
    return pool
