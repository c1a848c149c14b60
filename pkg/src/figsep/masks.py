"""Layout masks: full-resolution binary mask, anchor mask and latent mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .annotation import BBox, dedupe_letters

# displacement order when two labels project onto the same cell: right, down, left, up
NEIGHBOR_ORDER = ((0, 1), (1, 0), (0, -1), (-1, 0))


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def sum(self):
        return int(self.values.sum())


@dataclass(frozen=True)
class AnchorMask:
    grid_h: int
    grid_w: int
    cells: tuple  # (row, col, letter)

    @property
    def letters(self):
        return [c[2] for c in self.cells]

    def cell_of(self, letter):
        for r, c, l in self.cells:
            if l == letter:
                return r, c
        raise KeyError(letter)

    def to_array(self):
        out = np.zeros((self.grid_h, self.grid_w), dtype=np.uint8)
        for r, c, _ in self.cells:
            out[r, c] = 1
        return out

    def __len__(self):
        return len(self.cells)


@dataclass(frozen=True)
class LatentMask:
    grid_h: int
    grid_w: int
    owners: dict  # letter -> (grid_h, grid_w) bool array

    def cells_of(self, letter):
        return np.argwhere(self.owners[letter])

    def coverage(self):
        """Number of letters owning each cell."""
        out = np.zeros((self.grid_h, self.grid_w), dtype=int)
        for m in self.owners.values():
            out += m
        return out


def _pixel_span(lo, hi, limit):
    # pixel i is inside when its center i + 0.5 lies in [lo, hi)
    start = max(0, math.ceil(lo - 0.5))
    stop = min(limit, math.ceil(hi - 0.5))
    return start, max(start, stop)


def build_binary_mask(labels, dims):
    """Rasterize the union of label boxes; ``dims`` is ``(height, width)``."""
    h, w = dims
    values = np.zeros((h, w), dtype=np.uint8)
    for lab in labels:
        box = getattr(lab, "box", lab)
        x0, x1 = _pixel_span(box.x_min, box.x_max, w)
        y0, y1 = _pixel_span(box.y_min, box.y_max, h)
        values[y0:y1, x0:x1] = 1
    return BinaryMask(values)


def resample_mask(mask, out_h, out_w):
    """Nearest-neighbour resampling; keeps the mask binary."""
    v = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)
    h, w = v.shape
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(int)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(int)
    return BinaryMask(v[rows][:, cols])


def _free_cell(r, c, occupied, gh, gw):
    # breadth-first over 4-neighbours in the fixed scan order
    seen = {(r, c)}
    frontier = [(r, c)]
    while frontier:
        nxt = []
        for cr, cc in frontier:
            for dr, dc in NEIGHBOR_ORDER:
                nr, nc = cr + dr, cc + dc
                if not (0 <= nr < gh and 0 <= nc < gw) or (nr, nc) in seen:
                    continue
                if (nr, nc) not in occupied:
                    return nr, nc
                seen.add((nr, nc))
                nxt.append((nr, nc))
        frontier = nxt
    raise ValueError("anchor grid is full; more labels than cells")


def project_anchor_mask(labels, dims, stride):
    """Map each label's box center to a feature-grid cell.

    Labels are processed in letter order. A label landing on an occupied cell
    moves to the nearest free cell, trying right, down, left, up first.
    """
    h, w = dims
    if stride <= 0 or h % stride or w % stride:
        raise ValueError(f"stride {stride} does not divide image dims {dims}")
    gh, gw = h // stride, w // stride
    occupied = set()
    cells = []
    for lab in dedupe_letters(labels):
        cx, cy = lab.box.center
        r = min(int(cy // stride), gh - 1)
        c = min(int(cx // stride), gw - 1)
        if (r, c) in occupied:
            r, c = _free_cell(r, c, occupied, gh, gw)
        occupied.add((r, c))
        cells.append((r, c, lab.letter))
    return AnchorMask(gh, gw, tuple(cells))


def rasterize_latent_mask(rough_boxes, grid_dims):
    """Cell ownership from rough boxes given in grid units.

    A cell belongs to a letter when its center lies inside the (clamped) box.
    A box too small to cover any cell center still owns the cell under its
    own center, so every letter owns at least one cell.
    """
    gh, gw = grid_dims
    owners = {}
    for letter, box in rough_boxes.items():
        if isinstance(box, BBox):
            x0, y0, x1, y1 = box.as_tuple()
        else:
            x0, y0, x1, y1 = (float(v) for v in box)
        x0, x1 = min(max(x0, 0.0), gw), min(max(x1, 0.0), gw)
        y0, y1 = min(max(y0, 0.0), gh), min(max(y1, 0.0), gh)
        m = np.zeros((gh, gw), dtype=bool)
        c0, c1 = _pixel_span(x0, x1, gw)
        r0, r1 = _pixel_span(y0, y1, gh)
        m[r0:r1, c0:c1] = True
        if not m.any():
            r = min(max(int(0.5 * (y0 + y1)), 0), gh - 1)
            c = min(max(int(0.5 * (x0 + x1)), 0), gw - 1)
            m[r, c] = True
        owners[letter] = m
    return LatentMask(gh, gw, owners)


def save_mask_png(mask, path):
    from PIL import Image

    v = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)
    Image.fromarray((v > 0).astype(np.uint8) * 255).convert("1").save(path)
