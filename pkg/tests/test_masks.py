import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from figsep.annotation import BBox, SubfigureLabel
from figsep.masks import build_binary_mask, project_anchor_mask, rasterize_latent_mask, resample_mask, save_mask_png
from oracles import anchor_cell_by_floor, union_area_by_pixels


def lab(letter, x0, y0, x1, y1):
    return SubfigureLabel(letter, BBox(x0, y0, x1, y1))


def test_no_labels_gives_zero_mask():
    assert build_binary_mask([], (8, 8)).sum() == 0


def test_half_open_box_area():
    m = build_binary_mask([lab("a", 2, 2, 4, 4)], (8, 8))
    assert m.sum() == 4
    assert m.values[2:4, 2:4].all()


def test_overlapping_boxes_union():
    labels = [lab("a", 1, 1, 6, 5), lab("b", 4, 3, 9, 8)]
    assert build_binary_mask(labels, (10, 10)).sum() == union_area_by_pixels([l.box.as_tuple() for l in labels], 10, 10)


def test_mask_png_is_binary(tmp_path):
    from PIL import Image

    m = build_binary_mask([lab("a", 2, 2, 4, 4)], (8, 8))
    save_mask_png(m, tmp_path / "m.png")
    back = np.asarray(Image.open(tmp_path / "m.png").convert("L"))
    assert set(np.unique(back)) <= {0, 255}
    assert (back > 0).sum() == 4


def test_resample_keeps_mask_binary():
    m = build_binary_mask([lab("a", 1, 1, 5, 7)], (9, 13))
    r = resample_mask(m, 20, 31)
    assert set(np.unique(r.values)) <= {0, 1}


def test_anchor_cell_floor_division():
    am = project_anchor_mask([lab("a", 100, 200, 101, 201)], (416, 416), 32)
    assert am.cells == ((6, 3, "a"),)


def test_boundary_center_goes_to_lower_cell():
    # center exactly at x = 64 lies on the boundary between columns 1 and 2
    am = project_anchor_mask([lab("a", 60, 10, 68, 14)], (128, 128), 32)
    assert am.cell_of("a") == (0, 2)
    am = project_anchor_mask([lab("a", 0, 0, 64, 64)], (128, 128), 32)
    assert am.cell_of("a") == (1, 1)


def test_collision_tie_break_replay():
    # a, b, c, d, e share cell (1, 1) of a 3x3 grid; letters are placed in
    # letter order and each newcomer takes the first free neighbour in the
    # order right, down, left, up, searching outward when all are taken
    labels = [lab(l, 40, 40, 50, 50) for l in "edcba"]
    am = project_anchor_mask(labels, (96, 96), 32)
    assert am.cells == ((1, 1, "a"), (1, 2, "b"), (2, 1, "c"), (1, 0, "d"), (0, 1, "e"))
    # next ring: right-neighbour of (1,1) is taken, so breadth-first continues from (1,2)
    labels.append(lab("f", 40, 40, 50, 50))
    am = project_anchor_mask(labels, (96, 96), 32)
    assert am.cell_of("f") == (2, 2)


def test_collision_at_grid_edge_skips_outside_cells():
    # from the corner (2, 2) right and down fall off the grid, so left wins
    labels = [lab("a", 90, 90, 95, 95), lab("b", 90, 90, 95, 95)]
    am = project_anchor_mask(labels, (96, 96), 32)
    assert am.cells == ((2, 2, "a"), (2, 1, "b"))


def test_grid_overflow_is_an_error():
    labels = [lab(l, 1, 1, 3, 3) for l in "abcde"]
    with pytest.raises(ValueError, match="full"):
        project_anchor_mask(labels, (64, 64), 32)


def test_stride_must_divide_dims():
    with pytest.raises(ValueError):
        project_anchor_mask([], (100, 96), 32)


def test_latent_mask_examples():
    full = rasterize_latent_mask({"a": (0, 0, 4, 3)}, (3, 4))
    assert full.owners["a"].all()
    disjoint = rasterize_latent_mask({"a": (0, 0, 2, 2), "b": (2, 1, 4, 3)}, (3, 4))
    assert disjoint.owners["a"].sum() == 4
    assert disjoint.owners["b"].sum() == 4
    assert rasterize_latent_mask({}, (3, 4)).owners == {}


def test_tiny_rough_box_owns_its_center_cell():
    lm = rasterize_latent_mask({"a": (1.1, 1.2, 1.3, 1.4)}, (4, 4))
    assert lm.cells_of("a").tolist() == [[1, 1]]


@st.composite
def layouts(draw):
    h = draw(st.integers(4, 40))
    w = draw(st.integers(4, 40))
    out = []
    for k in range(draw(st.integers(0, 5))):
        x0 = draw(st.floats(0, w - 1))
        y0 = draw(st.floats(0, h - 1))
        out.append(lab("abcde"[k], x0, y0, draw(st.floats(x0 + 0.1, w)), draw(st.floats(y0 + 0.1, h))))
    return h, w, out


@settings(max_examples=200, deadline=None)
@given(layouts())
def test_mask_sum_equals_pixel_union(layout):
    h, w, labels = layout
    assert build_binary_mask(labels, (h, w)).sum() == union_area_by_pixels([l.box.as_tuple() for l in labels], h, w)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.sampled_from([4, 8, 16, 32]), st.data())
def test_anchor_projection_matches_floor_oracle(gh, gw, stride, data):
    H, W = gh * stride, gw * stride
    cx = data.draw(st.one_of(st.integers(0, gw).map(lambda c: float(c * stride)), st.floats(0.25, W - 0.25)))
    cy = data.draw(st.one_of(st.integers(0, gh).map(lambda r: float(r * stride)), st.floats(0.25, H - 0.25)))
    cx, cy = min(max(cx, 0.25), W - 0.25), min(max(cy, 0.25), H - 0.25)
    am = project_anchor_mask([lab("a", cx - 0.25, cy - 0.25, cx + 0.25, cy + 0.25)], (H, W), stride)
    assert am.cell_of("a") == anchor_cell_by_floor((cx, cy), stride, gh, gw)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 120), st.floats(0, 120), st.floats(1, 30), st.floats(1, 30)), max_size=8))
def test_projection_deterministic_and_distinct(raw):
    labels = [lab("abcdefgh"[i], x, y, min(128, x + w), min(128, y + h)) for i, (x, y, w, h) in enumerate(raw) if x + 1 <= 128 and y + 1 <= 128]
    a1 = project_anchor_mask(labels, (128, 128), 16)
    a2 = project_anchor_mask(list(reversed(labels)), (128, 128), 16)
    assert a1 == a2
    cells = [(r, c) for r, c, _ in a1.cells]
    assert len(set(cells)) == len(cells)
    assert sorted(a1.letters) == sorted({l.letter for l in labels})


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), min_size=1, max_size=6, unique=True), st.data())
def test_undisplaced_anchor_cells_touch_the_mask(cells, data):
    # labels whose centre cell is free keep that cell, which then overlaps the label's own pixels
    stride = 16
    labels = []
    for k, (r, c) in enumerate(cells):
        x0 = c * stride + data.draw(st.integers(0, 7))
        y0 = r * stride + data.draw(st.integers(0, 7))
        labels.append(lab("abcdef"[k], x0, y0, x0 + data.draw(st.integers(2, 16)), y0 + data.draw(st.integers(2, 16))))
    mask = build_binary_mask(labels, (128, 128)).values
    am = project_anchor_mask(labels, (128, 128), stride)
    by_letter = {l.letter: l for l in labels}
    for r, c, letter in am.cells:
        if (r, c) != anchor_cell_by_floor(by_letter[letter].box.center, stride, 8, 8):
            continue  # displaced by a collision
        assert mask[r * stride : (r + 1) * stride, c * stride : (c + 1) * stride].any(), letter
