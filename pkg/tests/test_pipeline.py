import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

import toys
from figsep.annotation import BBox, DatasetManifest, SubfigureLabel
from figsep.master_detector import MasterPrediction
from figsep.pipeline import (
    EXIT_ERROR,
    EXIT_INCOMPLETE,
    EXIT_OK,
    Models,
    PipelineConfig,
    PipelineError,
    SeparationEntry,
    SeparationResult,
    clean_labels,
    evaluate_pipeline,
    exit_code,
    fully_matched,
    load_models,
    pixel_box,
    separate,
    separate_many,
)
from figsep.synth import SynthConfig, SynthFigureSpec, make_corpus, make_synthetic_figure


def lab(letter, x0, y0, x1, y1, conf=0.9):
    return SubfigureLabel(letter, BBox(x0, y0, x1, y1), conf)


ABCD = [lab("a", 4, 4, 14, 16), lab("b", 70, 4, 80, 16), lab("c", 4, 70, 14, 82), lab("d", 70, 70, 80, 82)]


@pytest.fixture(scope="module")
def master():
    return toys.random_master_model()


def models_with(labels, master):
    return Models(None, toys.StubLabelDetector(labels), master)


@pytest.fixture
def img():
    return np.random.default_rng(0).integers(0, 255, (128, 128, 3), dtype=np.uint8)


def test_no_labels_is_a_status_not_a_crash(master, img, tmp_path):
    cfg = PipelineConfig(output_dir=str(tmp_path))
    r = separate(img, "(a) A. (b) B.", cfg, models=models_with([], master), figure_id="f")
    assert r.status == "no-labels" and r.entries == []
    assert r.warnings
    assert not (tmp_path / "f").exists()
    assert exit_code([r]) == EXIT_INCOMPLETE


def test_full_caption_gives_ok(master, img):
    r = separate(img, "(a) Alpha. (b) Beta. (c) Gamma. (d) Delta.", PipelineConfig(), models=models_with(ABCD, master))
    assert r.status == "ok"
    assert r.letters == list("abcd")
    assert [e.caption for e in r.entries] == ["Alpha.", "Beta.", "Gamma.", "Delta."]
    assert exit_code([r]) == EXIT_OK


def test_caption_missing_a_marker_is_partial(master, img):
    r = separate(img, "(a) Alpha. (b) Beta. (c) Gamma.", PipelineConfig(), models=models_with(ABCD, master))
    assert r.status == "partial"
    caps = {e.letter: e.caption for e in r.entries}
    assert caps["d"] is None and caps["a"] == "Alpha."
    assert any("d" in w for w in r.warnings)


def test_marker_without_a_label_is_partial(master, img):
    r = separate(img, "(a) A. (b) B. (c) C. (d) D. (e) E.", PipelineConfig(), models=models_with(ABCD, master))
    assert r.status == "partial"
    assert len(r.entries) == 4


def test_no_caption_skips_association(master, img):
    r = separate(img, None, PipelineConfig(), models=models_with(ABCD, master))
    assert r.status == "ok"
    assert all(e.caption is None for e in r.entries)


def test_crops_are_byte_exact_source_regions(master, img, tmp_path):
    cfg = PipelineConfig(output_dir=str(tmp_path))
    r = separate(img, None, cfg, models=models_with(ABCD, master), figure_id="fig1")
    for e in r.entries:
        x0, y0, x1, y1 = (int(v) for v in e.box.as_tuple())
        crop = np.asarray(Image.open(e.crop_path))
        assert crop.tobytes() == np.ascontiguousarray(img[y0:y1, x0:x1]).tobytes()
    doc = json.loads((tmp_path / "fig1" / "result.json").read_text())
    assert doc["status"] == "ok" and len(doc["entries"]) == 4


def test_write_crops_off(master, img, tmp_path):
    cfg = PipelineConfig(output_dir=str(tmp_path), write_crops=False)
    r = separate(img, None, cfg, models=models_with(ABCD, master), figure_id="x")
    assert all(e.crop_path is None for e in r.entries)
    assert not (tmp_path / "x").exists()


def test_grayscale_and_bad_arrays(master):
    r = separate(np.zeros((64, 64), np.uint8), None, PipelineConfig(), models=models_with(ABCD[:1], master))
    assert r.letters == ["a"]
    with pytest.raises(PipelineError):
        separate(np.zeros((0, 5, 3), np.uint8), None, PipelineConfig(), models=models_with([], master))
    with pytest.raises(PipelineError):
        separate(np.zeros(7), None, PipelineConfig(), models=models_with([], master))


def test_unreadable_path_is_a_pipeline_error(master, tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(PipelineError, match="cannot read"):
        separate(str(bad), None, PipelineConfig(), models=models_with([], master))


def test_separate_many_keeps_order_and_captures_errors(master, tmp_path):
    rng = np.random.default_rng(1)
    paths = []
    for k in range(5):
        p = tmp_path / f"f{k}.png"
        Image.fromarray(rng.integers(0, 255, (90 + k, 100, 3), dtype=np.uint8)).save(p)
        paths.append(str(p))
    missing = str(tmp_path / "gone.png")
    items = [(p, None, None) for p in paths[:2]] + [(missing, None, None)] + [(p, None, None) for p in paths[2:]]
    models = models_with(ABCD[:2], master)
    serial = separate_many(items, PipelineConfig(), models=models)
    pooled = separate_many(items, PipelineConfig(workers=3), models=models)
    assert isinstance(serial[2], PipelineError) and isinstance(pooled[2], PipelineError)
    assert [r.figure_id for r in serial if not isinstance(r, Exception)] == ["f0", "f1", "f2", "f3", "f4"]
    assert [r.to_dict() for r in serial if not isinstance(r, Exception)] == [
        r.to_dict() for r in pooled if not isinstance(r, Exception)
    ]
    assert exit_code(serial) == EXIT_ERROR


def test_exit_code_mapping():
    e = SeparationEntry("a", BBox(0, 0, 5, 5), "photo", 0.9, BBox(0, 0, 1, 1))
    ok = SeparationResult("x", [e], "ok")
    part = SeparationResult("y", [e], "partial")
    none = SeparationResult("z", [], "no-labels")
    assert exit_code([]) == EXIT_OK
    assert exit_code([ok, ok]) == EXIT_OK
    assert exit_code([ok, part]) == EXIT_INCOMPLETE
    assert exit_code([ok, none]) == EXIT_INCOMPLETE
    assert exit_code([ok, PipelineError("boom")]) == EXIT_ERROR


def test_result_invariants():
    e = SeparationEntry("a", BBox(0, 0, 5, 5), "photo", 0.9, BBox(0, 0, 1, 1))
    with pytest.raises(ValueError):
        SeparationResult("x", [e, e])
    with pytest.raises(ValueError):
        SeparationResult("x", [], "ok")
    with pytest.raises(ValueError):
        SeparationResult("x", [e], "no-labels")
    with pytest.raises(ValueError):
        SeparationResult("x", [e], "done")


def test_clean_labels_cross_letter_and_duplicates():
    labels = [lab("a", 0, 0, 10, 10, 0.9), lab("e", 1, 0, 11, 10, 0.4), lab("b", 50, 50, 60, 60, 0.3), lab("b", 80, 80, 90, 90, 0.8)]
    out = clean_labels(labels)
    assert sorted((l.letter, l.confidence) for l in out) == [("a", 0.9), ("b", 0.8)]
    assert clean_labels([]) == []


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0, 250), st.floats(0, 250), st.floats(0.01, 200), st.floats(0.01, 200), st.integers(1, 200), st.integers(1, 200)
)
def test_pixel_box_covers_and_stays_inside(x, y, bw, bh, W, H):
    b = pixel_box(BBox(x, y, x + bw, y + bh), W, H)
    assert b.within(W, H) and b.width >= 1 and b.height >= 1
    assert all(float(v).is_integer() for v in b.as_tuple())
    if BBox(x, y, x + bw, y + bh).within(W, H):
        assert b.x_min <= x and b.y_min <= y and b.x_max >= x + bw and b.y_max >= y + bh


def test_config_validation_and_from_dict(tmp_path):
    for bad in (dict(label_nms=0), dict(label_conf=1.5), dict(eval_master_labels="oracle"), dict(workers=0)):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)
    with pytest.raises(ValueError, match="unknown pipeline options"):
        PipelineConfig.from_dict({"pipeline": {"labl_conf": 0.3}})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"checkpoints": {"label_detector": "m/ld.ckpt"}, "pipeline": {"label_conf": 0.4}}))
    cfg = PipelineConfig.from_file(path)
    assert cfg.label_conf == 0.4
    assert cfg.resolve(cfg.label_detector) == str(tmp_path / "m" / "ld.ckpt")
    assert cfg.to_dict()["label_conf"] == 0.4


def test_load_models_reports_missing_checkpoints(tmp_path):
    with pytest.raises(PipelineError, match="no label detector"):
        load_models(PipelineConfig())
    cfg = PipelineConfig(label_detector=str(tmp_path / "a.ckpt"), master_detector=str(tmp_path / "b.ckpt"))
    with pytest.raises(PipelineError, match="not found"):
        load_models(cfg)


class OracleMasters:
    """Returns each record's ground-truth masters for the letters it is given."""

    def __init__(self, records):
        self.by_box = {}
        for r in records:
            masters = {m.letter: m for m in r.masters if m.letter}
            for l in r.labels:
                self.by_box[(l.letter, l.box)] = masters[l.letter]

    def predict_one(self, image, labels):
        out = []
        for l in labels:
            m = self.by_box[(l.letter, l.box)]
            out.append(MasterPrediction(l.letter, m.box, m.box, (1.0, 0, 0, 0, 0), 0.99))
        return out


def test_evaluate_with_perfect_models_scores_one():
    recs, imgs = make_corpus(8, seed=21, split="test")
    by_shape = {}
    for r, im in zip(recs, imgs):
        by_shape[im.shape] = [SubfigureLabel(l.letter, l.box, 1.0) for l in r.labels]
    # distinct shapes let the stub tell figures apart
    assert len(by_shape) == len(recs)
    models = Models(None, toys.StubLabelDetector(by_shape=by_shape), OracleMasters(recs))
    manifest = DatasetManifest(recs)
    images = {r.image_id: im for r, im in zip(recs, imgs)}
    label_rep, master_rep = evaluate_pipeline(manifest, PipelineConfig(), models=models, images=images)
    present = {l.letter for r in recs for l in r.labels}
    assert all(label_rep.per_class[c] == 1.0 for c in present)
    assert label_rep.fp == 0
    assert master_rep.map == 1.0 and master_rep.fp == 0


def test_evaluate_needs_a_test_split(master):
    recs, _ = make_corpus(2, seed=1, split="train")
    with pytest.raises(ValueError, match="empty test split"):
        evaluate_pipeline(DatasetManifest(recs), PipelineConfig(), models=models_with([], master))


def test_fully_matched_rules():
    rec, _ = make_synthetic_figure(SynthFigureSpec(1, 2, seed=3), SynthConfig())
    e = [SeparationEntry(l.letter, l.box, "photo", 0.9, l.box, "cap") for l in rec.labels]
    assert fully_matched(SeparationResult("f", e, "ok"), rec)
    assert not fully_matched(SeparationResult("f", e[:1], "ok"), rec)
    assert not fully_matched(SeparationResult("f", e, "partial"), rec)
    assert not fully_matched(PipelineError("x"), rec)


# -- desk-scale trained models ---------------------------------------------------


@pytest.fixture(scope="module")
def trained(trainer):
    det, _ = trainer.label_detectors(0)
    return Models(trainer.classifier(), det, trainer.master_detector())


def test_two_by_two_with_caption(trained, tmp_path):
    rec, img = make_synthetic_figure(SynthFigureSpec(2, 2, panel_size=(60, 60), seed=4242), SynthConfig())
    r = separate(img, "(a) A. (b) B. (c) C. (d) D.", PipelineConfig(output_dir=str(tmp_path)), models=trained)
    assert r.status == "ok"
    assert r.letters == list("abcd")
    assert [e.caption for e in r.entries] == ["A.", "B.", "C.", "D."]
    assert all(e.crop_path for e in r.entries)
