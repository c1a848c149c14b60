import logging

import numpy as np
import pytest
import torch

import figsep.label_detector as ld
import toys
from figsep.annotation import BBox, SubfigureLabel
from figsep.classifier import LabelClassifier
from figsep.label_detector import (
    LabelDetector,
    build_targets,
    classifier_regularization,
    detect_labels,
    detector_base_loss,
    encode_targets_as_raw,
    kmeans_anchors,
)
from figsep.metrics import iou
from figsep.pipeline import clean_labels
from figsep.synth import SynthConfig, SynthFigureSpec, _draw_glyph, make_synthetic_figure, render_glyph


@pytest.fixture
def tiny_net(monkeypatch):
    orig = ld.GridDetector
    monkeypatch.setattr(ld, "GridDetector", lambda n, a: orig(n, a, widths=(4, 4, 4), strides=(2, 2, 2), head_width=4))


def _tiny_data():
    img = np.full((32, 32, 3), 255, np.uint8)
    img[2:12, 2:12] = 0
    return [img, img[:, ::-1].copy()], [[SubfigureLabel("a", BBox(2, 2, 12, 12))], [SubfigureLabel("b", BBox(20, 2, 30, 12))]]


@pytest.fixture(scope="module")
def tiny_classifier():
    patches = [np.full((24, 24, 3), 255, np.uint8)] * 2
    return LabelClassifier(alphabet="ab", steps=1, batch_size=2).fit(patches, ["a", "b"])


def test_identity_prediction_zero_box_and_class_loss():
    gt = [np.array([[3.0, 4.0, 12.0, 12.0]])]
    tg = build_targets(gt, [[1]], toys.ANCHORS, toys.STRIDE, 4, 4, dtype=torch.float64)
    raw = encode_targets_as_raw(tg, toys.N_CLASSES)
    loss = detector_base_loss(raw, tg)
    assert float(loss.box) < 1e-12
    assert float(loss.cls) < 1e-12
    assert float(loss.reg) == 0.0
    vals = loss.as_floats()
    assert all(v >= 0 for v in vals.values())
    assert vals["total"] == pytest.approx(vals["box"] + vals["obj"] + vals["cls"])


def test_base_loss_deterministic():
    f, _ = toys.detector_problem(seed=3)
    assert f().item() == f().item()


def test_no_ground_truth_and_no_negatives_is_an_error():
    tg = build_targets([np.zeros((0, 4))], [[]], toys.ANCHORS, toys.STRIDE, 4, 4)
    tg.obj_neg[:] = False
    with pytest.raises(ValueError, match="nothing to learn"):
        detector_base_loss(torch.zeros(1, 2, 5 + toys.N_CLASSES, 4, 4), tg)


def test_assignment_thresholds_validated():
    with pytest.raises(ValueError):
        build_targets([np.zeros((0, 4))], [[]], toys.ANCHORS, toys.STRIDE, 4, 4, pos_thresh=0.3, neg_thresh=0.5)


@pytest.mark.parametrize("problem", [toys.detector_problem, lambda: toys.detector_problem(with_reg=True)])
def test_detector_loss_gradient_matches_finite_differences(problem):
    f, params = problem()
    assert toys.n_params(params) <= 1000
    assert toys.relative_error(f, params) <= 1e-4


def test_regularization_gradient_reaches_boxes():
    f, params = toys.regularization_problem()
    assert toys.relative_error(f, params) <= 1e-4
    assert all(p.grad.abs().sum() > 0 for p in params)


def test_regularization_empty_and_degenerate():
    clf = toys.frozen_toy_classifier()
    images = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    term, skipped = classifier_regularization(clf, images, torch.zeros(0, 4, dtype=torch.float64), [])
    assert float(term) == 0.0 and skipped == 0
    outside = torch.tensor([[20.0, 20.0, 30.0, 30.0], [2.0, 2.0, 9.0, 9.0]], dtype=torch.float64)
    term, skipped = classifier_regularization(clf, images, outside, [0, 1], input_size=8)
    assert skipped == 1 and float(term) > 0


def test_regularization_needs_frozen_classifier():
    clf = toys.ToyClassifier().double().eval()
    with pytest.raises(ValueError, match="frozen"):
        classifier_regularization(clf, torch.rand(1, 3, 8, 8, dtype=torch.float64), torch.tensor([[0.0, 0, 4, 4]], dtype=torch.float64), [0])


def test_total_loss_continuous_in_weight():
    gt = [np.array([[3.0, 4.0, 12.0, 12.0]])]
    tg = build_targets(gt, [[1]], toys.ANCHORS, toys.STRIDE, 4, 4, dtype=torch.float64)
    torch.manual_seed(0)
    loss = detector_base_loss(torch.randn(1, 2, 5 + toys.N_CLASSES, 4, 4, dtype=torch.float64), tg)
    base = float(loss.total)
    loss.reg = torch.tensor(0.7, dtype=torch.float64)
    loss.weights["reg"] = 0.0
    assert float(loss.total) == base
    for w in (1e-9, 1e-3, 0.5, 1.0):
        loss.weights["reg"] = w
        assert float(loss.total) == pytest.approx(base + 0.7 * w, rel=1e-12)


def test_kmeans_anchor_priors():
    sizes = [(10, 12)] * 5 + [(30, 28)] * 5 + [(60, 20)] * 5
    anchors = kmeans_anchors(sizes, k=3)
    assert np.allclose(anchors, [(10, 12), (30, 28), (60, 20)])
    with pytest.raises(ValueError):
        kmeans_anchors([], 3)


def test_phase_boundary_logged_after_ten_thousand_steps(tiny_net, caplog):
    imgs, labs = _tiny_data()
    caplog.set_level(logging.INFO, logger="figsep.label_detector")
    det = LabelDetector(alphabet="ab", input_size=32, n_anchors=1, base_steps=10_000, finetune_steps=3_000, batch_size=1, augment=False)
    det.fit(imgs, labs)
    assert det.phase_boundary_ == 10_000
    assert len(det.loss_log_) == 13_000
    assert "phase boundary at step 10000" in caplog.text


def test_zero_weight_matches_classifier_free_run(tiny_net, tiny_classifier):
    imgs, labs = _tiny_data()
    kw = dict(alphabet="ab", input_size=32, n_anchors=1, base_steps=5, finetune_steps=5, batch_size=2, seed=3)
    with_clf = LabelDetector(reg_weight=0.0, **kw).fit(imgs, labs, classifier=tiny_classifier)
    without = LabelDetector(**kw).fit(imgs, labs)
    assert with_clf.loss_curve_ == without.loss_curve_
    for a, b in zip(with_clf.net_.state_dict().values(), without.net_.state_dict().values()):
        assert torch.equal(a, b)


def test_classifier_alphabet_mismatch(tiny_net, tiny_classifier):
    imgs, labs = _tiny_data()
    with pytest.raises(ValueError, match="alphabet"):
        LabelDetector(alphabet="abc", input_size=32, base_steps=1, finetune_steps=1).fit(imgs, labs, classifier=tiny_classifier)


def test_letters_outside_alphabet_rejected(tiny_net):
    imgs, labs = _tiny_data()
    with pytest.raises(ValueError, match="outside the alphabet"):
        LabelDetector(alphabet="a", input_size=32, base_steps=1, finetune_steps=0).fit(imgs, labs)


def test_blank_image_low_objectness_gives_no_labels(tiny_net):
    imgs, labs = _tiny_data()
    det = LabelDetector(alphabet="ab", input_size=32, n_anchors=1, base_steps=1, finetune_steps=0, lr=1e-9).fit(imgs, labs)
    # the untrained head keeps its objectness prior far below 0.25
    assert detect_labels(det, np.full((50, 70, 3), 255, np.uint8), 0.25) == []


def test_detect_output_contract(tiny_net):
    imgs, labs = _tiny_data()
    det = LabelDetector(alphabet="ab", input_size=32, n_anchors=1, base_steps=30, finetune_steps=0, batch_size=2).fit(imgs, labs)
    img = np.random.default_rng(0).integers(0, 255, (45, 61, 3), dtype=np.uint8)
    out = det.detect(img, conf_threshold=0.0)
    assert out, "a zero threshold keeps every surviving candidate"
    confs = [l.confidence for l in out]
    assert confs == sorted(confs, reverse=True)
    for l in out:
        assert l.box.within(61, 45) and 0.0 <= l.confidence <= 1.0
    for letter in {l.letter for l in out}:
        same = [l for l in out if l.letter == letter]
        for i, a in enumerate(same):
            assert all(iou(a.box, b.box) <= det.nms_iou for b in same[i + 1 :])


def test_save_load_round_trip(tiny_net, tmp_path):
    imgs, labs = _tiny_data()
    det = LabelDetector(alphabet="ab", input_size=32, n_anchors=1, base_steps=3, finetune_steps=0).fit(imgs, labs)
    det.save(tmp_path / "d.ckpt")
    back = LabelDetector.load(tmp_path / "d.ckpt")
    img = imgs[0]
    assert det.detect(img, 0.0) == back.detect(img, 0.0)


# -- desk-scale trained models ---------------------------------------------


def _glyph_image(letter="b", px=22):
    alpha = render_glyph(letter, SynthConfig().fonts[0], px)
    img = np.full((64, 64, 3), 255, np.uint8)
    h, w = alpha.shape
    y, x = 20, 24
    _draw_glyph(img, alpha, x, y)
    return img, (x, y, x + w, y + h)


def test_clean_glyph_costs_almost_nothing_and_shift_costs_more(trainer):
    clf = trainer.classifier()
    img, (x0, y0, x1, y1) = _glyph_image("b")
    t = torch.from_numpy(img).permute(2, 0, 1)[None].float() / 255
    aligned = torch.tensor([[x0, y0, x1, y1]], dtype=torch.float32)
    h = y1 - y0
    lower = torch.tensor([[x0, y0 + 0.5 * h, x1, y1]], dtype=torch.float32)  # only the bowl of the b
    target = [clf.alphabet.index("b")]
    a, _ = classifier_regularization(clf.net_, t, aligned, target, input_size=clf.input_size)
    s, _ = classifier_regularization(clf.net_, t, lower, target, input_size=clf.input_size)
    assert float(a) <= 0.05
    assert float(s) > float(a)


def test_trained_detector_finds_two_by_two_labels(trainer):
    det, _ = trainer.label_detectors(0)
    rec, img = make_synthetic_figure(SynthFigureSpec(2, 2, panel_size=(60, 60), seed=4242), SynthConfig())
    gt = {l.letter: l.box for l in rec.labels}
    found = det.detect(img)
    # every label is found; per-letter NMS may leave a weaker same-letter box
    assert all(any(l.letter == k and iou(l.box, g) >= 0.5 for l in found) for k, g in gt.items())
    cleaned = clean_labels(found)
    assert sorted(l.letter for l in cleaned) == list("abcd")
    assert all(iou(l.box, gt[l.letter]) >= 0.5 for l in cleaned)


def test_every_positive_prior_regresses_onto_its_ground_truth():
    anchors = [(12.0, 12.0), (13.0, 11.0), (11.0, 13.0)]
    target = BBox(14, 14, 26, 26)  # centred on cell (2, 2): all three priors overlap at >= 0.7
    tg = build_targets([np.array([target.as_tuple()])], [[2]], anchors, 8, 6, 6, dtype=torch.float64)
    assert torch.equal(tg.resp, tg.obj_pos)
    assert len(tg.positives) == int(tg.obj_pos.sum()) == 3
    priors = ld.prior_boxes(anchors, 8, 6, 6)
    boxes = ld.decode_raw_boxes(encode_targets_as_raw(tg, 3), anchors, 8)
    for b, a, r, c, k in tg.positives:
        assert k == 2
        assert iou(BBox(*priors[a, r, c]), target) >= 0.7
        assert np.allclose(boxes[b, a, r, c].numpy(), target.as_tuple(), atol=1e-4)
