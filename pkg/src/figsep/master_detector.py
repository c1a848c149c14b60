"""Mask-conditioned, anchor-based master image detector.

The figure and its label mask are stacked into a 4-channel input. For every
letter in the anchor mask the feature vector at the letter's cell predicts a
rough box against a set of prior shapes; the rough boxes are rasterized into
a latent mask whose owned cells are average-pooled to refine each box and
predict its category. The output always holds exactly one prediction per
anchor-mask letter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .annotation import CATEGORIES, BBox, MasterImage, SubfigureLabel
from .checkpoint import load_checkpoint, save_checkpoint
from .label_detector import _shape_iou, kmeans_anchors
from .layers import (
    SmallBackbone,
    letterbox,
    letterbox_mask,
    photometric_jitter,
    place_mask,
    random_placement,
    seed_everything,
    to_tensor,
)
from .masks import AnchorMask, build_binary_mask, project_anchor_mask, rasterize_latent_mask
from .metrics import Detection, evaluate_detections

logger = logging.getLogger(__name__)

MAX_LOG_SCALE = 4.0


@dataclass(frozen=True)
class MasterPrediction:
    letter: str
    rough_box: BBox
    refined_box: BBox
    category_probs: tuple
    confidence: float

    @property
    def category(self):
        return CATEGORIES[int(np.argmax(self.category_probs))]

    def to_master(self):
        return MasterImage(self.refined_box, self.category, self.letter, self.confidence)

    def to_dict(self):
        return {
            "letter": self.letter,
            "rough_box": list(self.rough_box.as_tuple()),
            "refined_box": list(self.refined_box.as_tuple()),
            "category": self.category,
            "category_probs": dict(zip(CATEGORIES, self.category_probs)),
            "confidence": self.confidence,
        }


class MasterNet(nn.Module):
    def __init__(
        self,
        n_anchors=3,
        widths=(16, 32, 48, 64, 64, 64, 64),
        strides=(2, 2, 2, 2, 1, 1, 1),
        dilations=(1, 1, 1, 1, 1, 2, 4),
        hidden=64,
        n_categories=len(CATEGORIES),
        in_channels=4,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.n_anchors = n_anchors
        self.n_categories = n_categories
        self.backbone = SmallBackbone(in_channels, widths, strides, dilations)
        self.stride = self.backbone.stride
        c = self.backbone.out_channels + 2  # + normalized (x, y) coordinate channels
        self.feature_dim = c
        self.rough_head = nn.Conv2d(c, n_anchors * 5, 1)
        self.refine_head = nn.Sequential(
            nn.Linear(c + 4, hidden), nn.ReLU(), nn.Linear(hidden, 4 + n_categories)
        )
        with torch.no_grad():
            self.rough_head.bias.zero_()
            last = self.refine_head[-1]
            last.weight.mul_(0.1)
            last.bias.zero_()

    def features(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        f = self.backbone(x)
        B, _, H, W = f.shape
        ys = torch.linspace(-1, 1, H, dtype=f.dtype).view(1, 1, H, 1).expand(B, 1, H, W)
        xs = torch.linspace(-1, 1, W, dtype=f.dtype).view(1, 1, 1, W).expand(B, 1, H, W)
        return torch.cat([f, xs, ys], dim=1)


def _cell_rough(net, feats, b, r, c):
    """Raw rough outputs ``(A, 5)`` at one cell."""
    v = feats[b, :, r, c]
    return (net.rough_head.weight.view(net.rough_head.out_channels, -1) @ v + net.rough_head.bias).view(
        net.n_anchors, 5
    )


def decode_rough(raw, r, c, anchors, stride):
    """Rough-box raw ``(A, 5)`` at cell ``(r, c)`` to xyxy boxes ``(A, 4)`` in input pixels.

    Centers are offset from the cell center in units of the prior size so a
    rough box can reach a master center several cells away from its label.
    """
    anc = torch.as_tensor(anchors, dtype=raw.dtype)
    ccx = (c + 0.5) * stride
    ccy = (r + 0.5) * stride
    cx = ccx + raw[:, 0] * anc[:, 0]
    cy = ccy + raw[:, 1] * anc[:, 1]
    w = anc[:, 0] * torch.exp(raw[:, 2].clamp(max=MAX_LOG_SCALE))
    h = anc[:, 1] * torch.exp(raw[:, 3].clamp(max=MAX_LOG_SCALE))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def encode_rough(box, r, c, prior, stride):
    x0, y0, x1, y1 = box
    pw, ph = prior
    return np.array(
        [
            (0.5 * (x0 + x1) - (c + 0.5) * stride) / pw,
            (0.5 * (y0 + y1) - (r + 0.5) * stride) / ph,
            np.log((x1 - x0) / pw),
            np.log((y1 - y0) / ph),
        ]
    )


def apply_deltas(boxes, deltas):
    """Shift/scale xyxy ``boxes`` ``(N, 4)`` by ``(dx, dy, dw, dh)`` relative to their size."""
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w + deltas[:, 0] * w
    cy = boxes[:, 1] + 0.5 * h + deltas[:, 1] * h
    nw = w * torch.exp(deltas[:, 2].clamp(max=MAX_LOG_SCALE))
    nh = h * torch.exp(deltas[:, 3].clamp(max=MAX_LOG_SCALE))
    return torch.stack([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2], dim=1)


def encode_deltas(ref, gt):
    ref = np.asarray(ref, dtype=float).reshape(-1, 4)
    gt = np.asarray(gt, dtype=float).reshape(-1, 4)
    w, h = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    return np.stack(
        [
            (gt[:, 0] + gw / 2 - ref[:, 0] - w / 2) / w,
            (gt[:, 1] + gh / 2 - ref[:, 1] - h / 2) / h,
            np.log(gw / w),
            np.log(gh / h),
        ],
        axis=1,
    )


def _sanitize(box_t, size, min_side=1.0):
    """Clamp a decoded box into ``[0, size]`` with every side at least ``min_side``.

    The refinement stage encodes its targets relative to this box, so a
    collapsed rough box would blow those targets up.
    """
    out = []
    for lo, hi in ((float(box_t[0]), float(box_t[2])), (float(box_t[1]), float(box_t[3]))):
        if not (math.isfinite(lo) and math.isfinite(hi)):
            lo, hi = 0.0, size
        lo, hi = sorted((min(max(lo, 0.0), size), min(max(hi, 0.0), size)))
        if hi - lo < min_side:
            mid = min(max(0.5 * (lo + hi), min_side / 2), size - min_side / 2)
            lo, hi = mid - min_side / 2, mid + min_side / 2
        out.append((lo, hi))
    (x0, x1), (y0, y1) = out
    return (x0, y0, x1, y1)


def run_heads(net, feats, b, anchor_mask, anchors, prior_choice=None):
    """Two-stage decode for one figure in input-pixel coordinates.

    Returns per-letter tensors: ``rough_raw`` ``(N, A, 5)``, chosen prior
    indices, rough boxes ``(N, 4)`` (detached), refinement outputs
    ``(N, 4 + K)`` and refined boxes ``(N, 4)``. ``prior_choice`` forces the
    prior per letter (training); otherwise the highest-objectness prior wins.
    """
    stride = net.stride
    gh, gw = feats.shape[-2:]
    size = gh * stride
    letters = anchor_mask.letters
    if not letters:
        empty = feats.new_zeros((0, 4))
        return {"letters": [], "rough_raw": feats.new_zeros((0, net.n_anchors, 5)), "prior": [], "rough": empty, "refine": feats.new_zeros((0, 4 + net.n_categories)), "refined": empty}
    rough_raw, rough, prior = [], [], []
    for i, (r, c, letter) in enumerate(anchor_mask.cells):
        raw = _cell_rough(net, feats, b, r, c)
        boxes = decode_rough(raw, r, c, anchors, stride)
        a = int(prior_choice[i]) if prior_choice is not None else int(torch.argmax(raw[:, 4]))
        rough_raw.append(raw)
        prior.append(a)
        rough.append(boxes[a].detach())
    rough = torch.stack(rough)
    clean = [_sanitize(bx, size, stride) for bx in rough]
    latent = rasterize_latent_mask(
        {l: [v / stride for v in bx] for l, bx in zip(letters, clean)}, (gh, gw)
    )
    pooled = []
    geom = []
    for l, bx in zip(letters, clean):
        own = torch.from_numpy(latent.owners[l])
        pooled.append(feats[b][:, own].mean(dim=1))
        x0, y0, x1, y1 = bx
        geom.append([(x0 + x1) / (2 * size), (y0 + y1) / (2 * size), (x1 - x0) / size, (y1 - y0) / size])
    z = torch.cat([torch.stack(pooled), torch.tensor(geom, dtype=feats.dtype)], dim=1)
    refine = net.refine_head(z)
    rough_clean = torch.tensor(clean, dtype=feats.dtype)
    refined = apply_deltas(rough_clean, refine[:, :4])
    return {
        "letters": letters,
        "rough_raw": torch.stack(rough_raw),
        "prior": prior,
        "rough": rough_clean,
        "refine": refine,
        "refined": refined,
        "latent": latent,
    }


def master_loss(outputs, targets, weights=None):
    """Rough-box + objectness + refined-box regression + category cross-entropy.

    ``outputs`` holds ``rough_raw`` ``(N, A, 5)`` and ``refine`` ``(N, 4 + K)``;
    ``targets`` holds ``prior`` ``(N,)``, ``rough`` ``(N, 4)`` encoded against
    the chosen prior, ``refine`` ``(N, 4)`` encoded against the rough box and
    ``category`` ``(N,)``. Averaged over instances.
    """
    w = {"rough": 1.0, "obj": 1.0, "refine": 1.0, "category": 1.0}
    w.update(weights or {})
    rough_raw = outputs["rough_raw"]
    n = rough_raw.shape[0]
    if n == 0:
        return rough_raw.sum() * 0
    prior = torch.as_tensor(targets["prior"], dtype=torch.long)
    chosen = rough_raw[torch.arange(n), prior]
    t_rough = torch.as_tensor(targets["rough"], dtype=rough_raw.dtype)
    rough = ((chosen[:, :4] - t_rough) ** 2).sum(dim=1).mean()
    obj_t = F.one_hot(prior, rough_raw.shape[1]).to(rough_raw.dtype)
    obj = F.binary_cross_entropy_with_logits(rough_raw[:, :, 4], obj_t, reduction="none").sum(dim=1).mean()
    refine_out = outputs["refine"]
    t_ref = torch.as_tensor(targets["refine"], dtype=refine_out.dtype)
    refine = ((refine_out[:, :4] - t_ref) ** 2).sum(dim=1).mean()
    category = F.cross_entropy(refine_out[:, 4:], torch.as_tensor(targets["category"], dtype=torch.long))
    return w["rough"] * rough + w["obj"] * obj + w["refine"] * refine + w["category"] * category


def figure_targets(net, feats, b, anchor_mask, anchors, gt_masters):
    """Forward one figure with priors chosen against ground truth; return outputs and targets."""
    stride = net.stride
    by_letter = {m.letter: m for m in gt_masters if m.letter is not None}
    present = set(anchor_mask.letters)
    missing = sorted(set(by_letter) - present)
    if missing:
        raise ValueError(f"ground-truth master letters {missing} absent from the anchor mask")
    keep = AnchorMask(anchor_mask.grid_h, anchor_mask.grid_w, tuple(c for c in anchor_mask.cells if c[2] in by_letter))
    priors, t_rough, cats = [], [], []
    for r, c, letter in keep.cells:
        box = by_letter[letter].box.as_tuple()
        a = int(np.argmax(_shape_iou(box[2] - box[0], box[3] - box[1], anchors)))
        priors.append(a)
        t_rough.append(encode_rough(box, r, c, anchors[a], stride))
        cats.append(CATEGORIES.index(by_letter[letter].category))
    out = run_heads(net, feats, b, keep, anchors, prior_choice=priors)
    gts = [by_letter[l].box.as_tuple() for l in keep.letters]
    t_ref = encode_deltas(out["rough"].detach().numpy(), gts) if gts else np.zeros((0, 4))
    targets = {"prior": priors, "rough": np.array(t_rough).reshape(-1, 4), "refine": t_ref, "category": cats}
    return out, targets


def _scaled_labels(labels, scale):
    return [SubfigureLabel(l.letter, l.box.scaled(scale), l.confidence) for l in labels]


def prepare_input(image, labels, input_size):
    """Letterboxed 4-channel tensor, scale factor and scaled labels for one figure."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    mask = build_binary_mask(labels, (H, W))
    lb, scale = letterbox(img, input_size)
    lm = letterbox_mask(mask.values, input_size, scale)
    x = torch.cat([to_tensor(lb), torch.from_numpy(lm.astype(np.float32))[None, None]], dim=1)
    return x, scale, _scaled_labels(labels, scale)


class MasterDetector(BaseEstimator):
    """Master image detector conditioned on subfigure labels."""

    def __init__(self, input_size=192, n_anchors=3, steps=1500, batch_size=16, lr=0.02, momentum=0.9, augment=True, seed=0):
        self.input_size = input_size
        self.n_anchors = n_anchors
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.augment = augment
        self.seed = seed

    def _sample(self, img, mask, rec, rng, stride):
        size = self.input_size
        if rng is None:
            canvas, scale = letterbox(img, size)
            offset = (0, 0)
        else:
            canvas, scale, offset = random_placement(img, size, rng)
        m = place_mask(mask, size, scale, offset)
        ox, oy = offset

        def move(b):
            return BBox(b.x_min * scale + ox, b.y_min * scale + oy, b.x_max * scale + ox, b.y_max * scale + oy)

        labels = [SubfigureLabel(l.letter, move(l.box), l.confidence) for l in rec.labels]
        x = torch.cat([to_tensor(canvas), torch.from_numpy(m.astype(np.float32))[None, None]], dim=1)
        am = project_anchor_mask(labels, (size, size), stride)
        gts = [MasterImage(move(g.box), g.category, g.letter) for g in rec.masters]
        return x, am, gts

    def _lr_at(self, step):
        return self.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * step / max(1, self.steps))))

    def fit(self, images, records):
        """Train from figures and their records (ground-truth labels build the masks)."""
        images = [np.asarray(i) for i in images]
        records = list(records)
        if not images:
            raise ValueError("no training images")
        if len(images) != len(records):
            raise ValueError(f"{len(images)} images but {len(records)} records")
        masks = [build_binary_mask(r.labels, i.shape[:2]).values for i, r in zip(images, records)]
        sizes = []
        for img, rec in zip(images, records):
            scale = self.input_size / max(img.shape[:2])
            sizes += [(m.box.width * scale, m.box.height * scale) for m in rec.masters]
        if not sizes:
            raise ValueError("no master boxes to train on")
        self.anchors_ = kmeans_anchors(sizes, self.n_anchors, self.seed)

        seed_everything(self.seed)
        net = MasterNet(n_anchors=len(self.anchors_))
        stride = net.stride
        cache = {}
        opt = torch.optim.SGD(net.parameters(), lr=self.lr, momentum=self.momentum, weight_decay=5e-4)
        rng = np.random.default_rng([self.seed, 41])
        self.loss_curve_ = []
        net.train()
        for step in range(self.steps):
            for g in opt.param_groups:
                g["lr"] = self._lr_at(step)
            idx = rng.choice(len(images), size=min(self.batch_size, len(images)), replace=False)
            batch = []
            for i in idx:
                if self.augment:
                    batch.append(self._sample(images[i], masks[i], records[i], rng, stride))
                else:
                    if i not in cache:
                        cache[i] = self._sample(images[i], masks[i], records[i], None, stride)
                    batch.append(cache[i])
            x = torch.cat([b[0] for b in batch])
            if self.augment:
                x = torch.cat([photometric_jitter(x[:, :3], rng), x[:, 3:]], dim=1)
            feats = net.features(x)
            losses = []
            for j, (_, am, gts) in enumerate(batch):
                if not len(am):
                    continue
                out, tg = figure_targets(net, feats, j, am, self.anchors_, gts)
                losses.append(master_loss(out, tg))
            if not losses:
                continue
            loss = torch.stack(losses).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            self.loss_curve_.append(float(loss.detach()))
        net.eval()
        self.net_ = net
        return self

    @property
    def stride(self):
        return self.net_.stride

    def forward_features(self, image, mask):
        check_is_fitted(self, "net_")
        return forward_features(self, image, mask)

    def predict_one(self, image, labels):
        """One :class:`MasterPrediction` per distinct label letter."""
        check_is_fitted(self, "net_")
        img = np.asarray(image)
        H, W = img.shape[:2]
        x, scale, scaled = prepare_input(img, labels, self.input_size)
        am = project_anchor_mask(scaled, (self.input_size, self.input_size), self.net_.stride)
        with torch.no_grad():
            feats = self.net_.features(x)
        return decode_masters(self, feats, am, (H, W))

    def predict(self, images, labels):
        return [self.predict_one(img, labs) for img, labs in zip(images, labels)]

    def save(self, path):
        check_is_fitted(self, "net_")
        header = {"params": self.get_params(), "anchors": [list(a) for a in self.anchors_], "categories": list(CATEGORIES)}
        save_checkpoint(path, "master-detector", header, self.net_.state_dict())

    @classmethod
    def load(cls, path):
        header, state = load_checkpoint(path, kind="master-detector")
        model = cls(**header["params"])
        model.anchors_ = [tuple(a) for a in header["anchors"]]
        net = MasterNet(n_anchors=len(model.anchors_))
        net.load_state_dict(state)
        net.eval()
        model.net_ = net
        return model


def forward_features(model, image, mask):
    """Feature grid ``(C, H/stride, W/stride)`` for an image and a same-size mask.

    ``image`` is HxWx3 (uint8) and ``mask`` a :class:`BinaryMask` or HxW array;
    both are fed at their own resolution, which must be a multiple of the stride.
    """
    net = model.net_ if hasattr(model, "net_") else model
    img = np.asarray(image)
    m = np.asarray(getattr(mask, "values", mask))
    if img.shape[:2] != m.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {m.shape} dims differ")
    x = torch.cat([to_tensor(img), torch.from_numpy(m.astype(np.float32))[None, None]], dim=1)
    with torch.no_grad():
        return net.features(x.to(next(net.parameters()).dtype))[0]


def decode_masters(model, features, anchor_mask, image_dims):
    """Exactly one :class:`MasterPrediction` per anchor-mask letter, in original pixels.

    ``features`` is the grid of the letterboxed input (``(C, h, w)`` or
    ``(1, C, h, w)``); ``image_dims`` is the original ``(height, width)``.
    """
    net = model.net_ if hasattr(model, "net_") else model
    anchors = model.anchors_
    feats = features if features.dim() == 4 else features[None]
    gh, gw = feats.shape[-2:]
    if (anchor_mask.grid_h, anchor_mask.grid_w) != (gh, gw):
        raise ValueError("anchor mask does not match the feature grid")
    if not len(anchor_mask):
        return []
    H, W = image_dims
    scale = gh * net.stride / max(H, W)
    with torch.no_grad():
        out = run_heads(net, feats, 0, anchor_mask, anchors)
    preds = []
    for i, letter in enumerate(out["letters"]):
        raw = out["rough_raw"][i]
        a = out["prior"][i]
        conf = float(torch.sigmoid(raw[a, 4]))
        probs = torch.softmax(out["refine"][i, 4:].double(), dim=0).numpy()
        rough = _to_image_box(out["rough"][i], scale, W, H)
        refined = _to_image_box(out["refined"][i], scale, W, H)
        preds.append(MasterPrediction(letter, rough, refined, tuple(float(p) for p in probs), conf))
    return preds


def _to_image_box(box_t, scale, W, H):
    x0, y0, x1, y1 = (float(v) / scale for v in box_t)
    x0, x1 = min(max(x0, 0.0), W), min(max(x1, 0.0), W)
    y0, y1 = min(max(y0, 0.0), H), min(max(y1, 0.0), H)
    if x1 - x0 < 1.0:
        x0 = min(max(0.0, 0.5 * (x0 + x1) - 0.5), W - 1.0)
        x1 = x0 + 1.0
    if y1 - y0 < 1.0:
        y0 = min(max(0.0, 0.5 * (y0 + y1) - 0.5), H - 1.0)
        y1 = y0 + 1.0
    return BBox(x0, y0, x1, y1)


def evaluate_masters(predictions, ground_truths, iou_thresh=0.5, with_category=False):
    """AP of master predictions.

    ``predictions`` is a list (per figure) of :class:`MasterPrediction` and
    ``ground_truths`` a list of :class:`MasterImage` lists. Class-agnostic
    unless ``with_category`` is set, in which case AP is per category.
    """
    pairs = []
    for preds, gts in zip(predictions, ground_truths):
        dets = [
            Detection(p.refined_box, p.category if with_category else None, p.confidence) for p in preds
        ]
        gt = [(m.category if with_category else None, m.box) for m in gts]
        pairs.append((dets, gt))
    classes = list(CATEGORIES) if with_category else None
    return evaluate_detections(pairs, iou_thresh=iou_thresh, classes=classes, class_agnostic=not with_category)
