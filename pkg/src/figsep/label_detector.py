"""Single-stage grid detector for subfigure labels, with classifier-regularized fine-tuning."""

from __future__ import annotations

import copy
import math
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.cluster import KMeans
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .annotation import BBox, SubfigureLabel
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import BOX_CONTEXT
from .layers import (
    SmallBackbone,
    conv_bn,
    crop_boxes,
    letterbox,
    photometric_jitter,
    random_placement,
    seed_everything,
    to_tensor,
)
from .metrics import Detection, iou_matrix, nms

logger = logging.getLogger(__name__)

OBJ_PRIOR_BIAS = -4.0
MAX_LOG_SCALE = 4.0


class GridDetector(nn.Module):
    """Backbone plus a per-cell, per-prior head ``(tx, ty, tw, th, obj, classes...)``."""

    def __init__(
        self,
        n_classes,
        n_anchors,
        widths=(16, 32, 32, 64, 64),
        strides=(2, 2, 1, 2, 1),
        dilations=None,
        head_width=64,
    ):
        super().__init__()
        self.n_classes = n_classes
        self.n_anchors = n_anchors
        self.backbone = SmallBackbone(3, widths, strides, dilations)
        self.stride = self.backbone.stride
        self.neck = conv_bn(self.backbone.out_channels, head_width)
        self.head = nn.Conv2d(head_width, n_anchors * (5 + n_classes), 1)
        with torch.no_grad():
            bias = self.head.bias.view(n_anchors, 5 + n_classes)
            bias.zero_()
            bias[:, 4] = OBJ_PRIOR_BIAS

    def forward(self, x):
        out = self.head(self.neck(self.backbone(x)))
        B, _, H, W = out.shape
        return out.view(B, self.n_anchors, 5 + self.n_classes, H, W)


@dataclass
class DetectorLoss:
    box: torch.Tensor
    obj: torch.Tensor
    cls: torch.Tensor
    reg: torch.Tensor
    weights: dict = field(default_factory=lambda: {"box": 1.0, "obj": 1.0, "cls": 1.0, "reg": 0.0})

    @property
    def total(self):
        w = self.weights
        out = w["box"] * self.box + w["obj"] * self.obj + w["cls"] * self.cls
        if w["reg"] != 0:
            out = out + w["reg"] * self.reg
        return out

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in ("box", "obj", "cls", "reg")} | {
            "total": float(self.total.detach())
        }


@dataclass
class GridTargets:
    """Anchor assignment for a batch.

    ``resp`` marks the anchors that carry box and class targets: each ground
    truth's own anchor (its center cell and best-shaped prior) plus every
    prior overlapping a ground truth at ``pos_thresh`` or more, regressed onto
    that ground truth. ``obj_pos`` equals ``resp``; ``obj_neg`` marks priors
    below ``neg_thresh``; everything else is ignored.
    """

    resp: torch.Tensor
    obj_pos: torch.Tensor
    obj_neg: torch.Tensor
    tbox: torch.Tensor
    tcls: torch.Tensor
    positives: list  # (b, a, r, c, class_index)


def kmeans_anchors(sizes, k=3, seed=0):
    """Prior (width, height) pairs from k-means over box sizes, sorted by area."""
    sizes = np.asarray(sizes, dtype=float).reshape(-1, 2)
    if len(sizes) == 0:
        raise ValueError("no boxes to fit anchor priors on")
    k = min(k, len(np.unique(sizes, axis=0)))
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(sizes)
    centers = km.cluster_centers_
    return [tuple(map(float, c)) for c in centers[np.argsort(centers.prod(axis=1))]]


def _shape_iou(w, h, anchors):
    a = np.asarray(anchors)
    inter = np.minimum(w, a[:, 0]) * np.minimum(h, a[:, 1])
    return inter / (w * h + a[:, 0] * a[:, 1] - inter)


def prior_boxes(anchors, stride, grid_h, grid_w):
    """Every prior centred on every cell, as ``(A, gh, gw, 4)`` xyxy."""
    a = np.asarray(anchors, dtype=float)
    cy, cx = np.meshgrid((np.arange(grid_h) + 0.5) * stride, (np.arange(grid_w) + 0.5) * stride, indexing="ij")
    w = a[:, 0][:, None, None]
    h = a[:, 1][:, None, None]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def build_targets(gt_boxes, gt_classes, anchors, stride, grid_h, grid_w, pos_thresh=0.7, neg_thresh=0.3, dtype=torch.float32):
    """Assign ground truths (input-pixel xyxy arrays per image) to grid anchors."""
    if not 0.0 <= neg_thresh < pos_thresh <= 1.0:
        raise ValueError(f"need 0 <= neg_thresh < pos_thresh <= 1, got ({neg_thresh}, {pos_thresh})")
    B, A = len(gt_boxes), len(anchors)
    resp = torch.zeros(B, A, grid_h, grid_w, dtype=torch.bool)
    obj_pos = torch.zeros_like(resp)
    obj_neg = torch.zeros_like(resp)
    tbox = torch.zeros(B, A, grid_h, grid_w, 4, dtype=dtype)
    tcls = torch.zeros(B, A, grid_h, grid_w, dtype=torch.long)
    priors = prior_boxes(anchors, stride, grid_h, grid_w).reshape(-1, 4)
    positives = []
    for b in range(B):
        boxes = np.asarray(gt_boxes[b], dtype=float).reshape(-1, 4)
        if len(boxes) == 0:
            obj_neg[b] = True
            continue
        ious = iou_matrix(priors, boxes)
        best = ious.max(axis=1).reshape(A, grid_h, grid_w)
        owner = ious.argmax(axis=1).reshape(A, grid_h, grid_w)
        obj_neg[b] = torch.from_numpy(best < neg_thresh)
        assigned = {}
        for g, (x0, y0, x1, y1) in enumerate(boxes):
            cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            c = min(int(cx // stride), grid_w - 1)
            r = min(int(cy // stride), grid_h - 1)
            assigned[(int(np.argmax(_shape_iou(x1 - x0, y1 - y0, anchors))), r, c)] = g
        for a, r, c in zip(*np.nonzero(best >= pos_thresh)):
            assigned.setdefault((int(a), int(r), int(c)), int(owner[a, r, c]))
        for (a, r, c), g in sorted(assigned.items()):
            x0, y0, x1, y1 = boxes[g]
            k = int(gt_classes[b][g])
            # a centre just across the cell edge is clipped onto it
            ox = np.clip(0.5 * (x0 + x1) / stride - c, 1e-4, 1 - 1e-4)
            oy = np.clip(0.5 * (y0 + y1) / stride - r, 1e-4, 1 - 1e-4)
            tbox[b, a, r, c] = torch.tensor(
                [ox, oy, np.log((x1 - x0) / anchors[a][0]), np.log((y1 - y0) / anchors[a][1])], dtype=dtype
            )
            tcls[b, a, r, c] = k
            resp[b, a, r, c] = True
            positives.append((b, a, r, c, k))
    obj_pos |= resp
    obj_neg &= ~obj_pos
    return GridTargets(resp, obj_pos, obj_neg, tbox, tcls, positives)


def decode_raw_boxes(raw, anchors, stride):
    """Raw head output ``(B, A, 5+C, H, W)`` to xyxy boxes ``(B, A, H, W, 4)``."""
    B, A, _, H, W = raw.shape
    cols = torch.arange(W, dtype=raw.dtype).view(1, 1, 1, W)
    rows = torch.arange(H, dtype=raw.dtype).view(1, 1, H, 1)
    anc = torch.as_tensor(anchors, dtype=raw.dtype)
    pw = anc[:, 0].view(1, A, 1, 1)
    ph = anc[:, 1].view(1, A, 1, 1)
    cx = (cols + torch.sigmoid(raw[:, :, 0])) * stride
    cy = (rows + torch.sigmoid(raw[:, :, 1])) * stride
    w = pw * torch.exp(raw[:, :, 2].clamp(max=MAX_LOG_SCALE))
    h = ph * torch.exp(raw[:, :, 3].clamp(max=MAX_LOG_SCALE))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def encode_targets_as_raw(targets, n_classes, logit=30.0, dtype=torch.float64):
    """Raw head output whose decoded predictions equal ``targets`` (testing aid)."""
    B, A, H, W = targets.resp.shape
    raw = torch.zeros(B, A, 5 + n_classes, H, W, dtype=dtype)
    t = targets.tbox.to(dtype)
    raw[:, :, 0] = torch.logit(t[..., 0].clamp(1e-6, 1 - 1e-6))
    raw[:, :, 1] = torch.logit(t[..., 1].clamp(1e-6, 1 - 1e-6))
    raw[:, :, 2] = t[..., 2]
    raw[:, :, 3] = t[..., 3]
    raw[:, :, 4] = torch.where(targets.obj_pos, logit, -logit).to(dtype)
    onehot = F.one_hot(targets.tcls, n_classes).permute(0, 1, 4, 2, 3).to(dtype)
    raw[:, :, 5:] = (2 * onehot - 1) * logit
    return raw


def detector_base_loss(raw, targets, weights=None):
    """Box, objectness and class terms, summed per image and averaged over the batch.

    The classifier-regularization term is zero here.
    """
    n_pos = int(targets.resp.sum())
    if n_pos == 0 and not bool(targets.obj_neg.any()):
        raise ValueError("no ground truth and no negative anchors: nothing to learn from")
    B = raw.shape[0]
    p = raw.permute(0, 1, 3, 4, 2)  # (B, A, H, W, 5+C)
    zero = raw.sum() * 0
    if n_pos:
        pr = p[targets.resp]
        tb = targets.tbox[targets.resp].to(raw.dtype)
        pred = torch.cat([torch.sigmoid(pr[:, :2]), pr[:, 2:4]], dim=1)
        box = ((pred - tb) ** 2).sum() / B
        cls = F.cross_entropy(pr[:, 5:], targets.tcls[targets.resp], reduction="sum") / B
    else:
        box = cls = zero
    sel = targets.obj_pos | targets.obj_neg
    obj_t = targets.obj_pos[sel].to(raw.dtype)
    obj = F.binary_cross_entropy_with_logits(p[..., 4][sel], obj_t, reduction="sum") / B
    w = {"box": 1.0, "obj": 1.0, "cls": 1.0, "reg": 0.0}
    w.update(weights or {})
    w["reg"] = 0.0
    return DetectorLoss(box=box, obj=obj, cls=cls, reg=zero, weights=w)


def classifier_regularization(classifier_net, images, boxes, letters, batch_index=None, input_size=32, context=BOX_CONTEXT, min_size=1.0):
    """Frozen-classifier cross-entropy on differentiable crops of positive proposals.

    ``boxes`` is ``(N, 4)`` xyxy in pixels of ``images`` (``(B, C, H, W)``) and
    ``letters`` the ``N`` target class indices. Boxes are clamped to the image;
    any box thinner than ``min_size`` afterwards is skipped. Returns
    ``(term, n_skipped)``; the term is 0 when no proposal survives.
    """
    for p in classifier_net.parameters():
        if p.requires_grad:
            raise ValueError("classifier must be frozen (requires_grad=False)")
    if classifier_net.training:
        raise ValueError("classifier must be in eval mode")
    zero = images.sum() * 0 + (boxes.sum() * 0 if boxes.numel() else 0)
    if boxes.shape[0] == 0:
        return zero, 0
    H, W = images.shape[-2:]
    x = boxes[:, [0, 2]].clamp(0, W)
    y = boxes[:, [1, 3]].clamp(0, H)
    clamped = torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)
    ok = ((clamped[:, 2] - clamped[:, 0]) >= min_size) & ((clamped[:, 3] - clamped[:, 1]) >= min_size)
    n_skipped = int((~ok).sum())
    if not bool(ok.any()):
        return zero, n_skipped
    idx = batch_index[ok] if batch_index is not None else None
    crops = crop_boxes(images, clamped[ok], input_size, context, batch_index=idx)
    logits = classifier_net(crops.to(next(classifier_net.parameters()).dtype))
    target = torch.as_tensor(letters)[ok]
    return F.cross_entropy(logits, target), n_skipped


class LabelDetector(BaseEstimator):
    """Subfigure-label detector.

    Trained in two phases: ``base_steps`` on the plain detection loss, then
    ``finetune_steps`` adding ``reg_weight`` times the frozen-classifier
    regularization (only when a classifier is passed to ``fit``).

    Parameters
    ----------
    recognition : {"auto", "head", "classifier"}
        Letter identity at inference: the detector's own class head, or the
        frozen classifier applied to each candidate box. ``"auto"`` uses the
        classifier whenever one was supplied for fine-tuning.
    augment : bool
        Random shrink/placement on the canvas plus photometric jitter per
        training sample. The regularization crops see the un-jittered pixels.
    """

    def __init__(
        self,
        alphabet="abcdefgh",
        input_size=192,
        n_anchors=3,
        base_steps=1500,
        finetune_steps=300,
        batch_size=16,
        lr=0.02,
        momentum=0.9,
        reg_weight=1.0,
        pos_thresh=0.7,
        neg_thresh=0.3,
        conf_threshold=0.25,
        nms_iou=0.45,
        recognition="auto",
        augment=True,
        seed=0,
    ):
        self.alphabet = alphabet
        self.input_size = input_size
        self.n_anchors = n_anchors
        self.base_steps = base_steps
        self.finetune_steps = finetune_steps
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.reg_weight = reg_weight
        self.pos_thresh = pos_thresh
        self.neg_thresh = neg_thresh
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou
        self.recognition = recognition
        self.augment = augment
        self.seed = seed

    # -- training -------------------------------------------------------------

    def _prepare(self, images, labels):
        index = {c: i for i, c in enumerate(self.alphabet)}
        xs, boxes, classes = [], [], []
        for img, labs in zip(images, labels):
            lb, scale = letterbox(img, self.input_size)
            xs.append(torch.from_numpy(lb).permute(2, 0, 1))
            bad = [l.letter for l in labs if l.letter not in index]
            if bad:
                raise ValueError(f"label letters outside the alphabet: {bad}")
            boxes.append(np.array([np.array(l.box.as_tuple()) * scale for l in labs]).reshape(-1, 4))
            classes.append([index[l.letter] for l in labs])
        return torch.stack(xs), boxes, classes

    def _augmented_batch(self, images, labels, idx, rng):
        xs, boxes = [], []
        for i in idx:
            canvas, scale, (ox, oy) = random_placement(images[i], self.input_size, rng)
            xs.append(torch.from_numpy(canvas).permute(2, 0, 1))
            b = np.array([l.box.as_tuple() for l in labels[i]], dtype=float).reshape(-1, 4) * scale
            boxes.append(b + np.array([ox, oy, ox, oy]))
        return torch.stack(xs).float() / 255.0, boxes

    def fit(self, images, labels, classifier=None):
        """Train on letterboxed ``images`` with per-image lists of :class:`SubfigureLabel`."""
        images = list(images)
        labels = [list(l) for l in labels]
        if not images:
            raise ValueError("no training images")
        if classifier is not None:
            check_is_fitted(classifier, "net_")
            if tuple(classifier.alphabet) != tuple(self.alphabet):
                raise ValueError(
                    f"classifier alphabet {''.join(classifier.alphabet)!r} does not match "
                    f"detector alphabet {''.join(self.alphabet)!r}"
                )
            if self.finetune_steps > 0 and self.reg_weight <= 0 and self.reg_weight != 0:
                raise ValueError("reg_weight must be > 0 when fine-tuning with a classifier")
        data, gt_boxes, gt_classes = self._prepare(images, labels)
        sizes = [b[:, 2:] - b[:, :2] for b in gt_boxes if len(b)]
        self.anchors_ = kmeans_anchors(np.concatenate(sizes), self.n_anchors, self.seed)

        seed_everything(self.seed)
        net = GridDetector(len(self.alphabet), len(self.anchors_))
        stride = net.stride
        if self.input_size % stride:
            raise ValueError(f"input size {self.input_size} not divisible by stride {stride}")
        grid = self.input_size // stride
        opt = torch.optim.SGD(net.parameters(), lr=self.lr, momentum=self.momentum, weight_decay=5e-4)
        rng = np.random.default_rng([self.seed, 31])
        self.loss_log_ = []
        self.n_reg_skipped_ = 0
        self.base_state_ = None
        total_steps = self.base_steps + self.finetune_steps
        for step in range(total_steps):
            for g in opt.param_groups:
                g["lr"] = self._lr_at(step)
            if step == self.base_steps:
                logger.info("phase boundary at step %d: fine-tuning %s classifier", step, "with" if classifier is not None else "without")
                self.base_state_ = copy.deepcopy(net.state_dict())
            idx = rng.choice(len(images), size=min(self.batch_size, len(images)), replace=False)
            if self.augment:
                x, batch_boxes = self._augmented_batch(images, labels, idx, rng)
                x_net = photometric_jitter(x, rng)
            else:
                x = data[idx].float() / 255.0
                batch_boxes = [gt_boxes[i] for i in idx]
                x_net = x
            tg = build_targets(
                batch_boxes,
                [gt_classes[i] for i in idx],
                self.anchors_,
                stride,
                grid,
                grid,
                self.pos_thresh,
                self.neg_thresh,
            )
            net.train()
            raw = net(x_net)
            loss = detector_base_loss(raw, tg)
            use_reg = step >= self.base_steps and classifier is not None and self.reg_weight != 0
            if use_reg and tg.positives:
                pos = torch.tensor(tg.positives)
                decoded = decode_raw_boxes(raw, self.anchors_, stride)
                boxes = decoded[pos[:, 0], pos[:, 1], pos[:, 2], pos[:, 3]]
                reg, skipped = classifier_regularization(
                    classifier.net_, x, boxes, pos[:, 4], batch_index=pos[:, 0], input_size=classifier.input_size
                )
                self.n_reg_skipped_ += skipped
                loss.reg = reg
                loss.weights["reg"] = self.reg_weight
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            self.loss_log_.append({"step": step, **loss.as_floats()})
        if self.base_state_ is None:
            self.base_state_ = copy.deepcopy(net.state_dict())
        net.eval()
        self.net_ = net
        self.classifier_ = classifier
        self.phase_boundary_ = self.base_steps
        return self

    def _lr_at(self, step):
        # cosine decay over the base phase; fine-tuning runs at a tenth of lr
        if step >= self.base_steps:
            return 0.1 * self.lr
        return self.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * step / max(1, self.base_steps))))

    @property
    def loss_curve_(self):
        return [r["total"] for r in self.loss_log_]

    def base_detector(self):
        """The phase-one model (no classifier), as a separate fitted estimator."""
        check_is_fitted(self, "net_")
        other = copy.copy(self)
        other.set_params(recognition="head" if self.recognition == "auto" else self.recognition)
        net = GridDetector(len(self.alphabet), len(self.anchors_))
        net.load_state_dict(self.base_state_)
        net.eval()
        other.net_ = net
        other.classifier_ = None if other.recognition == "head" else self.classifier_
        return other

    # -- inference ------------------------------------------------------------

    def _use_classifier(self):
        if self.recognition == "classifier":
            if getattr(self, "classifier_", None) is None:
                raise ValueError("recognition='classifier' requires a classifier")
            return True
        if self.recognition == "head":
            return False
        return getattr(self, "classifier_", None) is not None

    def detect(self, image, conf_threshold=None):
        """Detected :class:`SubfigureLabel` list in original image pixels."""
        check_is_fitted(self, "net_")
        conf = self.conf_threshold if conf_threshold is None else conf_threshold
        img = np.asarray(image)
        H, W = img.shape[:2]
        lb, scale = letterbox(img, self.input_size)
        x = to_tensor(lb)
        with torch.no_grad():
            raw = self.net_(x)
        stride = self.net_.stride
        boxes = decode_raw_boxes(raw, self.anchors_, stride)[0].reshape(-1, 4).numpy()
        obj = torch.sigmoid(raw[0, :, 4]).reshape(-1).numpy()
        cand = np.nonzero(obj >= min(conf, 0.5) * 0.5)[0]
        if len(cand) == 0:
            return []
        if self._use_classifier():
            # recognise from the source pixels; the letterboxed copy may be downscaled
            probs = self.classifier_.proba_for_boxes(to_tensor(img), boxes[cand] / scale)
        else:
            cls_logits = raw[0, :, 5:].permute(0, 2, 3, 1).reshape(-1, len(self.alphabet))
            probs = torch.softmax(cls_logits[cand], dim=1).double().numpy()
        k = probs.argmax(axis=1)
        scores = obj[cand] * probs[np.arange(len(cand)), k]
        dets = []
        for j, s in enumerate(scores):
            if s < conf:
                continue
            box = BBox.from_xyxy(np.maximum(boxes[cand[j]], 0)) if np.all(boxes[cand[j], 2:] > np.maximum(boxes[cand[j], :2], 0)) else None
            if box is None:
                continue
            box = box.scaled(1 / scale).clip(W, H)
            if box is None:
                continue
            dets.append(Detection(box, self.alphabet[k[j]], float(min(max(s, 0.0), 1.0))))
        kept = nms(dets, self.nms_iou)
        return [SubfigureLabel(d.class_id, d.box, d.confidence) for d in kept]

    def predict(self, images, conf_threshold=None):
        return [self.detect(img, conf_threshold) for img in images]

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "net_")
        header = {
            "params": self.get_params(),
            "alphabet": list(self.alphabet),
            "anchors": [list(a) for a in self.anchors_],
            "uses_classifier": self.classifier_ is not None,
        }
        save_checkpoint(path, "label-detector", header, self.net_.state_dict())

    @classmethod
    def load(cls, path, classifier=None):
        header, state = load_checkpoint(path, kind="label-detector")
        model = cls(**header["params"])
        model.anchors_ = [tuple(a) for a in header["anchors"]]
        net = GridDetector(len(model.alphabet), len(model.anchors_))
        net.load_state_dict(state)
        net.eval()
        model.net_ = net
        if classifier is not None and tuple(classifier.alphabet) != tuple(model.alphabet):
            raise ValueError("classifier alphabet does not match detector alphabet")
        model.classifier_ = classifier if (classifier is not None and header.get("uses_classifier", True)) else None
        if model.recognition == "classifier" and model.classifier_ is None:
            model.classifier_ = classifier
        return model


def train_label_detector(images, labels, schedule=None, classifier=None, **params):
    """Functional form of :meth:`LabelDetector.fit`.

    ``schedule`` may carry ``base_steps``, ``finetune_steps``, ``batch_size``,
    ``lr``, ``reg_weight`` and ``seed``.
    """
    params = {**(schedule or {}), **params}
    return LabelDetector(**params).fit(images, labels, classifier=classifier)


def detect_labels(model, image, conf_threshold=None):
    return model.detect(image, conf_threshold)
