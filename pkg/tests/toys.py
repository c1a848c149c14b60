"""Toy models (under 1k parameters, float64) for finite-difference gradient checks."""

import numpy as np
import torch
from torch import nn

from figsep.label_detector import build_targets, classifier_regularization, decode_raw_boxes, detector_base_loss
from figsep.master_detector import master_loss

STRIDE = 8
ANCHORS = [(8.0, 8.0), (16.0, 12.0)]
N_CLASSES = 3


def central_differences(f, params, h=1e-6):
    """Numerical gradient of scalar ``f()`` with respect to each tensor in ``params``."""
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = f().item()
                flat[i] = old - h
                down = f().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            out.append(g)
    return out


def relative_error(f, params):
    """``||autograd - numeric|| / max(||autograd||, ||numeric||)`` over all parameters."""
    for p in params:
        p.grad = None
    f().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    numeric = torch.cat([g.reshape(-1) for g in central_differences(f, params)])
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


def n_params(params):
    return sum(p.numel() for p in params)


class ToyHead(nn.Module):
    """1x1 conv from fixed features to grid-detector raw outputs."""

    def __init__(self, c_in=3):
        super().__init__()
        self.conv = nn.Conv2d(c_in, len(ANCHORS) * (5 + N_CLASSES), 1)

    def forward(self, feats):
        out = self.conv(feats)
        B, _, H, W = out.shape
        return out.view(B, len(ANCHORS), 5 + N_CLASSES, H, W)


class ToyClassifier(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 4, 3, padding=1)
        self.fc = nn.Linear(4, N_CLASSES)

    def forward(self, x):
        return self.fc(torch.tanh(self.conv(x)).mean(dim=(2, 3)))


def frozen_toy_classifier(seed=0):
    torch.manual_seed(seed)
    clf = ToyClassifier().double().eval()
    for p in clf.parameters():
        p.requires_grad_(False)
    return clf


def detector_problem(seed=0, with_reg=False):
    """``(loss_fn, params)`` for the detector loss on a 2-image, 4x4-grid toy batch."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    head = ToyHead().double()
    feats = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    gt = [np.array([[3.0, 4.0, 12.0, 12.0], [14.0, 18.0, 30.0, 29.0]]), np.array([[9.0, 1.0, 20.0, 10.0]])]
    cls = [[0, 2], [1]]
    tg = build_targets(gt, cls, ANCHORS, STRIDE, 4, 4, dtype=torch.float64)
    images = torch.as_tensor(rng.random((2, 3, 32, 32)))
    clf = frozen_toy_classifier(seed)

    def loss():
        raw = head(feats)
        out = detector_base_loss(raw, tg)
        if with_reg:
            pos = torch.tensor(tg.positives)
            boxes = decode_raw_boxes(raw, ANCHORS, STRIDE)[pos[:, 0], pos[:, 1], pos[:, 2], pos[:, 3]]
            out.reg, _ = classifier_regularization(clf, images, boxes, pos[:, 4], batch_index=pos[:, 0], input_size=8)
            out.weights["reg"] = 1.0
        return out.total

    return loss, list(head.parameters())


def regularization_problem(seed=0):
    """Regularization term as a function of box coordinates produced by a tiny linear map."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    images = torch.as_tensor(rng.random((1, 3, 32, 32)))
    clf = frozen_toy_classifier(seed)
    base = torch.tensor([[4.0, 5.0, 14.0, 17.0], [16.0, 3.0, 27.0, 12.0], [9.0, 15.0, 22.0, 30.0]], dtype=torch.float64)
    z = torch.randn(3, 5, dtype=torch.float64)
    lin = nn.Linear(5, 4).double()
    letters = torch.tensor([0, 2, 1])

    def loss():
        term, _ = classifier_regularization(clf, images, base + lin(z), letters, input_size=8)
        return term

    return loss, list(lin.parameters())


def master_problem(seed=0, n=3, n_anchors=2, n_categories=5):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    rough = nn.Linear(6, n_anchors * 5).double()
    refine = nn.Linear(6, 4 + n_categories).double()
    feats = torch.randn(n, 6, dtype=torch.float64)
    targets = {
        "prior": rng.integers(0, n_anchors, n).tolist(),
        "rough": rng.normal(0, 0.5, (n, 4)),
        "refine": rng.normal(0, 0.2, (n, 4)),
        "category": rng.integers(0, n_categories, n).tolist(),
    }

    def loss():
        outputs = {"rough_raw": rough(feats).view(n, n_anchors, 5), "refine": refine(feats)}
        return master_loss(outputs, targets)

    return loss, list(rough.parameters()) + list(refine.parameters())


def random_master_model(seed=0, input_size=128):
    """Untrained master detector with fixed anchor priors."""
    from figsep.master_detector import MasterDetector, MasterNet

    torch.manual_seed(seed)
    m = MasterDetector(input_size=input_size)
    m.net_ = MasterNet(n_anchors=3).eval()
    m.anchors_ = [(20.0, 20.0), (40.0, 36.0), (70.0, 60.0)]
    return m


class StubLabelDetector:
    """Returns preset labels; ``by_shape`` maps image shapes to label lists."""

    alphabet = "abcdefgh"

    def __init__(self, labels=(), by_shape=None):
        self.labels = list(labels)
        self.by_shape = by_shape or {}

    def detect(self, image, conf_threshold=None):
        return list(self.by_shape.get(np.asarray(image).shape, self.labels))
