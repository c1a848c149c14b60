"""Balanced subfigure-letter classifier trained on real and on-the-fly synthetic patches."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import confusion_matrix
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import crop_boxes, patches_to_inputs, resnet_backbone, seed_everything
from .synth import SynthConfig, sample_at

logger = logging.getLogger(__name__)

# crops around detected glyph boxes are widened so the glyph fills roughly as
# much of the classifier input as it does in synthetic training patches
BOX_CONTEXT = 1.6


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    mixing_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.mixing_ratio <= 1.0:
            raise ValueError(f"mixing_ratio must lie in [0, 1], got {self.mixing_ratio}")


class LetterNet(nn.Module):
    """Small CNN for 32x32 letter patches (about 80k parameters)."""

    def __init__(self, n_classes, widths=(32, 48, 64, 64)):
        super().__init__()
        layers = []
        c = 3
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU()]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2))
            c = w
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(c, n_classes)

    def forward(self, x):
        return self.fc(self.features(x).mean(dim=(2, 3)))


class ResNetLetterNet(nn.Module):
    def __init__(self, n_classes, depth):
        super().__init__()
        self.trunk = resnet_backbone(depth)
        self.fc = nn.Linear(self.trunk.out_channels, n_classes)

    def forward(self, x):
        return self.fc(self.trunk(x).mean(dim=(2, 3)))


def build_network(n_classes, depth="small"):
    if depth == "small":
        return LetterNet(n_classes)
    return ResNetLetterNet(n_classes, int(depth))


class LabelClassifier(ClassifierMixin, BaseEstimator):
    """Letter classifier over a fixed alphabet.

    Parameters
    ----------
    alphabet : str
        Class letters, in output order.
    depth : "small" or int
        ``"small"`` for the desk-scale CNN, or a residual-network depth
        (18, 34, 50, 101, 152).
    input_size : int
        Side of the square network input.
    steps, batch_size, lr, momentum, seed :
        SGD schedule.
    mixing_ratio : float
        Fraction of each batch drawn from the synthetic stream; the rest comes
        from the real patches passed to ``fit``.
    synth : SynthConfig or None
        Synthetic stream configuration. Its alphabet is forced to ``alphabet``.
    """

    def __init__(
        self,
        alphabet="abcdefgh",
        depth="small",
        input_size=32,
        steps=4000,
        batch_size=64,
        lr=0.05,
        momentum=0.9,
        mixing_ratio=0.75,
        synth=None,
        seed=0,
    ):
        self.alphabet = alphabet
        self.depth = depth
        self.input_size = input_size
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.mixing_ratio = mixing_ratio
        self.synth = synth
        self.seed = seed

    def _schedule(self):
        return TrainSchedule(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            mixing_ratio=self.mixing_ratio,
            seed=self.seed,
        )

    def _synth_config(self):
        cfg = self.synth or SynthConfig()
        return dataclasses.replace(cfg, alphabet=tuple(self.alphabet), seed=self.seed)

    def fit(self, X=None, y=None, backgrounds=None):
        """Train on real patches ``X`` with letters ``y`` mixed with synthetic ones.

        ``backgrounds`` is the pool of label-free patches the synthetic stream
        pastes letters onto.
        """
        schedule = self._schedule()
        classes = tuple(self.alphabet)
        index = {c: i for i, c in enumerate(classes)}
        real_x = list(X) if X is not None else []
        real_y = [str(v).lower() for v in y] if y is not None else []
        if len(real_x) != len(real_y):
            raise ValueError("X and y have different lengths")
        bad = sorted({v for v in real_y if v not in index})
        if bad:
            raise ValueError(f"letters outside the alphabet: {bad}")
        pool = list(backgrounds) if backgrounds is not None else []
        ratio = schedule.mixing_ratio
        if not pool and not real_x:
            raise ValueError("empty training source: no real patches and no background pool")
        if not pool:
            ratio = 0.0
        elif not real_x:
            ratio = 1.0
        cfg = self._synth_config()
        real_inputs = patches_to_inputs(real_x, self.input_size) if real_x else None

        seed_everything(schedule.seed)
        net = build_network(len(classes), self.depth)
        opt = torch.optim.SGD(net.parameters(), lr=schedule.lr, momentum=schedule.momentum)
        net.train()
        losses = []
        k_synth = 0
        self.n_real_consumed_ = 0
        self.n_synthetic_consumed_ = 0
        for step in range(schedule.steps):
            rng = np.random.default_rng([schedule.seed, step, 17])
            xs, ys = [], []
            for _ in range(schedule.batch_size):
                if rng.random() < ratio:
                    img, letter = sample_at(cfg, pool, k_synth)
                    k_synth += 1
                    xs.append(img)
                    self.n_synthetic_consumed_ += 1
                else:
                    j = int(rng.integers(len(real_inputs)))
                    xs.append(j)
                    letter = real_y[j]
                    self.n_real_consumed_ += 1
                ys.append(index[letter])
            synth_idx = [i for i, v in enumerate(xs) if not isinstance(v, int)]
            xb = torch.empty(len(xs), 3, self.input_size, self.input_size)
            if synth_idx:
                xb[synth_idx] = patches_to_inputs([xs[i] for i in synth_idx], self.input_size)
            real_idx = [i for i, v in enumerate(xs) if isinstance(v, int)]
            if real_idx:
                xb[real_idx] = real_inputs[[xs[i] for i in real_idx]]
            yb = torch.tensor(ys)
            loss = F.cross_entropy(net(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net_ = net
        self.classes_ = np.array(classes)
        self.loss_curve_ = losses
        return self

    # -- inference ----------------------------------------------------------

    def _logits(self, x):
        check_is_fitted(self, "net_")
        with torch.no_grad():
            return self.net_(x)

    def predict_proba(self, X):
        X = list(X)
        if not X:
            return np.zeros((0, len(self.alphabet)))
        x = patches_to_inputs(X, self.input_size)
        return torch.softmax(self._logits(x), dim=1).double().numpy()

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def proba_for_boxes(self, image_tensor, boxes, context=BOX_CONTEXT):
        """Class probabilities for crops of ``boxes`` (xyxy pixels) in a 1xCxHxW tensor."""
        b = torch.as_tensor(np.asarray(boxes, dtype=np.float32).reshape(-1, 4))
        crops = crop_boxes(image_tensor.float(), b, self.input_size, context)
        return torch.softmax(self._logits(crops), dim=1).double().numpy()

    # -- persistence --------------------------------------------------------

    def header(self):
        params = self.get_params()
        params["synth"] = dataclasses.asdict(self._synth_config())
        return {
            "params": params,
            "alphabet": list(self.alphabet),
            "input_size": self.input_size,
            "depth": self.depth,
        }

    def save(self, path):
        check_is_fitted(self, "net_")
        save_checkpoint(path, "classifier", self.header(), self.net_.state_dict())

    @classmethod
    def load(cls, path):
        header, state = load_checkpoint(path, kind="classifier")
        params = dict(header["params"])
        params["synth"] = _synth_from_dict(params.get("synth"))
        model = cls(**params)
        net = build_network(len(model.alphabet), model.depth)
        net.load_state_dict(state)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        model.net_ = net
        model.classes_ = np.array(tuple(model.alphabet))
        return model


def _synth_from_dict(d):
    if d is None:
        return None
    d = dict(d)
    for key in ("alphabet", "fonts", "patch_size", "letter_scale"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    return SynthConfig(**d)


def train_classifier(backgrounds, schedule, real_patches=(), real_letters=(), **params):
    """Functional form of :meth:`LabelClassifier.fit`; returns ``(model, losses)``."""
    model = LabelClassifier(
        steps=schedule.steps,
        batch_size=schedule.batch_size,
        lr=schedule.lr,
        momentum=schedule.momentum,
        mixing_ratio=schedule.mixing_ratio,
        seed=schedule.seed,
        **params,
    )
    model.fit(list(real_patches) or None, list(real_letters) or None, backgrounds=backgrounds)
    return model, model.loss_curve_


def classify(model, patch):
    a = np.asarray(patch)
    if a.ndim not in (2, 3) or a.size == 0:
        raise ValueError(f"not an image: shape {a.shape}")
    return model.predict_proba([a])[0]


def accuracy_and_confusion(y_true, y_pred, classes):
    if len(y_true) == 0:
        raise ValueError("empty evaluation set")
    cm = confusion_matrix(list(y_true), list(y_pred), labels=list(classes))
    return float(np.trace(cm) / cm.sum()), cm


def evaluate_classifier(model, patches, letters):
    """Accuracy and confusion matrix (rows: true letter, cols: predicted)."""
    patches = list(patches)
    if not patches:
        raise ValueError("empty evaluation set")
    pred = model.predict(patches)
    return accuracy_and_confusion([str(l).lower() for l in letters], pred, model.classes_)


def label_patches(image, labels, size=32, context=BOX_CONTEXT):
    """Real training patches: square crops around ground-truth label boxes."""
    from .layers import to_tensor

    if not labels:
        return [], []
    t = to_tensor(image)
    boxes = torch.tensor([lab.box.as_tuple() for lab in labels], dtype=torch.float32)
    crops = crop_boxes(t, boxes, size, context)
    arr = (crops.permute(0, 2, 3, 1).numpy() * 255 + 0.5).clip(0, 255).astype(np.uint8)
    return list(arr), [lab.letter for lab in labels]
