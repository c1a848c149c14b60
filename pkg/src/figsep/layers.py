"""Shared network building blocks and image plumbing."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

PAD_VALUE = 127


def conv_bn(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.1),
    )


class SmallBackbone(nn.Module):
    """Plain strided conv stack; total stride is the product of ``strides``."""

    def __init__(self, in_channels, widths, strides, dilations=None):
        super().__init__()
        dilations = dilations or [1] * len(widths)
        layers = []
        c = in_channels
        for w, s, d in zip(widths, strides, dilations):
            layers.append(conv_bn(c, w, s, d))
            c = w
        self.body = nn.Sequential(*layers)
        self.out_channels = c
        self.stride = int(np.prod(strides))

    def forward(self, x):
        return self.body(x)


def resnet_backbone(depth, in_channels=3):
    """torchvision residual network trunk (no pooling / fc), stride 32."""
    import torchvision

    net = getattr(torchvision.models, f"resnet{depth}")(weights=None)
    if in_channels != 3:
        net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
    trunk = nn.Sequential(*list(net.children())[:-2])
    trunk.out_channels = net.fc.in_features
    trunk.stride = 32
    return trunk


def to_tensor(image):
    """HxWxC uint8 array to a 1xCxHxW float tensor in [0, 1]."""
    a = np.asarray(image)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    if a.ndim != 3:
        raise ValueError(f"expected an HxWxC image, got shape {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32) / 255.0).permute(2, 0, 1)[None]


def letterbox(image, size):
    """Scale so the long side equals ``size`` and pad bottom/right.

    Returns the padded uint8 image and the scale factor; a point ``p`` in the
    source maps to ``p * scale``.
    """
    a = np.asarray(image)
    h, w = a.shape[:2]
    scale = size / max(h, w)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    resized = np.asarray(Image.fromarray(a).resize((nw, nh), Image.BILINEAR))
    out = np.full((size, size) + a.shape[2:], PAD_VALUE, dtype=np.uint8)
    out[:nh, :nw] = resized
    return out, scale


def letterbox_mask(mask, size, scale):
    """Nearest-neighbour resample of a {0,1} mask onto the letterboxed canvas."""
    from .masks import resample_mask

    v = np.asarray(mask)
    h, w = v.shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    out = np.zeros((size, size), dtype=np.uint8)
    out[:nh, :nw] = resample_mask(v, nh, nw).values
    return out


def crop_boxes(images, boxes, size, context=1.0, batch_index=None):
    """Differentiable square crops around ``boxes``.

    ``images`` is ``(B, C, H, W)``, ``boxes`` is ``(N, 4)`` xyxy in pixels.
    Each crop is centred on its box with side ``context * max(w, h)``, so the
    aspect ratio is preserved; samples falling outside the image replicate the
    border. Gradients flow into ``boxes`` through bilinear sampling.
    """
    if boxes.shape[0] == 0:
        return images.new_zeros((0, images.shape[1], size, size))
    B, C, H, W = images.shape
    if batch_index is None:
        batch_index = torch.zeros(boxes.shape[0], dtype=torch.long)
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    side = context * torch.maximum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
    theta = torch.zeros(boxes.shape[0], 2, 3, dtype=images.dtype)
    theta[:, 0, 0] = side / W
    theta[:, 0, 2] = 2 * cx / W - 1
    theta[:, 1, 1] = side / H
    theta[:, 1, 2] = 2 * cy / H - 1
    grid = F.affine_grid(theta, (boxes.shape[0], C, size, size), align_corners=False)
    src = images[batch_index]
    return F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=False)


def patch_to_input(patch, size, context=1.0):
    """Whole patch resampled to a ``size`` square with aspect preserved."""
    t = to_tensor(patch)
    h, w = t.shape[-2:]
    box = torch.tensor([[0.0, 0.0, float(w), float(h)]])
    return crop_boxes(t, box, size, context)


def patches_to_inputs(patches, size, context=1.0):
    """Batched :func:`patch_to_input`; patches of equal shape share one resampling call."""
    out = [None] * len(patches)
    groups = {}
    for i, p in enumerate(patches):
        groups.setdefault(np.asarray(p).shape, []).append(i)
    for shape, idx in groups.items():
        t = torch.from_numpy(np.stack([np.asarray(patches[i], dtype=np.float32) for i in idx]) / 255.0)
        if t.ndim == 3:
            t = t[..., None].expand(-1, -1, -1, 3)
        t = t.permute(0, 3, 1, 2)
        h, w = shape[:2]
        boxes = torch.tensor([[0.0, 0.0, float(w), float(h)]]).expand(len(idx), 4)
        crops = crop_boxes(t, boxes, size, context, batch_index=torch.arange(len(idx)))
        for j, i in enumerate(idx):
            out[i] = crops[j : j + 1]
    return torch.cat(out) if out else torch.zeros(0, 3, size, size)


def images_to_batch(images):
    return torch.cat([to_tensor(im) for im in images], dim=0)


def seed_everything(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def random_placement(image, size, rng, scale_range=(0.65, 1.0)):
    """Letterbox variant with a random shrink factor and random offset on the canvas.

    Returns ``(canvas, scale, (ox, oy))``: source point ``p`` lands on
    ``p * scale + (ox, oy)``.
    """
    a = np.asarray(image)
    h, w = a.shape[:2]
    scale = size / max(h, w) * rng.uniform(*scale_range)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    ox = int(rng.integers(0, size - nw + 1))
    oy = int(rng.integers(0, size - nh + 1))
    out = np.full((size, size) + a.shape[2:], PAD_VALUE, dtype=np.uint8)
    out[oy : oy + nh, ox : ox + nw] = np.asarray(Image.fromarray(a).resize((nw, nh), Image.BILINEAR))
    return out, scale, (ox, oy)


def place_mask(mask, size, scale, offset):
    """Apply a :func:`random_placement` transform to a {0,1} mask (nearest)."""
    from .masks import resample_mask

    v = np.asarray(mask)
    h, w = v.shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    ox, oy = offset
    out = np.zeros((size, size), dtype=np.uint8)
    out[oy : oy + nh, ox : ox + nw] = resample_mask(v, nh, nw).values
    return out


def photometric_jitter(x, rng):
    """Per-image contrast/brightness jitter, channel shuffle and occasional inversion.

    ``x`` is ``(B, 3, H, W)`` in [0, 1]; geometry is untouched.
    """
    B = x.shape[0]
    c = torch.as_tensor(rng.uniform(0.6, 1.4, B), dtype=x.dtype).view(B, 1, 1, 1)
    b = torch.as_tensor(rng.uniform(-0.2, 0.2, B), dtype=x.dtype).view(B, 1, 1, 1)
    x = (x - 0.5) * c + 0.5 + b
    perm = [torch.as_tensor(rng.permutation(3)) for _ in range(B)]
    x = torch.stack([x[i, perm[i]] for i in range(B)])
    inv = torch.as_tensor(rng.random(B) < 0.2).view(B, 1, 1, 1)
    x = torch.where(inv, 1 - x, x)
    return x.clamp(0, 1)
