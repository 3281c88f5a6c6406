"""Frozen feature extractors for the perceptual reconstruction terms."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .evaluation import SegUNet
from .nets import freeze

log = logging.getLogger(__name__)

N_SHAPE_CLASSES = 4


class VGGFeatures(nn.Module):
    """VGG-style classifier backbone: five conv-BN-ReLU stages, max-pool between stages.

    ``forward`` returns the activation of every stage (pre-pool), which is what
    the classifier-feature loss compares.
    """

    in_channels = 3

    def __init__(self, widths=(16, 32, 64, 96, 128), n_classes=N_SHAPE_CLASSES):
        super().__init__()
        self.stages = nn.ModuleList()
        cin = 3
        for w in widths:
            self.stages.append(nn.Sequential(nn.Conv2d(cin, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(),
                                             nn.Conv2d(w, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU()))
            cin = w
        self.fc = nn.Linear(cin, n_classes)

    def forward(self, x):
        feats = []
        for k, st in enumerate(self.stages):
            if k > 0:
                x = F.max_pool2d(x, 2, ceil_mode=True)
            x = st(x)
            feats.append(x)
        return feats

    def classify(self, x):
        return self.fc(self(x)[-1].mean(dim=(2, 3)))


class TorchvisionVGGFeatures(nn.Module):
    """Wrap ``torchvision.models.vgg16().features``; stage outputs at relu1_2..relu5_3."""

    in_channels = 3
    CUTS = (4, 9, 16, 23, 30)

    def __init__(self, weights_path=None):
        super().__init__()
        from torchvision.models import vgg16

        net = vgg16(weights=None)
        if weights_path is not None:
            net.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
        feats = net.features
        self.slices = nn.ModuleList()
        start = 0
        for cut in self.CUTS:
            self.slices.append(nn.Sequential(*[feats[k] for k in range(start, cut)]))
            start = cut

    def forward(self, x):
        out = []
        for s in self.slices:
            x = s(x)
            out.append(x)
        return out


class SegmenterFeatures(nn.Module):
    """Encoder activations of a trained segmenter."""

    def __init__(self, segmenter: SegUNet):
        super().__init__()
        self.segmenter = segmenter
        self.in_channels = segmenter.in_channels

    def forward(self, x):
        return self.segmenter.encode(x)


def shape_dataset(n, size=32, seed=0):
    """Procedural 4-way shape classification set (disc, square, ring, stripes) in [-1, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    imgs = np.empty((n, size, size))
    labels = rng.integers(0, N_SHAPE_CLASSES, size=n)
    for k, lab in enumerate(labels):
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        r = rng.uniform(0.15, 0.3) * size
        d = np.hypot(yy - cy, xx - cx)
        if lab == 0:
            shape = d < r
        elif lab == 1:
            shape = (np.abs(yy - cy) < r * 0.8) & (np.abs(xx - cx) < r * 0.8)
        elif lab == 2:
            shape = (d < r) & (d > 0.55 * r)
        else:
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(4, 8)
            shape = (np.sin(2 * np.pi * (np.cos(theta) * yy + np.sin(theta) * xx) / period) > 0) & (d < 1.3 * r)
        fg, bg = rng.uniform(0.2, 1.0), rng.uniform(-1.0, -0.2)
        img = np.where(shape, fg, bg) + rng.normal(0, 0.1, (size, size))
        imgs[k] = np.clip(img, -1, 1)
    return imgs, labels


def pretrain_vgg_features(seed=0, steps=300, batch=32, size=32, lr=1e-3):
    """Train :class:`VGGFeatures` on the shape task; returns the frozen backbone."""
    imgs, labels = shape_dataset(2048, size, seed)
    x_all = torch.as_tensor(imgs[:, None], dtype=torch.float32).expand(-1, 3, -1, -1)
    y_all = torch.as_tensor(labels, dtype=torch.long)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = VGGFeatures()
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        rng = np.random.default_rng(seed + 1)
        for step in range(steps):
            idx = torch.as_tensor(rng.integers(0, len(imgs), batch))
            loss = F.cross_entropy(net.classify(x_all[idx]), y_all[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    net.eval()
    with torch.no_grad():
        acc = (net.classify(x_all[:512]).argmax(1) == y_all[:512]).float().mean().item()
    log.info("shape-task pretraining: final loss %.4f, accuracy %.3f", loss.item(), acc)
    return freeze(net)


def load_or_pretrain_vgg(cache_path=None, seed=0):
    if cache_path is not None and Path(cache_path).exists():
        net = VGGFeatures()
        net.load_state_dict(torch.load(cache_path, weights_only=True))
        return freeze(net)
    net = pretrain_vgg_features(seed)
    if cache_path is not None:
        Path(cache_path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(net.state_dict(), cache_path)
    return net


def segmenter_extractor(segmenter: SegUNet) -> SegmenterFeatures:
    return freeze(SegmenterFeatures(segmenter))
