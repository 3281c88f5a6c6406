"""Downstream probes (segmenters, classifiers) and their metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import stats

from . import augment as aug
from .core import INFECTION, LUNG, N_CLASSES, ConfigError, SamplePair, to_tensor

log = logging.getLogger(__name__)

SEG_CLASS_WEIGHTS = (0.1, 1.0, 5.0)


@dataclass
class EvalCorpus:
    samples: list
    split: str = "train"

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, k):
        return self.samples[k]

    @property
    def scan_ids(self):
        return [s.scan_id for s in self.samples]

    def images(self):
        return np.stack([s.image for s in self.samples])

    def masks(self):
        return np.stack([s.mask for s in self.samples])


def check_disjoint(train: EvalCorpus, test: EvalCorpus):
    overlap = set(train.scan_ids) & set(test.scan_ids)
    if overlap:
        raise ConfigError(f"train and test share scans: {sorted(overlap)}")


# ---------------------------------------------------------------------------
# probe networks
# ---------------------------------------------------------------------------

def _conv_bn(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())


class SegUNet(nn.Module):
    """Plain UNet; ``encode`` exposes one feature map per encoder level."""

    def __init__(self, in_channels=1, n_classes=N_CLASSES, base=16, depth=4):
        super().__init__()
        self.in_channels = in_channels
        self.depth = depth
        widths = [base * 2 ** k for k in range(depth + 1)]
        self.enc = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.enc.append(nn.Sequential(_conv_bn(cin, w), _conv_bn(w, w)))
            cin = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for k in range(depth - 1, -1, -1):
            self.up.append(nn.ConvTranspose2d(widths[k + 1], widths[k], 2, stride=2))
            self.dec.append(nn.Sequential(_conv_bn(2 * widths[k], widths[k]), _conv_bn(widths[k], widths[k])))
        self.head = nn.Conv2d(widths[0], n_classes, 1)

    def encode(self, x):
        feats = []
        for k, block in enumerate(self.enc):
            if k > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats

    def forward(self, x):
        feats = self.encode(x)
        x = feats[-1]
        for up, dec, skip in zip(self.up, self.dec, reversed(feats[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.b1 = nn.BatchNorm2d(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.b2 = nn.BatchNorm2d(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.b1(self.c1(x)))
        out = self.b2(self.c2(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


class ResClassifier(nn.Module):
    def __init__(self, in_channels=1, widths=(16, 32, 64), blocks=1):
        super().__init__()
        self.stem = _conv_bn(in_channels, widths[0])
        layers = []
        cin = widths[0]
        for k, w in enumerate(widths):
            for b in range(blocks):
                layers.append(BasicBlock(cin, w, stride=2 if (b == 0 and k > 0) else 1))
                cin = w
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, 1)

    def forward(self, x):
        x = self.body(self.stem(x))
        return self.fc(x.mean(dim=(2, 3))).squeeze(1)


def build_segmenter(arch="light"):
    if arch == "light":
        return SegUNet(base=8, depth=3)
    if arch == "heavy":
        return SegUNet(base=16, depth=4)
    raise ConfigError(f"unknown segmenter arch {arch!r}")


def build_classifier(arch="light"):
    if arch == "light":
        return ResClassifier(widths=(16, 32, 64), blocks=1)
    if arch == "heavy":
        return ResClassifier(widths=(32, 64, 128), blocks=2)
    raise ConfigError(f"unknown classifier arch {arch!r}")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeTrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr_init: float = 1e-4
    lr_decay_start_epoch: int = 25
    lr_decay_per_epoch_frac: float = 0.04
    betas: tuple = (0.9, 0.999)
    augment: str | None = "SA"
    seed: int = 0

    @classmethod
    def paper_segmenter(cls, arch="light"):
        return cls(50, 8 if arch == "light" else 2, 1e-4, 25, 0.04)

    @classmethod
    def paper_classifier(cls):
        return cls(10, 16, 1e-4, 5, 0.20)


def probe_lr(cfg: ProbeTrainConfig, epoch):
    if epoch <= cfg.lr_decay_start_epoch:
        return cfg.lr_init
    return max(0.0, cfg.lr_init * (1.0 - cfg.lr_decay_per_epoch_frac * (epoch - cfg.lr_decay_start_epoch)))


def weighted_ce(logits, labels, weights=SEG_CLASS_WEIGHTS):
    w = torch.tensor(weights, dtype=logits.dtype, device=logits.device)
    return F.cross_entropy(logits, labels, weight=w)


def infection_label(mask):
    return int((np.asarray(mask) == INFECTION).any())


def _augment_batch(samples, policy, rng):
    imgs, masks = [], []
    for s in samples:
        if policy is None:
            imgs.append(s.image)
            masks.append(s.mask)
        else:
            d = aug.sample_draw(policy, s.image.shape, rng)
            im, mk = aug.apply_draw(d, s.image, s.mask)
            imgs.append(im)
            masks.append(mk)
    return np.stack(imgs), np.stack(masks)


def _policy(name):
    if name is None:
        return None
    if name == "SA":
        return aug.AugmentPolicy.strong()
    if name == "WA":
        return aug.AugmentPolicy.weak()
    raise ConfigError(f"unknown probe augmentation {name!r}")


def _fit(model, corpus, cfg: ProbeTrainConfig, loss_fn):
    rng = np.random.default_rng(cfg.seed)
    policy = _policy(cfg.augment)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=tuple(cfg.betas))
    history = []
    n = len(corpus)
    for epoch in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = probe_lr(cfg, epoch)
        model.train()
        order = rng.permutation(n)
        total, count = 0.0, 0
        for k in range(0, n, cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # batch norm needs > 1 sample
            imgs, masks = _augment_batch([corpus[j] for j in idx], policy, rng)
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(model, to_tensor(imgs), masks)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
    model.eval()
    return history


def train_segmenter(corpus: EvalCorpus, arch="light", cfg: ProbeTrainConfig = ProbeTrainConfig()):
    """Returns ``(model, per-epoch mean loss)``."""
    if len(corpus) == 0:
        raise ConfigError("cannot train a segmenter on an empty corpus")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = build_segmenter(arch)

        def loss_fn(m, x, masks):
            return weighted_ce(m(x), torch.as_tensor(masks, dtype=torch.long))

        history = _fit(model, corpus, cfg, loss_fn)
    return model, history


def train_classifier(corpus: EvalCorpus, arch="light", cfg: ProbeTrainConfig = ProbeTrainConfig.paper_classifier()):
    labels = {infection_label(s.mask) for s in corpus}
    if labels != {0, 1}:
        raise ConfigError("classifier corpus needs both positive and negative slices")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = build_classifier(arch)

        def loss_fn(m, x, masks):
            y = torch.tensor([infection_label(mk) for mk in masks], dtype=x.dtype)
            return F.binary_cross_entropy_with_logits(m(x), y)

        history = _fit(model, corpus, cfg, loss_fn)
    return model, history


@torch.no_grad()
def segment(model, images, batch_size=64):
    model.eval()
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    out = []
    for k in range(0, len(images), batch_size):
        out.append(model(to_tensor(images[k:k + batch_size])).argmax(1).numpy())
    return np.concatenate(out)


@torch.no_grad()
def classify(model, images, batch_size=64, threshold=0.5):
    model.eval()
    images = np.asarray(images)
    probs = []
    for k in range(0, len(images), batch_size):
        probs.append(torch.sigmoid(model(to_tensor(images[k:k + batch_size]))).numpy())
    probs = np.concatenate(probs)
    return (probs >= threshold).astype(np.int64), probs


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def dsc(pred_mask, true_mask, class_id) -> float:
    p = np.asarray(pred_mask) == class_id
    t = np.asarray(true_mask) == class_id
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


@dataclass
class MetricsReport:
    per_scan: dict
    mean: float
    ci95: tuple
    n: int
    excluded: list = field(default_factory=list)

    @classmethod
    def from_values(cls, per_scan: dict):
        kept = {k: float(v) for k, v in per_scan.items() if v is not None and not math.isnan(v)}
        excluded = sorted(k for k in per_scan if k not in kept)
        if excluded:
            log.info("excluded %d scan(s) with undefined metric: %s", len(excluded), excluded)
        vals = np.asarray(list(kept.values()), dtype=np.float64)
        n = len(vals)
        if n == 0:
            return cls(kept, float("nan"), (float("nan"), float("nan")), 0, excluded)
        mean = float(vals.mean())
        if n < 2:
            return cls(kept, mean, (float("nan"), float("nan")), n, excluded)
        half = float(stats.t.ppf(0.975, n - 1) * vals.std(ddof=1) / math.sqrt(n))
        return cls(kept, mean, (mean - half, mean + half), n, excluded)

    def to_dict(self):
        return {"per_scan": self.per_scan, "mean": self.mean, "ci95": list(self.ci95), "n": self.n,
                "excluded": self.excluded}

    def fmt(self):
        lo, hi = self.ci95
        return f"{self.mean:.3f} ({lo:.3f}, {hi:.3f})"


def confusion_by_scan(preds, labels, scan_ids):
    out = {}
    for p, y, s in zip(np.asarray(preds).astype(int), np.asarray(labels).astype(int), scan_ids):
        c = out.setdefault(str(s), {"tp": 0, "fp": 0, "tn": 0, "fn": 0})
        key = ("tp" if p else "fn") if y else ("fp" if p else "tn")
        c[key] += 1
    return out


def metrics_from_confusion(counts: dict):
    sens, spec, acc = {}, {}, {}
    for s, c in counts.items():
        pos, neg = c["tp"] + c["fn"], c["tn"] + c["fp"]
        sens[s] = c["tp"] / pos if pos else float("nan")
        spec[s] = c["tn"] / neg if neg else float("nan")
        acc[s] = (c["tp"] + c["tn"]) / (pos + neg)
    return {"sensitivity": MetricsReport.from_values(sens), "specificity": MetricsReport.from_values(spec),
            "accuracy": MetricsReport.from_values(acc)}


def classification_metrics(preds, labels, scan_ids):
    """Per-scan sensitivity/specificity/accuracy aggregated with t-based CI95.

    Returns ``(reports, confusion)``; the reports can be rebuilt from
    ``confusion`` alone with :func:`metrics_from_confusion`.
    """
    if len(preds) == 0:
        raise ValueError("no predictions")
    counts = confusion_by_scan(preds, labels, scan_ids)
    return metrics_from_confusion(counts), counts


def segmentation_metrics(pred_masks, true_masks, scan_ids, class_ids=(LUNG, INFECTION)):
    """Scan-level DSC (all slices of a scan pooled) per class, with CI95."""
    pred_masks = np.asarray(pred_masks)
    true_masks = np.asarray(true_masks)
    scan_ids = np.asarray([str(s) for s in scan_ids])
    out = {}
    for c in class_ids:
        per = {}
        for s in dict.fromkeys(scan_ids):
            sel = scan_ids == s
            per[s] = dsc(pred_masks[sel], true_masks[sel], c)
        out[c] = MetricsReport.from_values(per)
    return out


def image_quality_score(images, masks, oracle, modality_tags=None):
    """Oracle-segmentation DSC of synthesized images against their generating masks.

    Returns ``{"overall": {"lung", "infection"}, "modality <t>": {...}}`` with
    the mean per-image DSC in each cell.
    """
    images = np.asarray(images)
    masks = np.asarray(masks)
    preds = segment(oracle, images)
    lung = np.array([dsc(p, m, LUNG) for p, m in zip(preds, masks)])
    inf = np.array([dsc(p, m, INFECTION) for p, m in zip(preds, masks)])
    table = {"overall": {"lung": float(lung.mean()), "infection": float(inf.mean())}}
    if modality_tags is not None:
        tags = np.asarray(modality_tags)
        for t in sorted(set(tags.tolist())):
            sel = tags == t
            table[f"modality {t}"] = {"lung": float(lung[sel].mean()), "infection": float(inf[sel].mean())}
    return table


def format_quality_table(rows: dict) -> str:
    """rows: model name -> image_quality_score output."""
    groups = []
    for r in rows.values():
        for g in r:
            if g not in groups:
                groups.append(g)
    head = "Model".ljust(16) + "".join(f"{g + ' lung':>20}{g + ' inf.':>20}" for g in groups)
    lines = [head, "-" * len(head)]
    for name, r in rows.items():
        cells = "".join(f"{100 * r[g]['lung']:>20.1f}{100 * r[g]['infection']:>20.1f}" if g in r
                        else f"{'-':>20}{'-':>20}" for g in groups)
        lines.append(name.ljust(16) + cells)
    return "\n".join(lines)
