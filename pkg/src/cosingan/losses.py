"""Reconstruction and adversarial objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, validate_mask

log = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
DATA_RANGE = 2.0  # images live in [-1, 1]


@dataclass(frozen=True)
class LossWeights:
    wppl: float = 10.0
    ms_ssim: float = 1.0
    ms_fvl: float = 10.0
    ms_ful: float = 10.0

    def __post_init__(self):
        vals = (self.wppl, self.ms_ssim, self.ms_fvl, self.ms_ful)
        if any(v < 0 or not np.isfinite(v) for v in vals):
            raise ConfigError("loss weights must be finite and non-negative")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")


@dataclass(frozen=True)
class CategoryWeightMap:
    background: float = 0.1
    lung: float = 0.5
    infection: float = 1.0

    def __post_init__(self):
        vals = (self.background, self.lung, self.infection)
        if any(v < 0 or not np.isfinite(v) for v in vals):
            raise ConfigError("category weights must be finite and non-negative")

    def as_tensor(self, dtype=torch.float32):
        return torch.tensor([self.background, self.lung, self.infection], dtype=dtype)


@dataclass(frozen=True)
class FeatureLossConfig:
    layer_ids: tuple = (0, 1, 2, 3, 4)
    layer_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    backbone_kind: str = "classifier_features"

    def __post_init__(self):
        object.__setattr__(self, "layer_ids", tuple(int(i) for i in self.layer_ids))
        object.__setattr__(self, "layer_weights", tuple(float(w) for w in self.layer_weights))
        if len(self.layer_ids) != len(self.layer_weights) or not self.layer_ids:
            raise ConfigError("layer_ids and layer_weights must be non-empty and equally long")
        if any(w < 0 for w in self.layer_weights):
            raise ConfigError("feature layer weights must be non-negative")
        if self.backbone_kind not in ("classifier_features", "segmenter_features"):
            raise ConfigError(f"unknown backbone_kind {self.backbone_kind!r}")


@dataclass
class LossReport:
    wppl: float = 0.0
    ms_ssim: float = 0.0
    ms_fvl: float = 0.0
    ms_ful: float = 0.0
    mixed: float = 0.0
    adv_g: float = float("nan")
    adv_d: float = float("nan")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _labels_tensor(cond, like: torch.Tensor):
    if isinstance(cond, torch.Tensor):
        labels = cond.long()
    else:
        arr = np.asarray(cond)
        if arr.ndim == 2:
            arr = validate_mask(arr)[None]
        else:
            arr = np.stack([validate_mask(m) for m in arr])
        labels = torch.as_tensor(arr, dtype=torch.long)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.ndim == 4:
        labels = labels[:, 0]
    if labels.shape[0] == 1 and like.shape[0] > 1:
        labels = labels.expand(like.shape[0], -1, -1)
    if tuple(labels.shape) != (like.shape[0],) + tuple(like.shape[-2:]):
        raise ValueError(f"mask {tuple(labels.shape)} does not match image {tuple(like.shape)}")
    return labels


def loss_wppl(cond, gen: torch.Tensor, real: torch.Tensor, w: CategoryWeightMap = CategoryWeightMap()):
    """Class-weighted mean absolute error; ``cond`` holds labels in {0, 1, 2}."""
    if gen.shape != real.shape:
        raise ValueError(f"shape mismatch {tuple(gen.shape)} vs {tuple(real.shape)}")
    labels = _labels_tensor(cond, gen)
    weight = w.as_tensor(gen.dtype).to(gen.device)[labels].unsqueeze(1)
    return (weight * (gen - real).abs()).mean()


# ---------------------------------------------------------------------------
# MS-SSIM
# ---------------------------------------------------------------------------

def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float32):
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return (g / g.sum()).to(dtype)


def _blur(x, g):
    c = x.shape[1]
    gh = g.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    gv = g.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    return F.conv2d(F.conv2d(x, gh, groups=c), gv, groups=c)


def _ssim_terms(x, y, g, data_range):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mu_x ** 2
    syy = _blur(y * y, g) - mu_y ** 2
    sxy = _blur(x * y, g) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    lum_map = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    ssim = (lum_map * cs_map).flatten(1).mean(1)
    cs = cs_map.flatten(1).mean(1)
    return ssim, cs


def ms_ssim_levels(h, w, requested=5, window=SSIM_WINDOW):
    levels = requested
    while levels >= 1 and min(h, w) < 2 ** (levels - 1) * window:
        levels -= 1
    return levels


def _signed_pow(v, p):
    return torch.sign(v) * v.abs().clamp_min(1e-12) ** p


def ms_ssim(x: torch.Tensor, y: torch.Tensor, levels: int = 5, data_range=DATA_RANGE):
    """Per-image multi-scale SSIM (Wang et al. 2003), averaged over the batch.

    Levels drop automatically until the coarsest level still fits one window.
    Per-level values can be negative; they are raised to their exponents
    sign-preservingly so the result stays in [-1, 1].
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    h, w = x.shape[-2:]
    n = ms_ssim_levels(h, w, levels)
    if n < 1:
        raise ValueError(f"image {h}x{w} too small for MS-SSIM (needs >= {SSIM_WINDOW} px)")
    if n < levels:
        log.debug("MS-SSIM reduced from %d to %d levels for %dx%d input", levels, n, h, w)
    weights = torch.tensor(MS_SSIM_WEIGHTS[:n], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()
    g = gaussian_window(dtype=x.dtype).to(x.device)
    vals = []
    for lvl in range(n):
        ssim, cs = _ssim_terms(x, y, g, data_range)
        if lvl < n - 1:
            vals.append(cs)
            pad = (0, w % 2, 0, h % 2)
            x = F.avg_pool2d(F.pad(x, pad, mode="replicate"), 2)
            y = F.avg_pool2d(F.pad(y, pad, mode="replicate"), 2)
            h, w = x.shape[-2:]
        else:
            vals.append(ssim)
    out = torch.ones_like(vals[0])
    for v, p in zip(vals, weights):
        out = out * _signed_pow(v, p)
    return out.mean()


def loss_ms_ssim(gen, real, levels: int = 5):
    return 1.0 - ms_ssim(gen, real, levels)


# ---------------------------------------------------------------------------
# feature losses
# ---------------------------------------------------------------------------

class IdentityExtractor(nn.Module):
    in_channels = 1

    def forward(self, x):
        return [x]


def loss_feature(gen, real, extractor: nn.Module, cfg: FeatureLossConfig, norm: str = "L1"):
    """Sum over selected layers of weight * mean(|F(real) - F(gen)|) (or squared)."""
    need = getattr(extractor, "in_channels", 1)
    if gen.shape[1] != need:
        if gen.shape[1] != 1:
            raise ValueError(f"extractor expects {need} channels, got {gen.shape[1]}")
        gen = gen.expand(-1, need, -1, -1)
        real = real.expand(-1, need, -1, -1)
    feats_g = extractor(gen)
    with torch.no_grad():
        feats_r = extractor(real)
    total = gen.new_zeros(())
    for lid, eta in zip(cfg.layer_ids, cfg.layer_weights):
        if lid >= len(feats_g):
            raise ConfigError(f"extractor yields {len(feats_g)} layers, asked for layer {lid}")
        diff = feats_r[lid] - feats_g[lid]
        if norm == "L1":
            term = diff.abs().mean()
        elif norm == "L2":
            term = (diff ** 2).mean()
        else:
            raise ConfigError(f"unknown norm {norm!r}")
        total = total + eta * term
    return total


# ---------------------------------------------------------------------------
# mixed reconstruction loss
# ---------------------------------------------------------------------------

@dataclass
class ReconstructionLoss:
    """Bundle of everything the mixed loss needs besides the images."""

    weights: LossWeights = field(default_factory=LossWeights)
    category_weights: CategoryWeightMap = field(default_factory=CategoryWeightMap)
    vgg: nn.Module | None = None
    vgg_cfg: FeatureLossConfig = field(default_factory=FeatureLossConfig)
    unet: nn.Module | None = None
    unet_cfg: FeatureLossConfig = field(
        default_factory=lambda: FeatureLossConfig(backbone_kind="segmenter_features"))
    ms_ssim_levels: int = 5

    def terms(self, cond, gen, real):
        w = self.weights
        zero = gen.new_zeros(())
        out = {"wppl": loss_wppl(cond, gen, real, self.category_weights) if w.wppl > 0 else zero,
               "ms_ssim": loss_ms_ssim(gen, real, self.ms_ssim_levels) if w.ms_ssim > 0 else zero}
        if w.ms_fvl > 0:
            if self.vgg is None:
                raise ConfigError("ms_fvl weight > 0 but no classifier feature extractor given")
            out["ms_fvl"] = loss_feature(gen, real, self.vgg, self.vgg_cfg, "L1")
        else:
            out["ms_fvl"] = zero
        if w.ms_ful > 0:
            if self.unet is None:
                raise ConfigError("ms_ful weight > 0 but no segmenter feature extractor given")
            out["ms_ful"] = loss_feature(gen, real, self.unet, self.unet_cfg, "L2")
        else:
            out["ms_ful"] = zero
        return out

    def __call__(self, cond, gen, real):
        """Return ``(mixed_tensor, terms)``."""
        t = self.terms(cond, gen, real)
        w = self.weights
        mixed = w.wppl * t["wppl"] + w.ms_ssim * t["ms_ssim"] + w.ms_fvl * t["ms_fvl"] + w.ms_ful * t["ms_ful"]
        return mixed, t


def loss_mixed(cond, gen, real, weights=LossWeights(), wppl_w=CategoryWeightMap(), vgg=None,
               vgg_cfg=FeatureLossConfig(), unet=None,
               unet_cfg=FeatureLossConfig(backbone_kind="segmenter_features")) -> LossReport:
    rec = ReconstructionLoss(weights, wppl_w, vgg, vgg_cfg, unet, unet_cfg)
    mixed, t = rec(cond, gen, real)
    return LossReport(**{k: float(v.detach()) for k, v in t.items()}, mixed=float(mixed.detach()))


# ---------------------------------------------------------------------------
# adversarial objectives
# ---------------------------------------------------------------------------

def adv_loss(logits, target: float):
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def adv_g_objective(disc, cond, gen_out):
    return adv_loss(disc(cond, gen_out), 1.0)


def adv_d_objective(disc, cond, gen_out, real):
    fake = adv_loss(disc(cond, gen_out.detach()), 0.0)
    true = adv_loss(disc(cond, real), 1.0)
    return 0.5 * (fake + true)
