"""Hierarchical paired augmentation: strong (SA) for stage 1, weak (WA) for stage 2."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import kernels
from .core import (ConfigError, ScaleSchedule, StateError, encode_mask, resize_image, resize_mask,
                   validate_mask)

SA, WA = "SA", "WA"


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str = SA
    crop_min_frac: float = 0.5
    use_elastic: bool = True
    elastic_alpha: float = 0.08  # RMS displacement, fraction of min(h, w), before intensity
    elastic_sigma: float = 0.04  # smoothing, fraction of min(h, w)
    rotation_max_deg: float = 20.0
    flip_h: bool = True
    flip_v: bool = True
    intensity: float = 1.0

    def __post_init__(self):
        if self.kind not in (SA, WA):
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 < self.crop_min_frac <= 1.0:
            raise ConfigError("crop_min_frac must lie in (0, 1]")
        if self.kind == WA and self.use_elastic:
            raise ConfigError("weak augmentation never uses the elastic transform")
        if not 0.0 <= self.intensity <= 1.0:
            raise ConfigError("intensity must lie in [0, 1]")

    @property
    def effective_min_frac(self):
        return 1.0 - (1.0 - self.crop_min_frac) * self.intensity

    @classmethod
    def strong(cls, intensity=1.0, **kw):
        return cls(kind=SA, crop_min_frac=0.5, use_elastic=True, intensity=intensity, **kw)

    @classmethod
    def weak(cls, **kw):
        return cls(kind=WA, crop_min_frac=0.75, use_elastic=False, intensity=1.0, **kw)

    def at_intensity(self, intensity):
        # WA intensity never changes across scales
        return self if self.kind == WA else replace(self, intensity=float(intensity))


@dataclass(frozen=True)
class AugmentDraw:
    """One sampled transform in normalised [0, 1] coordinates.

    ``crop_box`` is (top, left, height, width) as fractions of the source;
    ``elastic_field`` is a (2, H, W) displacement field in the same units.
    """

    crop_box: tuple = (0.0, 0.0, 1.0, 1.0)
    rotation_deg: float = 0.0
    flip_h: bool = False
    flip_v: bool = False
    elastic_field: np.ndarray | None = None
    rng_seed: int | None = None

    @property
    def is_geometric_identity(self):
        no_field = self.elastic_field is None or not np.any(self.elastic_field)
        return tuple(self.crop_box) == (0.0, 0.0, 1.0, 1.0) and self.rotation_deg == 0.0 and no_field


IDENTITY_DRAW = AugmentDraw()


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), (None if rng is None else int(rng))


def sample_draw(policy: AugmentPolicy, shape, rng=None) -> AugmentDraw:
    h, w = shape
    if h < 8 or w < 8:
        raise ValueError(f"augmentation needs at least 8x8 inputs, got {shape}")
    rng, seed = _as_rng(rng)
    frac = rng.uniform(policy.effective_min_frac, 1.0)
    top = rng.uniform(0.0, 1.0 - frac)
    left = rng.uniform(0.0, 1.0 - frac)
    rot = rng.uniform(-policy.rotation_max_deg, policy.rotation_max_deg)
    fh = bool(rng.random() < 0.5) if policy.flip_h else False
    fv = bool(rng.random() < 0.5) if policy.flip_v else False
    field = None
    if policy.use_elastic:
        m = min(h, w)
        noise = rng.uniform(-1.0, 1.0, size=(2, h, w))
        sigma = max(policy.elastic_sigma * m, 0.5)
        field = np.stack([gaussian_filter(noise[k], sigma, mode="reflect") for k in range(2)])
        rms = np.sqrt(np.mean(field ** 2))
        amp = policy.elastic_alpha * m * policy.intensity
        field = field / max(rms, 1e-12) * amp
        field[0] /= h
        field[1] /= w
    return AugmentDraw((top, left, frac, frac), float(rot), fh, fv, field, seed)


def _resize_field(field, shape):
    if field.shape[1:] == tuple(shape):
        return field
    return np.stack([resize_image(f, shape) for f in field])


def draw_coordinates(draw: AugmentDraw, src_shape, out_shape=None):
    """Source pixel coordinates sampled by every output pixel (before flips)."""
    h, w = src_shape
    oh, ow = out_shape or src_shape
    a = (np.arange(oh, dtype=np.float64) + 0.5) / oh
    b = (np.arange(ow, dtype=np.float64) + 0.5) / ow
    a, b = np.meshgrid(a, b, indexing="ij")
    if draw.elastic_field is not None:
        f = _resize_field(draw.elastic_field, (oh, ow))
        a = a + f[0]
        b = b + f[1]
    top, left, ch, cw = draw.crop_box
    # rotate about the crop centre in pixel units of the crop
    py = (a - 0.5) * ch * h
    px = (b - 0.5) * cw * w
    t = math.radians(draw.rotation_deg)
    c, s = math.cos(t), math.sin(t)
    ry = c * py - s * px
    rx = s * py + c * px
    ys = (top + 0.5 * ch) * h + ry - 0.5
    xs = (left + 0.5 * cw) * w + rx - 0.5
    return ys, xs


def _flip(arr, draw):
    if draw.flip_v:
        arr = arr[::-1]
    if draw.flip_h:
        arr = arr[:, ::-1]
    return np.ascontiguousarray(arr)


def apply_draw(draw: AugmentDraw, image=None, mask=None, fill_image=-1.0, fill_mask=0):
    """Warp image (bilinear) and mask (nearest) identically, output at input size.

    Either argument may be ``None``.  Pixels pulled from outside the source are
    filled with background (``-1`` / class 0).
    """
    shape = None
    for arr in (image, mask):
        if arr is not None:
            if shape is not None and np.shape(arr) != shape:
                raise ValueError("image and mask must be aligned")
            shape = np.shape(arr)
    if shape is None:
        raise ValueError("nothing to augment")
    top, left, ch, cw = draw.crop_box
    if top < -1e-9 or left < -1e-9 or top + ch > 1 + 1e-9 or left + cw > 1 + 1e-9:
        raise RuntimeError(f"crop box {draw.crop_box} lies outside the image")
    out_img = out_mask = None
    if draw.is_geometric_identity:
        if image is not None:
            out_img = _flip(np.asarray(image, dtype=np.float64), draw)
        if mask is not None:
            out_mask = _flip(validate_mask(mask), draw)
        return out_img, out_mask
    ys, xs = draw_coordinates(draw, shape)
    if image is not None:
        warped = kernels.remap_bilinear(image, ys, xs, kernels.CONSTANT, fill_image)
        out_img = _flip(warped, draw)
    if mask is not None:
        warped = kernels.remap_nearest(validate_mask(mask), ys, xs, kernels.CONSTANT, fill_mask)
        out_mask = _flip(warped, draw)
    return out_img, out_mask


def sa_intensity_for_scale(schedule: ScaleSchedule, i: int) -> float:
    if not 0 <= i < len(schedule):
        raise IndexError(f"scale index {i} outside schedule of {len(schedule)} scales")
    return schedule.sa_intensity[i]


def policy_for_scale(base: AugmentPolicy, schedule: ScaleSchedule, i: int) -> AugmentPolicy:
    if base.kind == WA:
        return base
    return base.at_intensity(sa_intensity_for_scale(schedule, i))


# ---------------------------------------------------------------------------
# augmented cascade inputs
# ---------------------------------------------------------------------------

def masks_per_scale(mask, schedule: ScaleSchedule, upto: int):
    return [resize_mask(mask, schedule.scales[j]) for j in range(upto + 1)]


def run_cascade(stack, cond_tensors, upto):
    """Run frozen two-stage generators 0..upto on encoded conditions; return O_upto."""
    out = None
    with torch.no_grad():
        for j in range(upto + 1):
            out = stack[j](out, cond_tensors[j])
    return out


def augmented_cascade_input(stack, mask_orig, draw: AugmentDraw, schedule: ScaleSchedule, i: int):
    """Return ``(O_{i-1} or None, C_i labels)`` for a single draw.

    The draw is applied to the full-resolution mask once; the augmented mask is
    resized to every scale and the frozen prefix regenerates O_{i-1} from it.
    """
    batch_prev, batch_masks = augmented_cascade_batch(stack, mask_orig, [draw], schedule, i)
    prev = None if batch_prev is None else batch_prev
    return prev, batch_masks[i][0]


def augmented_cascade_batch(stack, mask_orig, draws, schedule: ScaleSchedule, i: int, dtype=torch.float32):
    """Batched form: returns ``(O_{i-1} tensor or None, [labels (B,H,W) per scale 0..i])``."""
    if i > 0 and (stack is None or len(stack) < i):
        raise StateError(f"scale {i} needs trained generators for scales 0..{i - 1}")
    per_draw = []
    for d in draws:
        _, aug = apply_draw(d, mask=mask_orig)
        per_draw.append(masks_per_scale(aug, schedule, i))
    labels = [np.stack([pd[j] for pd in per_draw]) for j in range(i + 1)]
    if i == 0:
        return None, labels
    conds = [encode_mask(labels[j], dtype) for j in range(i)]
    return run_cascade(stack, conds, i - 1), labels


def augmented_targets(image, draws, schedule: ScaleSchedule, i: int):
    """Real image X_i for each draw, shape (B, H_i, W_i)."""
    out = []
    for d in draws:
        aug, _ = apply_draw(d, image=image)
        out.append(np.clip(resize_image(aug, schedule.scales[i]), -1.0, 1.0))
    return np.stack(out)
