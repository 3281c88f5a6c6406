"""Shared data types, the scale schedule, mask encoding and resampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import kernels

N_CLASSES = 3
BACKGROUND, LUNG, INFECTION = 0, 1, 2
# 8-bit pixel value of each class in a condition image
CLASS_PIXEL_VALUES = (0, 128, 255)

PAPER_SCALES = (32, 48, 64, 96, 128, 192, 256, 384, 512)
PAPER_GEN_DEPTHS = (4, 4, 5, 5, 6, 6, 7, 7, 8)
PAPER_DISC_DEPTHS = (6, 6, 7, 7, 8, 8, 9, 9, 10)
MAX_GEN_DEPTH = 8
MIN_SCALE = 16


class ConfigError(ValueError):
    """Invalid configuration or request parameters."""


class StateError(RuntimeError):
    """Operation invoked on an object in the wrong lifecycle state."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class ScaleSchedule:
    scales: tuple
    gen_depths: tuple
    disc_depths: tuple
    sa_intensity: tuple

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(tuple(int(v) for v in s) for s in self.scales))
        object.__setattr__(self, "gen_depths", tuple(int(d) for d in self.gen_depths))
        object.__setattr__(self, "disc_depths", tuple(int(d) for d in self.disc_depths))
        object.__setattr__(self, "sa_intensity", tuple(float(v) for v in self.sa_intensity))
        self.validate()

    def validate(self):
        n = len(self.scales)
        if n < 1 or not (n == len(self.gen_depths) == len(self.disc_depths) == len(self.sa_intensity)):
            raise ConfigError("schedule lists must be non-empty and of equal length")
        for (h0, w0), (h1, w1) in zip(self.scales, self.scales[1:]):
            if not (h1 > h0 and w1 > w0):
                raise ConfigError(f"scales must increase strictly: {self.scales}")
        for a, b in zip(self.sa_intensity, self.sa_intensity[1:]):
            if b > a:
                raise ConfigError("sa_intensity must be non-increasing")
        for v in self.sa_intensity:
            if not 0.0 <= v <= 1.0:
                raise ConfigError("sa_intensity values must lie in [0, 1]")
        for (h, w), d in zip(self.scales, self.gen_depths):
            if min(h, w) < 2 * 2 ** d:
                raise ConfigError(f"scale {h}x{w} cannot host {d} downsamplings")

    def __len__(self):
        return len(self.scales)

    @property
    def final_scale(self):
        return self.scales[-1]

    def bottleneck(self, i):
        h, w = self.scales[i]
        return h // 2 ** self.gen_depths[i], w // 2 ** self.gen_depths[i]

    def to_dict(self):
        return {
            "scales": [list(s) for s in self.scales],
            "gen_depths": list(self.gen_depths),
            "disc_depths": list(self.disc_depths),
            "sa_intensity": list(self.sa_intensity),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["scales"], d["gen_depths"], d["disc_depths"], d["sa_intensity"])


def default_sa_intensity(n_scales, start=1.0, end=0.25):
    if n_scales == 1:
        return (start,)
    return tuple(float(v) for v in np.linspace(start, end, n_scales))


def _paper_sizes(max_size, n_scales):
    # alternate x4/3 and x3/2 steps downward: 512, 384, 256, 192, ...
    sizes = [max_size]
    while len(sizes) < n_scales:
        s = sizes[-1]
        k = s.bit_length() - 1
        if s == 2 ** k:
            nxt = 3 * 2 ** (k - 2)
        elif s == 3 * 2 ** (k - 1):
            nxt = 2 ** k
        else:
            raise ConfigError(f"paper profile needs sizes of the form 2^k or 3*2^k, got {s}")
        if nxt < MIN_SCALE:
            raise ConfigError(f"paper profile cannot fit {n_scales} scales below {max_size}")
        sizes.append(nxt)
    return sizes[::-1]


def depth_for_size(size):
    return min(int(math.floor(math.log2(size))) - 1, MAX_GEN_DEPTH)


def build_scale_schedule(max_size: int, n_scales: int, profile: str = "desk") -> ScaleSchedule:
    """Scale pyramid with generator/discriminator depths per scale.

    ``paper`` walks down the 2^k / 3*2^(k-1) ladder from ``max_size`` (512 and 9
    scales gives the published pyramid).  ``desk`` spaces scales geometrically
    from 16 to ``max_size`` and rounds each to a multiple of ``2**depth``.
    """
    if n_scales < 2:
        raise ConfigError("n_scales must be >= 2")
    if max_size < MIN_SCALE:
        raise ConfigError(f"max_size must be >= {MIN_SCALE}")
    if profile == "paper":
        sizes = _paper_sizes(int(max_size), int(n_scales))
    elif profile == "desk":
        raw = np.geomspace(MIN_SCALE, max_size, n_scales)
        sizes = []
        for s in raw:
            d = depth_for_size(s)
            step = 2 ** d
            sizes.append(max(step * 2, int(round(s / step)) * step))
        sizes[0], sizes[-1] = MIN_SCALE, int(max_size)
        for a, b in zip(sizes, sizes[1:]):
            if b <= a:
                raise ConfigError(f"max_size {max_size} too small for {n_scales} distinct scales")
    else:
        raise ConfigError(f"unknown schedule profile {profile!r}")
    gen = [depth_for_size(s) for s in sizes]
    disc = [d + 2 for d in gen]
    return ScaleSchedule([(s, s) for s in sizes], gen, disc, default_sa_intensity(len(sizes)))


# ---------------------------------------------------------------------------
# masks and images
# ---------------------------------------------------------------------------

def validate_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"condition mask must be 2-D, got shape {mask.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        if not np.all(np.mod(mask, 1) == 0):
            raise ValueError("condition mask must hold integer labels")
    if mask.size and (mask.min() < 0 or mask.max() > 2):
        raise ValueError(f"condition labels must lie in {{0,1,2}}, got {np.unique(mask)}")
    return mask.astype(np.int64)


def pixel_to_unit(v):
    """8-bit value(s) -> [-1, 1]."""
    return np.asarray(v, dtype=np.float64) / 255.0 * 2.0 - 1.0


CLASS_UNIT_VALUES = tuple(float(pixel_to_unit(v)) for v in CLASS_PIXEL_VALUES)


def encode_mask(mask, dtype=torch.float32) -> torch.Tensor:
    """Label map (H, W) or (B, H, W) -> (1, 1, H, W) or (B, 1, H, W) tensor in [-1, 1]."""
    arr = np.asarray(mask)
    batched = arr.ndim == 3
    labels = np.stack([validate_mask(m) for m in arr]) if batched else validate_mask(arr)[None]
    lut = np.asarray(CLASS_UNIT_VALUES, dtype=np.float64)
    return torch.as_tensor(lut[labels][:, None], dtype=dtype)


def decode_mask(encoded) -> np.ndarray:
    """Nearest canonical class value -> labels; inverse of :func:`encode_mask`."""
    if isinstance(encoded, torch.Tensor):
        encoded = encoded.detach().cpu().numpy()
    arr = np.asarray(encoded, dtype=np.float64)
    canon = np.asarray(CLASS_UNIT_VALUES)
    labels = np.abs(arr[..., None] - canon).argmin(axis=-1)
    while labels.ndim > 2 and labels.shape[0] == 1:
        labels = labels[0]
    return labels


def _check_target(target):
    h, w = (int(v) for v in target)
    if h < 1 or w < 1:
        raise ValueError(f"target shape must be >= 1x1, got {target}")
    return h, w


def resize_image(img, target) -> np.ndarray:
    """Bilinear resize with half-pixel centres and clamped borders."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    target = _check_target(target)
    if img.shape == target:
        return img.copy()
    ys, xs = kernels.resize_grid(img.shape, target)
    return kernels.remap_bilinear(img, ys, xs, kernels.EDGE)


def resize_mask(mask, target) -> np.ndarray:
    mask = validate_mask(mask)
    target = _check_target(target)
    if mask.shape == target:
        return mask.copy()
    ys, xs = kernels.resize_grid(mask.shape, target)
    return kernels.remap_nearest(mask, ys, xs, kernels.EDGE)


@dataclass
class SamplePair:
    image: np.ndarray
    mask: np.ndarray
    scale_index: int = -1
    modality_tag: int = 0
    scan_id: str = ""
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = validate_mask(self.mask)
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ in shape")
        if self.image.size and (self.image.min() < -1 - 1e-6 or self.image.max() > 1 + 1e-6):
            raise ValueError("image values must lie in [-1, 1]")

    @property
    def has_infection(self):
        return bool((self.mask == INFECTION).any())

    def at_scale(self, shape, scale_index=-1):
        return SamplePair(resize_image(self.image, shape).clip(-1, 1), resize_mask(self.mask, shape),
                          scale_index, self.modality_tag, self.scan_id, self.name)


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """(H, W) or (B, H, W) array -> (B, 1, H, W) tensor."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.as_tensor(arr[:, None], dtype=dtype)


def to_array(t: torch.Tensor) -> np.ndarray:
    """(B, 1, H, W) tensor -> (B, H, W) float64 array (or (H, W) when B == 1)."""
    arr = t.detach().cpu().double().numpy()[:, 0]
    return arr[0] if arr.shape[0] == 1 else arr


# ---------------------------------------------------------------------------
# PNG persistence
# ---------------------------------------------------------------------------

def image_to_uint8(img) -> np.ndarray:
    img = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.round((img + 1.0) * 127.5).astype(np.uint8)


def uint8_to_image(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 127.5 - 1.0


def save_image_png(path, img):
    Image.fromarray(image_to_uint8(img), mode="L").save(path)


def load_image_png(path) -> np.ndarray:
    return uint8_to_image(np.asarray(Image.open(path).convert("L")))


def save_mask_png(path, mask):
    lut = np.asarray(CLASS_PIXEL_VALUES, dtype=np.uint8)
    Image.fromarray(lut[validate_mask(mask)], mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.int64)
    canon = np.asarray(CLASS_PIXEL_VALUES)
    return np.abs(arr[..., None] - canon).argmin(axis=-1)


def save_grid_png(path, images, ncols=8, pad=1):
    """Tile a list of [-1,1] images (or label maps pre-encoded) into one PNG."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    h = max(im.shape[0] for im in images)
    w = max(im.shape[1] for im in images)
    ncols = max(1, min(ncols, len(images)))
    nrows = math.ceil(len(images) / ncols)
    canvas = np.ones((nrows * (h + pad) + pad, ncols * (w + pad) + pad))
    for k, im in enumerate(images):
        r, c = divmod(k, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y:y + im.shape[0], x:x + im.shape[1]] = im
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_image_png(path, canvas)
