"""Cascade inference and the three diversification methods (dropout, RC, fusion)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import (CLASS_PIXEL_VALUES, ConfigError, StateError, encode_mask, pixel_to_unit, resize_mask,
                   save_image_png, save_mask_png, to_array, validate_mask)
from .nets import set_dropout, two_stage_forward

PAPER_DELTAS = (16, 16, 32)
O_ST, RC_ST, IF_ST = "O_ST", "RC_ST", "IF_ST"


def check_deltas(deltas):
    db, dl, di = (int(d) for d in deltas)
    if min(db, dl, di) < 0 or max(db, dl, di) > 127:
        raise ConfigError(f"deltas must lie in [0, 127], got {deltas}")
    if not (0 + db < 128 - dl and 128 + dl < 255 - di):
        raise ConfigError(f"deltas {deltas} let class encodings overlap")
    return db, dl, di


@dataclass(frozen=True)
class SynthesisRequest:
    mask: np.ndarray
    dropout_at_inference: bool = False
    rc_noise: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mask", validate_mask(self.mask))
        if self.rc_noise is not None:
            object.__setattr__(self, "rc_noise", check_deltas(self.rc_noise))


@dataclass(frozen=True)
class FusionRequest:
    mask: np.ndarray
    zeta: float | str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.zeta != "random" and not 0.0 <= float(self.zeta) <= 1.0:
            raise ConfigError(f"zeta must lie in [0, 1], got {self.zeta}")


def randomize_condition(mask, deltas, rng, dtype=torch.float32):
    """Encode a mask with one random 8-bit value per class drawn from its jitter band."""
    db, dl, di = check_deltas(deltas)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mask = validate_mask(mask)
    lo = (0, CLASS_PIXEL_VALUES[1] - dl, 255 - di)
    hi = (db, CLASS_PIXEL_VALUES[1] + dl, 255)
    vals = np.array([rng.integers(a, b + 1) for a, b in zip(lo, hi)], dtype=np.float64)
    return torch.as_tensor(pixel_to_unit(vals)[mask][None, None], dtype=dtype)


def fuse(img_a, img_b, zeta):
    if img_a.shape != img_b.shape:
        raise ValueError(f"shape mismatch {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    zeta = float(zeta)
    if not 0.0 <= zeta <= 1.0:
        raise ConfigError(f"zeta must lie in [0, 1], got {zeta}")
    if zeta == 1.0:
        return img_a.clone() if isinstance(img_a, torch.Tensor) else np.array(img_a, copy=True)
    if zeta == 0.0:
        return img_b.clone() if isinstance(img_b, torch.Tensor) else np.array(img_b, copy=True)
    return zeta * img_a + (1.0 - zeta) * img_b


@torch.no_grad()
def synthesize(stack, req: SynthesisRequest, return_intermediates=False):
    """Run the pyramid coarse to fine on ``req.mask``; returns a (1, 1, H, W) tensor."""
    if stack is None or not stack.is_complete:
        raise StateError("synthesis needs a fully trained generator stack")
    sched = stack.schedule
    rng = np.random.default_rng(req.seed)
    out = None
    inter = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(req.seed)
        for i, gen in enumerate(stack.gens):
            m = resize_mask(req.mask, sched.scales[i])
            cond = randomize_condition(m, req.rc_noise, rng) if req.rc_noise is not None else encode_mask(m)
            gen.eval()
            set_dropout(gen, req.dropout_at_inference)
            try:
                out = two_stage_forward(gen, out, cond)
            finally:
                set_dropout(gen, False)
            inter.append(out)
    return (out, inter) if return_intermediates else out


def synthesize_fused(stack_a, stack_b, req: FusionRequest):
    """Returns ``(fused_tensor, zeta)``; both stacks must share a schedule."""
    if stack_a.schedule != stack_b.schedule:
        raise ConfigError("fusion needs two stacks trained on the same scale schedule")
    rng = np.random.default_rng(req.seed)
    zeta = float(rng.uniform(0.0, 1.0)) if req.zeta == "random" else float(req.zeta)
    a = synthesize(stack_a, SynthesisRequest(req.mask, seed=req.seed))
    b = synthesize(stack_b, SynthesisRequest(req.mask, seed=req.seed))
    return fuse(a, b, zeta), zeta


def sample_seed(seed, k):
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1, dtype=np.uint32)[0])


def generate_corpus(stacks, masks, mode, seed=0, out_dir=None, names=None, dropout=False,
                    deltas=PAPER_DELTAS):
    """One synthesized image per mask.

    Returns ``(images, manifest)``.  With ``out_dir`` the pairs are written to
    ``images/``, ``masks/`` and ``manifest.json``.
    """
    mode = mode.upper().replace("-", "_")
    if mode not in (O_ST, RC_ST, IF_ST):
        raise ConfigError(f"unknown corpus mode {mode!r}")
    if not hasattr(stacks, "__len__") or hasattr(stacks, "gens"):
        stacks = [stacks]
    if mode == IF_ST and len(stacks) != 2:
        raise ConfigError("IF_ST needs exactly two generator stacks")
    masks = [validate_mask(m) for m in masks]
    if not masks:
        raise ConfigError("no condition masks given")
    names = list(names) if names is not None else [f"{k:05d}" for k in range(len(masks))]
    images = []
    entries = []
    for k, m in enumerate(masks):
        s = sample_seed(seed, k)
        entry = {"name": names[k], "seed": s}
        if mode == IF_ST:
            img, zeta = synthesize_fused(stacks[0], stacks[1], FusionRequest(m, "random", s))
            entry["zeta"] = zeta
        else:
            rc = deltas if mode == RC_ST else None
            img = synthesize(stacks[0], SynthesisRequest(m, dropout, rc, s))
        images.append(np.clip(to_array(img), -1.0, 1.0))
        entries.append(entry)
    manifest = {"mode": mode, "seed": int(seed), "dropout": bool(dropout),
                "deltas": list(deltas) if mode == RC_ST else None, "samples": entries}
    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        for e, img, m in zip(entries, images, masks):
            save_image_png(out / "images" / f"{e['name']}.png", img)
            save_mask_png(out / "masks" / f"{e['name']}.png", m)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return np.stack(images), manifest
