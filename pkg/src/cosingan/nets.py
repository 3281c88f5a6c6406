"""Per-scale UNet generators, patch discriminators and the two-stage forward pass."""

from __future__ import annotations

import copy
import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, StateError

CONCAT, ADD = "concat", "add"


@dataclass(frozen=True)
class GeneratorSpec:
    depth: int
    in_channels: int = 2
    base_width: int = 32
    dropout_rate: float = 0.5
    max_width: int = 256

    def __post_init__(self):
        if self.depth < 3:
            raise ConfigError(f"generator depth must be >= 3, got {self.depth}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1]")
        if self.in_channels < 1 or self.base_width < 1:
            raise ConfigError("in_channels and base_width must be positive")


@dataclass(frozen=True)
class DiscriminatorSpec:
    conv_layers: int
    in_channels: int = 2
    base_width: int = 32
    max_width: int = 256

    def __post_init__(self):
        if self.conv_layers < 3:
            raise ConfigError(f"discriminator needs >= 3 conv layers, got {self.conv_layers}")


def _width(k, base, cap):
    return min(base * 2 ** k, cap)


class Down(nn.Module):
    def __init__(self, cin, cout, norm=True):
        super().__init__()
        layers = [nn.Conv2d(cin, cout, 4, stride=2, padding=1, bias=not norm)]
        if norm:
            layers.append(nn.InstanceNorm2d(cout, affine=True))
        layers.append(nn.LeakyReLU(0.2))
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class Up(nn.Module):
    def __init__(self, cin, cout, dropout=0.0):
        super().__init__()
        layers = [
            nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(cout, affine=True),
            nn.ReLU(),
        ]
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class UNetGenerator(nn.Module):
    """pix2pix-style encoder/decoder with ``depth`` stride-2 stages and skips.

    ``down[k]`` and ``up[k]`` are indexed from the outermost level, so
    generators of different depth share block names for the outer levels.
    Dropout sits on the three innermost decoder blocks.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        d, b, cap = spec.depth, spec.base_width, spec.max_width
        self.down = nn.ModuleList()
        cin = spec.in_channels
        for k in range(d):
            cout = _width(k, b, cap)
            self.down.append(Down(cin, cout, norm=0 < k < d - 1))
            cin = cout
        self.up = nn.ModuleList()
        for k in range(d - 1):
            skip = _width(k, b, cap)
            below = _width(k + 1, b, cap)
            cin = below if k == d - 2 else 2 * below
            drop = spec.dropout_rate if k >= d - 4 else 0.0
            self.up.append(Up(cin, skip, drop))
        self.head = nn.ConvTranspose2d(2 * _width(0, b, cap), 1, 4, stride=2, padding=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        f = 2 ** self.spec.depth
        if h % f or w % f or h // f < 1 or w // f < 1:
            raise ValueError(f"input {h}x{w} incompatible with {self.spec.depth} downsamplings")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for k in range(len(self.up) - 1, -1, -1):
            x = self.up[k](x)
            x = torch.cat([x, skips[k]], dim=1)
        return torch.tanh(self.head(x))

    def bottleneck_shape(self, h, w):
        f = 2 ** self.spec.depth
        return h // f, w // f


class PatchDiscriminator(nn.Module):
    """``conv_layers - 2`` stride-2 convolutions, then two stride-1 3x3 convs.

    Output is a logit map at 1/2^(conv_layers-2) of the input resolution.
    """

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.in_channels
        n_down = spec.conv_layers - 2
        for k in range(n_down):
            cout = _width(k, spec.base_width, spec.max_width)
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1, bias=k == 0))
            if k > 0:
                layers.append(nn.InstanceNorm2d(cout, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            cin = cout
        layers += [
            nn.Conv2d(cin, cin, 3, padding=1, bias=False),
            nn.InstanceNorm2d(cin, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(cin, 1, 3, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, cond, image):
        if cond.shape[-2:] != image.shape[-2:] or cond.shape[0] != image.shape[0]:
            raise ValueError(f"condition {tuple(cond.shape)} and image {tuple(image.shape)} misaligned")
        return self.net(torch.cat([cond, image], dim=1))


def build_generator(spec: GeneratorSpec) -> UNetGenerator:
    return UNetGenerator(spec)


def build_discriminator(spec: DiscriminatorSpec) -> PatchDiscriminator:
    return PatchDiscriminator(spec)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def set_dropout(module: nn.Module, active: bool):
    """Toggle dropout layers only; instance norm carries no running state."""
    for m in module.modules():
        if isinstance(m, nn.Dropout):
            m.train(active)


def freeze(module: nn.Module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def transfer_weights(src: nn.Module, dst: nn.Module) -> int:
    """Copy every tensor whose name and shape match; return how many were copied."""
    src_state = src.state_dict()
    dst_state = dst.state_dict()
    copied = 0
    for name, t in dst_state.items():
        s = src_state.get(name)
        if s is not None and s.shape == t.shape:
            dst_state[name] = s.clone()
            copied += 1
    dst.load_state_dict(dst_state)
    return copied


# ---------------------------------------------------------------------------
# two-stage generator
# ---------------------------------------------------------------------------

def combine_inputs(prev_output, cond, combine=CONCAT):
    if prev_output is None:
        return cond
    if prev_output.shape[0] != cond.shape[0]:
        raise ValueError("previous output and condition batch sizes differ")
    up = F.interpolate(prev_output, size=tuple(cond.shape[-2:]), mode="bilinear", align_corners=False)
    if combine == CONCAT:
        return torch.cat([up, cond], dim=1)
    if combine == ADD:
        return up + cond
    raise ConfigError(f"unknown combine mode {combine!r}")


def stage1_forward(g_super, prev_output, cond, combine=CONCAT):
    """O_is: upsample the previous scale's output, join with the condition, run g_super."""
    x = combine_inputs(prev_output, cond, combine)
    if x.shape[1] != g_super.spec.in_channels:
        raise ValueError(f"generator expects {g_super.spec.in_channels} channels, got {x.shape[1]}")
    return g_super(x)


def stage2_forward(g_restore, o_is):
    """O_ir from O_is alone; the image is replicated into every input channel."""
    if o_is.ndim != 4 or o_is.shape[1] != 1:
        raise ValueError(f"expected (B, 1, H, W), got {tuple(o_is.shape)}")
    x = o_is.expand(-1, g_restore.spec.in_channels, -1, -1)
    return g_restore(x)


class TwoStageGenerator(nn.Module):
    def __init__(self, g_super: UNetGenerator, scale_index: int, combine: str = CONCAT):
        super().__init__()
        self.g_super = g_super
        self.g_restore = None
        self.scale_index = scale_index
        self.combine = combine

    def init_restore(self):
        """Clone the (trained) stage-1 generator into the restoration slot."""
        self.g_restore = copy.deepcopy(self.g_super)
        return self.g_restore

    def forward(self, prev_output, cond):
        return two_stage_forward(self, prev_output, cond)


def two_stage_forward(gen: TwoStageGenerator, prev_output, cond):
    if gen.g_restore is None:
        raise StateError(f"scale {gen.scale_index} has no restoration generator yet")
    o_is = stage1_forward(gen.g_super, prev_output, cond, gen.combine)
    return stage2_forward(gen.g_restore, o_is)


def generator_in_channels(scale_index, combine=CONCAT):
    return 1 if scale_index == 0 or combine == ADD else 2


# ---------------------------------------------------------------------------
# checkpoint archives
# ---------------------------------------------------------------------------
#
# scale{i}_{stage}.bin is a zip archive holding
#   manifest.json  {"format": "cosingan-ckpt/1", "scale_index", "stage",
#                   "generator_spec", "combine", "epoch", "schedule", "extra"}
#   weights.pt     torch-serialized state dict of the stage generator
#   state.pt       optional torch-serialized training state (rng, etc.)

CKPT_FORMAT = "cosingan-ckpt/1"


def _tensor_bytes(obj):
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _write_entry(zf, name, data):
    # fixed timestamp keeps archives byte-identical across reruns
    zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), data)


def save_checkpoint(path, generator: UNetGenerator, scale_index, stage, epoch, combine=CONCAT,
                    schedule=None, extra=None, state=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": CKPT_FORMAT,
        "scale_index": int(scale_index),
        "stage": stage,
        "generator_spec": asdict(generator.spec),
        "combine": combine,
        "epoch": int(epoch),
        "schedule": schedule,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        _write_entry(zf, "weights.pt", _tensor_bytes(generator.state_dict()))
        if state is not None:
            _write_entry(zf, "state.pt", _tensor_bytes(state))
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Return ``(generator, manifest, state_or_None)``."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CKPT_FORMAT:
            raise StateError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
        weights = torch.load(io.BytesIO(zf.read("weights.pt")), weights_only=True)
        state = None
        if "state.pt" in zf.namelist():
            state = torch.load(io.BytesIO(zf.read("state.pt")), weights_only=False)
    gen = UNetGenerator(GeneratorSpec(**manifest["generator_spec"]))
    gen.load_state_dict(weights)
    return gen, manifest, state
