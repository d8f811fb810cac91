"""Denoiser U-Net, retrieval encoder, and the zero-initialized control branch."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserSpec:
    image_size: int = 32
    base_channels: int = 32
    depth: int = 3
    time_embed_dim: int = 128

    def validate(self):
        if self.image_size % (2 ** self.depth) != 0:
            raise ValueError("image_size must be divisible by 2**depth")
        if min(self.image_size, self.base_channels, self.depth,
               self.time_embed_dim) < 1:
            raise ValueError("all spec counts must be positive")


@dataclass(frozen=True)
class EncoderSpec:
    image_size: int = 32
    embed_dim: int = 128
    base_channels: int = 32
    stages: int = 3
    feature_tap: int = 1  # penultimate stage by default for stages=3

    def validate(self):
        if not 0 <= self.feature_tap < self.stages:
            raise ValueError("feature_tap must index an existing stage")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        dtype = t.dtype if t.is_floating_point() else torch.float32
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=dtype,
                                              device=t.device) / (half - 1))
        args = t.to(dtype)[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.norm1 = _norm(ch_in)
        self.norm2 = _norm(ch_out)
        self.time_proj = nn.Linear(time_dim, ch_out)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, temb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class _DownPath(nn.Module):
    """Shared topology of the denoiser encoder half and the control branch."""

    def __init__(self, spec: DenoiserSpec, in_channels: int = 1):
        super().__init__()
        self.spec = spec
        ch = [spec.base_channels * (2 ** i) for i in range(spec.depth + 1)]
        self.chans = ch
        self.time_mlp = nn.Sequential(
            SinusoidalTimeEmbedding(spec.time_embed_dim),
            nn.Linear(spec.time_embed_dim, spec.time_embed_dim),
            nn.SiLU(),
            nn.Linear(spec.time_embed_dim, spec.time_embed_dim),
        )
        self.stem = nn.Conv2d(in_channels, ch[0], 3, padding=1)
        self.blocks = nn.ModuleList(
            [ResBlock(ch[i], ch[i], spec.time_embed_dim) for i in range(spec.depth)])
        self.downs = nn.ModuleList(
            [nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1)
             for i in range(spec.depth)])
        self.mid = ResBlock(ch[-1], ch[-1], spec.time_embed_dim)

    def forward(self, x, t):
        temb = self.time_mlp(t)
        h = self.stem(x)
        skips = []
        for block, down in zip(self.blocks, self.downs):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        return skips, h, temb


class Denoiser(nn.Module):
    """Small U-shaped noise predictor with optional control residuals.

    Control residuals, when given, are a list of depth+1 tensors matching the
    skip activations and the bottleneck activation; they are added in place
    at those junctions.
    """

    def __init__(self, spec: DenoiserSpec = DenoiserSpec()):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.down = _DownPath(spec)
        ch = self.down.chans
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], 4, stride=2, padding=1)
             for i in reversed(range(spec.depth))])
        self.up_blocks = nn.ModuleList(
            [ResBlock(ch[i] * 2, ch[i], spec.time_embed_dim)
             for i in reversed(range(spec.depth))])
        self.out_norm = _norm(ch[0])
        self.out_conv = nn.Conv2d(ch[0], 1, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x, t, control_residuals=None):
        if x.shape[-1] != self.spec.image_size or x.shape[-2] != self.spec.image_size:
            raise ValueError(
                f"expected {self.spec.image_size}x{self.spec.image_size} input, "
                f"got {tuple(x.shape[-2:])}")
        skips, h, temb = self.down(x, t)
        if control_residuals is not None:
            if len(control_residuals) != len(skips) + 1:
                raise ValueError("control residual count mismatch")
            for s, r in zip(skips, control_residuals):
                if s.shape != r.shape:
                    raise ValueError("control residual shape mismatch")
            skips = [s + r for s, r in zip(skips, control_residuals)]
            h = h + control_residuals[-1]
        for up, block, skip in zip(self.ups, self.up_blocks, reversed(skips)):
            h = up(h)
            h = block(torch.cat([h, skip], dim=1), temb)
        return self.out_conv(self.act(self.out_norm(h)))


class ControlBranch(nn.Module):
    """Trainable copy of the denoiser down path behind zero-initialized 1x1
    projections: the condition enters through a zero conv at the input and
    every emitted residual leaves through a zero conv, so a fresh branch is
    an exact no-op on the backbone."""

    def __init__(self, spec: DenoiserSpec = DenoiserSpec()):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.down = _DownPath(spec)
        self.cond_in = nn.Conv2d(1, 1, 1)
        ch = self.down.chans
        self.zero_outs = nn.ModuleList(
            [nn.Conv2d(c, c, 1) for c in ch[:spec.depth] + [ch[spec.depth]]])
        for conv in [self.cond_in, *self.zero_outs]:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    @classmethod
    def from_denoiser(cls, denoiser: Denoiser) -> "ControlBranch":
        branch = cls(denoiser.spec)
        branch.down.load_state_dict(denoiser.down.state_dict())
        return branch

    def forward(self, x, t, r):
        if r.shape != x.shape:
            raise ValueError(f"condition shape {tuple(r.shape)} != input {tuple(x.shape)}")
        skips, h, _ = self.down(x + self.cond_in(r), t)
        feats = skips + [h]
        return [z(f) for z, f in zip(self.zero_outs, feats)]


class Encoder(nn.Module):
    """Convolutional pyramid encoder producing a retrieval embedding plus a
    pooled intermediate feature vector for the perceptual loss."""

    def __init__(self, spec: EncoderSpec = EncoderSpec()):
        super().__init__()
        spec.validate()
        self.spec = spec
        ch_in = 1
        stages = []
        ch = spec.base_channels
        for _ in range(spec.stages):
            stages.append(nn.Sequential(
                nn.Conv2d(ch_in, ch, 3, stride=2, padding=1),
                _norm(ch),
                nn.SiLU(),
            ))
            ch_in, ch = ch, ch * 2
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(ch_in, spec.embed_dim)

    def forward(self, x):
        if x.ndim == 3:
            x = x[:, None]
        h = x
        tap = None
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i == self.spec.feature_tap:
                tap = h.mean(dim=(2, 3))
        emb = self.head(h.mean(dim=(2, 3)))
        return emb, tap


def denoiser_forward(model: Denoiser, x_t, t, control_residuals=None):
    return model(x_t, t, control_residuals)


def control_forward(branch: ControlBranch, x_t, t, r):
    return branch(x_t, t, r)


def encode(encoder: Encoder, x):
    return encoder(x)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, module: nn.Module, spec, extra: dict | None = None) -> None:
    """Versioned, self-describing checkpoint; round-trips bit-exactly."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": type(module).__name__,
        "spec": asdict(spec),
        "state_dict": module.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    return payload


def build_from_checkpoint(path) -> tuple[nn.Module, dict]:
    payload = load_checkpoint(path)
    kind = payload["kind"]
    if kind == "Denoiser":
        module = Denoiser(DenoiserSpec(**payload["spec"]))
    elif kind == "ControlBranch":
        module = ControlBranch(DenoiserSpec(**payload["spec"]))
    elif kind == "Encoder":
        module = Encoder(EncoderSpec(**payload["spec"]))
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    module.load_state_dict(payload["state_dict"])
    return module, payload["extra"]
