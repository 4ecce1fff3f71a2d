"""Conditional noise-prediction U-Net with tappable skip connections.

Topology mirrors the classic four-block encoder / bottleneck / four-block
decoder layout. One skip tap per encoder subblock plus the stem, indexed
l=0 (stem) .. 1 + 4*subblocks - 1 (the tap preceding the bottleneck), with
the string tap "h" addressing the bottleneck output. A tap-mode mapping
passed per forward call can record any tap or replace it with a blended
feature before the mirrored decoder subblock consumes it.

Conditioning is a learned class embedding added to the timestep embedding;
both modulate every residual block FiLM-style. Forward contains no
randomness and parameters are immutable after build, so calls are reentrant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

TapId = Union[int, str]
H_TAP: TapId = "h"


class UNetError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    block_channels: Tuple[int, int, int, int] = (32, 64, 96, 128)
    subblocks_per_block: int = 3
    time_embed_dim: int = 128
    num_conditions: int = 64
    cond_embed_dim: int = 64

    def validate(self) -> None:
        if len(self.block_channels) != 4:
            raise UNetError(f"block_channels must have 4 entries, got {len(self.block_channels)}")
        if self.image_size % 8 != 0:
            raise UNetError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.subblocks_per_block < 1:
            raise UNetError("subblocks_per_block must be >= 1")
        if min(self.block_channels) < 1 or self.num_conditions < 1:
            raise UNetError("channel counts and num_conditions must be positive")

    @property
    def num_skip_taps(self) -> int:
        return 1 + 4 * self.subblocks_per_block

    def tap_ids(self) -> List[TapId]:
        return list(range(self.num_skip_taps)) + [H_TAP]

    def tap_shape(self, tap: TapId) -> Tuple[int, int, int]:
        """Native (C, H, W) of a tap; a pure function of the config."""
        s = self.image_size
        if tap == H_TAP:
            return (self.block_channels[3], s // 8, s // 8)
        if not isinstance(tap, int) or not 0 <= tap < self.num_skip_taps:
            raise UNetError(f"unknown tap id {tap!r}")
        if tap == 0:
            return (self.block_channels[0], s, s)
        block = (tap - 1) // self.subblocks_per_block
        res = s >> block
        return (self.block_channels[block], res, res)

    def tap_group(self, group: int) -> List[int]:
        """Skip taps of encoder block `group` (1-based), e.g. group 2 -> [4, 5, 6]."""
        if not 1 <= group <= 4:
            raise UNetError(f"group must be in 1..4, got {group}")
        s = self.subblocks_per_block
        return list(range(1 + (group - 1) * s, 1 + group * s))

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "block_channels": list(self.block_channels),
            "subblocks_per_block": self.subblocks_per_block,
            "time_embed_dim": self.time_embed_dim,
            "num_conditions": self.num_conditions,
            "cond_embed_dim": self.cond_embed_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        cfg = UNetConfig(
            image_size=int(d["image_size"]),
            in_channels=int(d["in_channels"]),
            block_channels=tuple(int(c) for c in d["block_channels"]),
            subblocks_per_block=int(d["subblocks_per_block"]),
            time_embed_dim=int(d["time_embed_dim"]),
            num_conditions=int(d["num_conditions"]),
            cond_embed_dim=int(d["cond_embed_dim"]),
        )
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class Conditioning:
    """Discrete condition; class_id None selects the classifier-free null slot."""

    class_id: Optional[int] = None

    def embedding_index(self, num_conditions: int) -> int:
        if self.class_id is None:
            return num_conditions
        if not 0 <= self.class_id < num_conditions:
            raise UNetError(f"class_id {self.class_id} outside [0, {num_conditions})")
        return self.class_id


# --- tap modes -------------------------------------------------------------

@dataclass(frozen=True)
class Passthrough:
    pass


@dataclass(frozen=True)
class Record:
    pass


@dataclass
class Inject:
    """Replace a tap with blend(live, feature, gamma, mask).

    feature is (C, H, W) in the tap's native shape (or (B, C, H, W) matching
    the call batch); mask is a per-channel bool tensor, True = injected.
    """

    feature: torch.Tensor
    gamma: float = 1.0
    mask: Optional[torch.Tensor] = None


PASSTHROUGH = Passthrough()
RECORD = Record()

TapModes = Dict[TapId, Union[Passthrough, Record, Inject]]
SkipBundle = Dict[TapId, torch.Tensor]


def blend(f_orig: torch.Tensor, f_inj: torch.Tensor, gamma: float, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-channel guided mix: injected channels get orig + gamma*(inj - orig).

    gamma=0 returns f_orig exactly and gamma=1 with a full mask returns f_inj
    exactly (no arithmetic, so the endpoints are bitwise). Channels where
    mask is False keep f_orig untouched.
    """
    if gamma < 0:
        raise UNetError(f"gamma must be >= 0, got {gamma}")
    if f_inj.shape[-3:] != f_orig.shape[-3:]:
        raise UNetError(f"feature shape {tuple(f_inj.shape)} does not match {tuple(f_orig.shape)}")
    if mask is not None and mask.shape != (f_orig.shape[-3],):
        raise UNetError(f"mask depth {tuple(mask.shape)} does not match {f_orig.shape[-3]} channels")
    if gamma == 0.0 or (mask is not None and not bool(mask.any())):
        return f_orig
    f_inj = f_inj.to(f_orig.dtype).expand_as(f_orig)
    mixed = f_inj if gamma == 1.0 else f_orig + gamma * (f_inj - f_orig)
    if mask is None or bool(mask.all()):
        return mixed
    shape = [1] * f_orig.dim()
    shape[-3] = f_orig.shape[-3]
    return torch.where(mask.view(shape), mixed, f_orig)


# --- network blocks --------------------------------------------------------

def _norm_groups(ch: int) -> int:
    return math.gcd(8, ch)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    )
    args = t.float().reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


class FiLMResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb_proj(F.silu(emb)).chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class UNetModel(nn.Module):
    """Noise predictor; forward optionally records/replaces any skip tap."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        chs = config.block_channels
        s = config.subblocks_per_block
        emb = config.time_embed_dim

        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.cond_embed = nn.Embedding(config.num_conditions + 1, config.cond_embed_dim)
        self.cond_proj = nn.Linear(config.cond_embed_dim, emb)

        self.stem = nn.Conv2d(config.in_channels, chs[0], 3, padding=1)
        self.downs = nn.ModuleList(
            [nn.Conv2d(chs[b - 1], chs[b], 3, stride=2, padding=1) for b in range(1, 4)]
        )
        self.enc = nn.ModuleList(
            [nn.ModuleList([FiLMResBlock(chs[b], chs[b], emb) for _ in range(s)]) for b in range(4)]
        )
        self.mid1 = FiLMResBlock(chs[3], chs[3], emb)
        self.mid2 = FiLMResBlock(chs[3], chs[3], emb)
        self.dec = nn.ModuleList(
            [nn.ModuleList([FiLMResBlock(2 * chs[b], chs[b], emb) for _ in range(s)]) for b in range(4)]
        )
        self.ups = nn.ModuleList(
            [nn.Conv2d(chs[b], chs[b - 1], 3, padding=1) for b in range(3, 0, -1)]
        )
        self.dec_stem = FiLMResBlock(2 * chs[0], chs[0], emb)
        self.out_norm = nn.GroupNorm(_norm_groups(chs[0]), chs[0])
        self.out_conv = nn.Conv2d(chs[0], config.in_channels, 3, padding=1)

    @property
    def tap_ids(self) -> List[TapId]:
        return self.config.tap_ids()

    def _embed(self, t, cond, batch: int) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.full((batch,), int(t), dtype=torch.long)
        elif t.dim() == 0:
            t = t.reshape(1).expand(batch)
        emb = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim))
        if isinstance(cond, Conditioning):
            cond = [cond] * batch
        if len(cond) != batch:
            raise UNetError(f"got {len(cond)} conditionings for batch of {batch}")
        ids = torch.tensor(
            [c.embedding_index(self.config.num_conditions) for c in cond], dtype=torch.long
        )
        return emb + self.cond_proj(self.cond_embed(ids))

    def forward_with_ids(self, x: torch.Tensor, t: torch.Tensor, cond_ids: torch.Tensor) -> torch.Tensor:
        """Training-path forward: raw embedding indices, no tap machinery."""
        emb = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim))
        emb = emb + self.cond_proj(self.cond_embed(cond_ids))
        return self._run(x, emb, None, {})[0]

    def forward(self, x, t, cond, tap_modes: Optional[TapModes] = None):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels or x.shape[2] != self.config.image_size or x.shape[3] != self.config.image_size:
            raise UNetError(
                f"latent shape {tuple(x.shape)} does not match config "
                f"(B, {self.config.in_channels}, {self.config.image_size}, {self.config.image_size})"
            )
        if tap_modes:
            for tap in tap_modes:
                self.config.tap_shape(tap)  # raises on unknown ids
        emb = self._embed(t, cond, x.shape[0])
        recorded: SkipBundle = {}
        out, _ = self._run(x, emb, tap_modes, recorded)
        return out, recorded

    def _tap(self, tap: TapId, live: torch.Tensor, modes: Optional[TapModes], recorded: SkipBundle) -> torch.Tensor:
        mode = modes.get(tap) if modes else None
        if mode is None or isinstance(mode, Passthrough):
            return live
        if isinstance(mode, Record):
            recorded[tap] = live.detach().clone()
            return live
        native = self.config.tap_shape(tap)
        if tuple(mode.feature.shape[-3:]) != native:
            raise UNetError(
                f"injected feature for tap {tap!r} has shape {tuple(mode.feature.shape)}, expected {native}"
            )
        return blend(live, mode.feature, mode.gamma, mode.mask)

    def _run(self, x, emb, modes, recorded):
        cfg = self.config
        skips: Dict[int, torch.Tensor] = {}
        h = self.stem(x)
        skips[0] = h
        tap = 1
        for b in range(4):
            if b > 0:
                h = self.downs[b - 1](h)
            for sub in self.enc[b]:
                h = sub(h, emb)
                skips[tap] = h
                tap += 1
        h = self.mid1(h, emb)
        h = self.mid2(h, emb)
        h = self._tap(H_TAP, h, modes, recorded)
        tap = cfg.num_skip_taps - 1
        for b in range(3, -1, -1):
            for sub in reversed(self.dec[b]):
                skip = self._tap(tap, skips[tap], modes, recorded)
                h = sub(torch.cat([h, skip], dim=1), emb)
                tap -= 1
            if b > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[3 - b](h)
        skip0 = self._tap(0, skips[0], modes, recorded)
        h = self.dec_stem(torch.cat([h, skip0], dim=1), emb)
        return self.out_conv(F.silu(self.out_norm(h))), recorded


def build_unet(config: UNetConfig, seed: int) -> UNetModel:
    """Build a model with parameters drawn deterministically from seed.

    Initialization iterates parameters in sorted name order with an explicit
    generator, so two builds from the same (config, seed) are identical
    regardless of global RNG state.
    """
    config.validate()
    model = UNetModel(config)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if name.startswith("cond_embed"):
                p.copy_(torch.randn(p.shape, generator=g) * 0.02)
            elif p.dim() >= 2:
                fan_in = p.shape[1] * (p[0, 0].numel() if p.dim() > 2 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_((torch.rand(p.shape, generator=g) * 2 - 1) * bound)
            elif name.endswith("bias"):
                p.zero_()
            else:  # norm weights
                p.fill_(1.0)
        # near-zero final projection keeps early training stable
        for p in (model.out_conv.weight, model.out_conv.bias):
            p.mul_(0.01)
    model.eval()
    return model


def forward(model: UNetModel, latent: torch.Tensor, t, cond, taps: Optional[TapModes] = None):
    """Tap-aware noise prediction: returns (noise_prediction, recorded skips).

    Recorded tensors keep the call's batch dimension; sampling code slices
    the branch it wants before caching.
    """
    return model.forward(latent, t, cond, taps)
