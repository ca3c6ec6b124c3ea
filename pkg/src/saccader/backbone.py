"""Weight-shared multi-stage encoder.

The reference encoder is deliberately tiny: a patchify stem followed by 2x2
token-merging stages, each ending in ``layer_norm -> linear -> gelu``.  Before
every merge a residual depthwise-conv/MLP block mixes neighbouring tokens so
the features are not tied to the merge grid.

Any module returning a list of :class:`StageFeatures` and exposing a
``channels`` tuple can stand in for :class:`ReferenceBackbone`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .numerics import gelu


class StageFeatures(NamedTuple):
    """Row-major token matrix of one encoder stage, ``(B, H*W, C)``."""

    tokens: torch.Tensor
    spatial: tuple[int, int]
    stage_index: int

    def grid(self) -> torch.Tensor:
        """Tokens as ``(B, C, H, W)``."""
        b, _, c = self.tokens.shape
        h, w = self.spatial
        return self.tokens.transpose(1, 2).reshape(b, c, h, w)


@dataclass
class BackboneConfig:
    channels: tuple[int, ...] = (32, 64, 128, 256)
    input_side: int = 224
    patch: int = 4
    in_channels: int = 3
    mix: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 1:
            raise ValueError("need at least one stage")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel counts must be positive: {self.channels}")
        if self.patch < 1 or self.input_side < self.patch:
            raise ValueError("patch size must be in [1, input_side]")

    @property
    def stages(self) -> int:
        return len(self.channels)

    def stage_shapes(self) -> list[tuple[int, int]]:
        side = self.input_side // self.patch
        shapes = [(side, side)]
        for _ in range(1, self.stages):
            side //= 2
            if side < 1:
                raise ValueError("too many stages for this input side")
            shapes.append((side, side))
        return shapes


class _Projection(nn.Module):
    """layer_norm -> linear -> gelu; the pixel stem skips the norm."""

    def __init__(self, c_in: int, c_out: int, normalize: bool = True):
        super().__init__()
        # per-patch normalisation of raw pixels would scale faint background
        # texture up to the contrast of real structure
        self.norm = nn.LayerNorm(c_in, eps=1e-5) if normalize else nn.Identity()
        self.linear = nn.Linear(c_in, c_out)

    def forward(self, t):
        return gelu(self.linear(self.norm(t)))


class _TokenMix(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.dw = nn.Conv2d(c, c, 3, padding=1, groups=c)
        self.norm = nn.LayerNorm(c, eps=1e-5)
        self.fc1 = nn.Linear(c, 2 * c)
        self.fc2 = nn.Linear(2 * c, c)

    def forward(self, grid):
        # grid: (B, C, H, W)
        t = self.dw(grid).permute(0, 2, 3, 1)
        t = self.fc2(gelu(self.fc1(self.norm(t))))
        return grid + t.permute(0, 3, 1, 2)


class ReferenceBackbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.channels = config.channels
        self.shapes = config.stage_shapes()
        p = config.patch
        self.stem = _Projection(config.in_channels * p * p, config.channels[0], normalize=False)
        self.mixers = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s in range(1, config.stages):
            c_prev = config.channels[s - 1]
            self.mixers.append(_TokenMix(c_prev) if config.mix else nn.Identity())
            self.merges.append(_Projection(4 * c_prev, config.channels[s]))

    def forward(self, x: torch.Tensor) -> list[StageFeatures]:
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels or x.shape[-2:] != (cfg.input_side, cfg.input_side):
            raise ValueError(
                f"expected (B, {cfg.in_channels}, {cfg.input_side}, {cfg.input_side}) input, got {tuple(x.shape)}"
            )
        p = cfg.patch
        b = x.shape[0]
        h, w = self.shapes[0]
        x = x[:, :, : h * p, : w * p]
        patches = x.reshape(b, cfg.in_channels, h, p, w, p).permute(0, 2, 4, 1, 3, 5)
        tokens = self.stem(patches.reshape(b, h * w, -1))
        out = [StageFeatures(tokens, (h, w), 0)]
        for s, (mix, merge) in enumerate(zip(self.mixers, self.merges), start=1):
            grid = mix(out[-1].grid())
            h, w = self.shapes[s]
            grid = grid[:, :, : 2 * h, : 2 * w]
            c = grid.shape[1]
            quads = grid.reshape(b, c, h, 2, w, 2).permute(0, 2, 4, 3, 5, 1).reshape(b, h * w, 4 * c)
            out.append(StageFeatures(merge(quads), (h, w), s))
        return out

    def final_projection(self) -> nn.Linear:
        return (self.merges[-1] if len(self.merges) else self.stem).linear


def reference_backbone(config: BackboneConfig | None = None, seed: int = 0) -> ReferenceBackbone:
    """Build the reference encoder with weights drawn from ``seed``."""
    config = config or BackboneConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ReferenceBackbone(config)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
