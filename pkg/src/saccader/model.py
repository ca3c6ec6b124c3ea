"""The two-pass saccadic classifier.

One encoder (backbone + MPSA) sees the area-downsampled peripheral view and
then each full-resolution fixation window.  Fixation coordinates are numpy
arrays produced behind a detach, so no gradient reaches them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, ReferenceBackbone
from .fusion import ImpactHead, fixation_weights, fuse, global_impact
from .mpsa import Mpsa, MpsaConfig, MpsaOutput
from .saccade import SamplerParams, extract_patches, random_fixations, refine_priority, sample_fixations_batch

SAMPLERS = ("saccadic", "random", "none")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mpsa: MpsaConfig = field(default_factory=MpsaConfig)
    num_classes: int = 10
    source_side: int = 512
    beta_temperature: float = 0.1
    # mask sigma as a fraction of the window side, measured on the feature grid
    mask_fraction: float = 0.25

    def __post_init__(self):
        if self.source_side < self.backbone.input_side:
            raise ValueError("source must be at least as large as the encoder input")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not self.beta_temperature > 0:
            raise ValueError("beta temperature must be positive")

    @property
    def window(self) -> tuple[int, int]:
        s = self.backbone.input_side
        return (s, s)

    @property
    def source(self) -> tuple[int, int]:
        return (self.source_side, self.source_side)

    def mask_sigma(self, grid: tuple[int, int]) -> float:
        return self.mask_fraction * self.window[0] * grid[0] / self.source_side


class ForwardOutput(NamedTuple):
    z: torch.Tensor  # fused logits (B, K)
    z_per: torch.Tensor
    z_fix: torch.Tensor | None  # beta-pooled fixation logits
    z_fix_each: torch.Tensor | None  # (B, N, K)
    alpha: torch.Tensor  # (B,)
    beta: torch.Tensor | None  # (B, N)
    points: np.ndarray  # (B, N, 2) source-space window centres
    peripheral: MpsaOutput
    fallback: np.ndarray


class SaccadicModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = ReferenceBackbone(config.backbone)
        self.mpsa = Mpsa(self.backbone.channels, self.backbone.shapes, config.num_classes, config.mpsa)
        self.impact = ImpactHead(self.backbone.channels[-1])
        self.proj = nn.Linear(config.num_classes, config.num_classes)
        # identity start: the fused logits begin as z_per + alpha * z_fix
        with torch.no_grad():
            self.proj.weight.copy_(torch.eye(config.num_classes))
            self.proj.bias.zero_()

    def peripheral_view(self, x: torch.Tensor) -> torch.Tensor:
        s = self.config.backbone.input_side
        if x.shape[-1] == s and x.shape[-2] == s:
            return x
        return F.adaptive_avg_pool2d(x, (s, s))

    def encode(self, x: torch.Tensor):
        feats = self.backbone(x)
        return feats, self.mpsa(feats)

    def sample(self, priority: torch.Tensor, n: int, sampler: str, params: SamplerParams, seeds: Sequence) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        b = priority.shape[0]
        pooled_shape = (cfg.source_side - cfg.window[0] + 1, cfg.source_side - cfg.window[1] + 1)
        if sampler == "random":
            return random_fixations(pooled_shape, n, cfg.window, seeds), np.zeros(b, dtype=bool)
        pooled = refine_priority(priority.detach(), cfg.source, cfg.window)
        p = params.scaled_to(cfg.source_side)
        p.n = n
        return sample_fixations_batch(pooled, p, cfg.window, seeds)

    def forward(
        self,
        x: torch.Tensor,
        n: int = 4,
        sampler: str = "saccadic",
        params: SamplerParams | None = None,
        seeds: Sequence | None = None,
        points: np.ndarray | None = None,
        uniform_beta: bool = False,
        fixed_alpha: float | None = None,
    ) -> ForwardOutput:
        """Peripheral pass, detached sampling, fixation passes, fusion.

        ``points`` overrides the sampler.  ``seeds`` gives one sampler seed
        per image (defaults to ``params.seed + i``).
        """
        if sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        cfg = self.config
        if x.shape[-2:] != cfg.source:
            raise ValueError(f"expected {cfg.source} source images, got {tuple(x.shape[-2:])}")
        params = params or SamplerParams()
        b = x.shape[0]
        feats, per = self.encode(self.peripheral_view(x))
        last = feats[-1]
        alpha = global_impact(last.tokens, self.impact)
        if fixed_alpha is not None:
            alpha = torch.full_like(alpha, fixed_alpha)
        if points is None and (sampler == "none" or n == 0):
            return ForwardOutput(self.proj(per.logits), per.logits, None, None, alpha, None,
                                 np.zeros((b, 0, 2)), per, np.zeros(b, dtype=bool))
        if points is None:
            seeds = [params.seed + i for i in range(b)] if seeds is None else seeds
            points, fallback = self.sample(per.priority, n, sampler, params, seeds)
        else:
            points = np.asarray(points, dtype=np.float64)
            fallback = np.zeros(b, dtype=bool)
        n = points.shape[1]
        # crops are taken from the raw tensor with constant coordinates
        patches = extract_patches(x, points, cfg.window)
        _, fix = self.encode(patches.reshape(b * n, *patches.shape[2:]))
        z_each = fix.logits.reshape(b, n, -1)
        if uniform_beta:
            beta = torch.full((b, n), 1.0 / n, dtype=z_each.dtype)
        else:
            beta = fixation_weights(last.tokens, last.spatial, points, cfg.source, self.impact,
                                    cfg.beta_temperature, cfg.mask_sigma(last.spatial))
        z, z_fix = fuse(per.logits, z_each, alpha, beta, self.proj)
        return ForwardOutput(z, per.logits, z_fix, z_each, alpha, beta, points, per, fallback)


def build_model(config: ModelConfig, seed: int = 0) -> SaccadicModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SaccadicModel(config)
