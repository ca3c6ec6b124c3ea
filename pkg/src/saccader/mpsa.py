"""Multi-granularity part-sampling attention.

Per stage ``s`` the block compresses tokens into ``P_s`` soft parts, lets
queries built from the last-stage map attend to those parts, turns the
attention into a non-negative spatial field ``S_s`` and refines the attended
features with it.  Fields are fused across stages into a unit-mass priority
map, which also pools the concatenated refined features into class logits.

Shapes (batch first): tokens ``(B, HW, C)``, parts ``(B, P, C)``, attention
scores ``(B, C, HW, P)``, fields ``(B, H, W)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
from torch import nn

from .backbone import StageFeatures
from .numerics import bilinear_resize, gelu, softmax_over

DEFAULT_PARTS = 8
DEFAULT_IMPORTANCE_DAMPING = 0.1


class DegenerateMapWarning(RuntimeWarning):
    pass


@dataclass
class MpsaConfig:
    parts: int | Sequence[int] = DEFAULT_PARTS
    importance_damping: float = DEFAULT_IMPORTANCE_DAMPING
    disable_position_bias: bool = False

    def parts_for(self, stages: int) -> list[int]:
        if isinstance(self.parts, int):
            return [self.parts] * stages
        parts = list(self.parts)
        if len(parts) != stages:
            raise ValueError(f"got {len(parts)} part counts for {stages} stages")
        return parts


class PsaStage(nn.Module):
    """Part sampling, cross-attention, scalar field and refinement for one stage."""

    def __init__(
        self,
        channels: int,
        spatial: tuple[int, int],
        parts: int,
        query_channels: int,
        damping: float = DEFAULT_IMPORTANCE_DAMPING,
        position_bias: bool = True,
    ):
        super().__init__()
        if not parts < channels:
            raise ValueError(f"part count {parts} must be smaller than channel count {channels}")
        h, w = spatial
        self.channels = channels
        self.spatial = spatial
        self.parts = parts
        # compression sigma_s: layer_norm -> linear -> gelu
        self.norm = nn.LayerNorm(channels, eps=1e-5)
        self.compress = nn.Linear(channels, parts)
        self.spatial_bias = nn.Parameter(torch.zeros(h * w, parts), requires_grad=position_bias)
        self.query = nn.Linear(query_channels, channels, bias=False)
        self.key = nn.Linear(channels, channels, bias=False)
        self.value = nn.Linear(channels, channels, bias=False)
        self.attn_bias = nn.Parameter(torch.zeros(channels, h * w, parts))
        hidden = max(1, parts // 2)
        self.se_fc1 = nn.Linear(parts, hidden)
        self.se_fc2 = nn.Linear(hidden, parts)
        self.refine = nn.Linear(channels, channels)
        self.register_buffer("damping", torch.tensor(float(damping)), persistent=False)

    def part_weights(self, tokens: torch.Tensor) -> torch.Tensor:
        """Spatial softmax per part, ``(B, HW, P)``; every column sums to one."""
        logits = gelu(self.compress(self.norm(tokens))) + self.spatial_bias
        return softmax_over(logits, axes=1)

    def part_sampling(self, tokens: torch.Tensor) -> torch.Tensor:
        weights = self.part_weights(tokens)
        return weights.transpose(1, 2) @ tokens

    def cross_attention(self, queries: torch.Tensor, parts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns scores ``A`` of shape ``(B, C, HW, P)`` and attended tokens ``(B, HW, C)``.

        ``queries`` are last-stage tokens already resampled to this stage's
        grid, ``(B, HW, C_last)``.
        """
        q = self.query(queries)
        k = self.key(parts)
        v = self.value(parts)
        if q.shape[-1] != k.shape[-1]:
            raise ValueError("query and key projections disagree in width")
        scores = (q @ k.transpose(1, 2)) / math.sqrt(self.channels)
        scores = scores.unsqueeze(1) + self.attn_bias
        attn = softmax_over(scores, axes=-1)
        attended = torch.einsum("bctp,bpc->btc", attn, v)
        return scores, attended

    def importance(self, parts: torch.Tensor) -> torch.Tensor:
        """Squeeze-excite gate over parts, values in ``[0, 1]``."""
        squeezed = parts.mean(dim=-1)
        return torch.sigmoid(self.se_fc2(gelu(self.se_fc1(squeezed))))

    def scalar_field(self, scores: torch.Tensor, parts: torch.Tensor) -> torch.Tensor:
        spatial = softmax_over(scores, axes=2)
        gate = self.importance(parts)
        return torch.einsum("bctp,bp->bt", spatial, gate) / self.channels

    def refine_features(self, attended: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
        return self.refine(attended + self.damping * field.unsqueeze(-1))

    def forward(self, feats: StageFeatures, queries: torch.Tensor):
        parts = self.part_sampling(feats.tokens)
        scores, attended = self.cross_attention(queries, parts)
        field = self.scalar_field(scores, parts)
        refined = self.refine_features(attended, field)
        return refined, field, parts


def resample_tokens(tokens: torch.Tensor, src: tuple[int, int], dst: tuple[int, int]) -> torch.Tensor:
    if src == dst:
        return tokens
    b, _, c = tokens.shape
    grid = tokens.transpose(1, 2).reshape(b, c, *src)
    return bilinear_resize(grid, *dst).reshape(b, c, -1).transpose(1, 2)


def fuse_scalar_fields(fields: Sequence[torch.Tensor], gamma: torch.Tensor, shape: tuple[int, int]) -> torch.Tensor:
    """Weighted sum of per-stage fields on a common grid, normalised to unit mass.

    ``fields`` are ``(B, H_s, W_s)``.  Negative mass (possible with negative
    weights) is clamped to zero; a sample with no mass left falls back to the
    uniform map and a :class:`DegenerateMapWarning` is issued.
    """
    if len(fields) != gamma.shape[0]:
        raise ValueError("one weight per stage field required")
    total = sum(g * bilinear_resize(f, *shape) for g, f in zip(gamma, fields))
    total = torch.clamp(total, min=0.0)
    mass = total.sum(dim=(-2, -1), keepdim=True)
    dead = mass <= 0
    if bool(dead.any()):
        warnings.warn("priority map has no positive mass; using uniform map", DegenerateMapWarning)
        total = torch.where(dead, torch.ones_like(total), total)
        mass = total.sum(dim=(-2, -1), keepdim=True)
    return total / mass


def fuse_logits(refined: Sequence[torch.Tensor], spatial: Sequence[tuple[int, int]], priority: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Pool ``gelu(concat(refined))`` with the priority map and classify.

    Each refined map is resampled to the priority map's grid before
    concatenation along channels.
    """
    b, h, w = priority.shape
    stacked = torch.cat([resample_tokens(r, s, (h, w)) for r, s in zip(refined, spatial)], dim=-1)
    if stacked.shape[-1] != head.in_features:
        raise ValueError(f"head expects {head.in_features} features, got {stacked.shape[-1]}")
    pooled = torch.einsum("btc,bt->bc", gelu(stacked), priority.reshape(b, h * w))
    return head(pooled)


class MpsaOutput(NamedTuple):
    priority: torch.Tensor  # (B, H_S, W_S), unit mass
    logits: torch.Tensor  # (B, K)
    fields: list[torch.Tensor]  # per stage, (B, H_s, W_s)
    refined: list[torch.Tensor]


class Mpsa(nn.Module):
    def __init__(
        self,
        channels: Sequence[int],
        shapes: Sequence[tuple[int, int]],
        num_classes: int,
        config: MpsaConfig | None = None,
    ):
        super().__init__()
        config = config or MpsaConfig()
        self.config = config
        self.shapes = [tuple(s) for s in shapes]
        parts = config.parts_for(len(channels))
        self.blocks = nn.ModuleList(
            PsaStage(c, s, p, channels[-1], config.importance_damping, not config.disable_position_bias)
            for c, s, p in zip(channels, self.shapes, parts)
        )
        self.gamma = nn.Parameter(torch.ones(len(channels)))
        self.head = nn.Linear(sum(channels), num_classes)

    def forward(self, feats: Sequence[StageFeatures]) -> MpsaOutput:
        last = feats[-1]
        refined, fields = [], []
        for block, f in zip(self.blocks, feats):
            queries = resample_tokens(last.tokens, last.spatial, f.spatial)
            r, field, _ = block(f, queries)
            refined.append(r)
            fields.append(field.reshape(-1, *f.spatial))
        priority = fuse_scalar_fields(fields, self.gamma, last.spatial)
        logits = fuse_logits(refined, [f.spatial for f in feats], priority, self.head)
        return MpsaOutput(priority, logits, fields, refined)
