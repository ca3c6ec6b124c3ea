"""Global impact, per-fixation weights, peripheral/fixation fusion and losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numerics import gaussian_field, gelu, softmax_over


@dataclass
class LossConfig:
    lambda_per: float = 0.5
    lambda_fix: float = 0.5
    confidence: float = 0.1
    # "penalty": -confidence * log(alpha); "printed": +confidence * log(alpha)
    confidence_sign: str = "penalty"

    def __post_init__(self):
        if self.lambda_per < 0 or self.lambda_fix < 0 or self.confidence < 0:
            raise ValueError("loss weights must be non-negative")
        if self.confidence_sign not in ("penalty", "printed"):
            raise ValueError(f"unknown confidence_sign {self.confidence_sign!r}")


class ImpactHead(nn.Module):
    """Shallow ``C -> C/4 -> 1`` scorer with a sigmoid output, shared by alpha and beta."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(1, channels // 4)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(gelu(self.fc1(v)))).squeeze(-1)


def global_impact(tokens: torch.Tensor, head: ImpactHead) -> torch.Tensor:
    """Alpha in (0, 1) from the global average of last-stage tokens ``(B, HW, C)``."""
    return head(tokens.mean(dim=1))


def to_feature_grid(points, source: tuple[int, int], grid: tuple[int, int]) -> torch.Tensor:
    """Source-space (row, col) to feature-grid cell-index coordinates."""
    p = torch.as_tensor(np.asarray(points, dtype=np.float64))
    scale = torch.tensor([grid[0] / source[0], grid[1] / source[1]], dtype=torch.float64)
    return p * scale - 0.5


def fixation_masks(points, source: tuple[int, int], grid: tuple[int, int], sigma: float) -> torch.Tensor:
    """Fixed-variance Gaussian masks on the feature grid, ``(B, N, H_S, W_S)``, peak 1."""
    return gaussian_field(to_feature_grid(points, source, grid), grid, sigma, squared=True)


def fixation_weights(
    tokens: torch.Tensor,
    spatial: tuple[int, int],
    points,
    source: tuple[int, int],
    head: ImpactHead,
    temperature: float = 0.1,
    mask_sigma: float = 1.0,
) -> torch.Tensor:
    """Boltzmann weights over fixations, ``(B, N)``; rows sum to one."""
    n = np.shape(points)[1]
    if n == 0:
        raise ValueError("need at least one fixation")
    masks = fixation_masks(points, source, spatial, mask_sigma).to(tokens.dtype)
    b = tokens.shape[0]
    masks = masks.reshape(b, n, -1)
    # GAP(M * F): mean over all tokens of the masked features
    pooled = torch.einsum("bnt,btc->bnc", masks, tokens) / tokens.shape[1]
    return softmax_over(head(pooled), axes=-1, temperature=temperature)


def fuse(z_per: torch.Tensor, z_fix_each: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor, proj: nn.Module):
    """Returns ``(z, z_fix)`` with ``z_fix = mean_n(beta_n z_n)`` and ``z = proj(z_per + alpha z_fix)``.

    ``z_fix_each`` is ``(B, N, K)``.
    """
    if z_fix_each.shape[1] != beta.shape[1]:
        raise ValueError("one weight per fixation required")
    if z_fix_each.shape[-1] != z_per.shape[-1]:
        raise ValueError("peripheral and fixation logits differ in length")
    n = z_fix_each.shape[1]
    z_fix = (beta.unsqueeze(-1) * z_fix_each).sum(dim=1) / n
    return proj(z_per + alpha.unsqueeze(-1) * z_fix), z_fix


def _check_labels(labels: torch.Tensor, k: int):
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")


def _targets(labels: torch.Tensor, k: int, smoothing: float, dtype) -> torch.Tensor:
    q = torch.full((labels.shape[0], k), smoothing / k, dtype=dtype)
    q.scatter_(1, labels[:, None], 1.0 - smoothing + smoothing / k)
    return q


def nll(logits: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    """Batch-mean negative log-likelihood; ``smoothing`` mixes in the uniform target."""
    logits = torch.atleast_2d(logits)
    labels = torch.as_tensor(labels).reshape(-1)
    k = logits.shape[-1]
    _check_labels(labels, k)
    logp = torch.log_softmax(logits, dim=-1)
    return -(_targets(labels, k, smoothing, logp.dtype) * logp).sum(dim=-1).mean()


def conf_nll(
    logits_fix: torch.Tensor,
    labels: torch.Tensor,
    alpha: torch.Tensor,
    cfg: LossConfig | None = None,
    smoothing: float = 0.0,
) -> torch.Tensor:
    """NLL of ``alpha * p(z_fix) + (1 - alpha) / K`` plus the confidence term."""
    cfg = cfg or LossConfig()
    logits_fix = torch.atleast_2d(logits_fix)
    labels = torch.as_tensor(labels).reshape(-1)
    alpha = torch.as_tensor(alpha, dtype=logits_fix.dtype).reshape(-1)
    k = logits_fix.shape[-1]
    _check_labels(labels, k)
    # a float32 sigmoid rounds to exactly 1.0; log1p(-1) would then send inf * 0 into the gradient
    eps = torch.finfo(alpha.dtype).eps
    alpha = alpha.clamp(eps, 1.0 - eps)
    log_a = torch.log(alpha).unsqueeze(-1)
    log_1ma = torch.log1p(-alpha).unsqueeze(-1)
    log_mix = torch.logaddexp(log_a + torch.log_softmax(logits_fix, dim=-1), log_1ma - math.log(k))
    mix_nll = -(_targets(labels, k, smoothing, log_mix.dtype) * log_mix).sum(dim=-1)
    sign = -1.0 if cfg.confidence_sign == "penalty" else 1.0
    return (mix_nll + sign * cfg.confidence * log_a.squeeze(-1)).mean()


def total_loss(z_per, z_fix, labels, alpha, cfg: LossConfig | None = None, smoothing: float = 0.0) -> torch.Tensor:
    cfg = cfg or LossConfig()
    loss = cfg.lambda_per * nll(z_per, labels, smoothing)
    if cfg.lambda_fix > 0 and z_fix is not None:
        loss = loss + cfg.lambda_fix * conf_nll(z_fix, labels, alpha, cfg, smoothing)
    return loss
