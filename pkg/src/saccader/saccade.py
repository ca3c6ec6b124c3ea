"""Priority refinement, fixation sampling and patch extraction.

Everything in here sits behind the stop-gradient: maps arrive detached and
sampled coordinates are plain numpy arrays.

Temperature is applied to the map as a distribution, i.e. draws follow
``softmax(log(S) / tau)``, which is ``S ** (1 / tau)`` renormalised.  That keeps
the sampler independent of the map's overall scale (the maps carry unit
mass, so their raw values shrink with resolution).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .numerics import bilinear_resize

REFERENCE_SIDE = 512

FEATURE_GRID = "feature-grid"
SOURCE_GRID = "source-grid"
POOLED_GRID = "pooled-grid"


@dataclass
class SamplerParams:
    temperature: float = 0.1
    nms_sigma: float = 50.0
    nms_strength: float = 0.95
    squared_kernel: bool = False
    n: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.nms_sigma > 0:
            raise ValueError("nms_sigma must be positive")
        # 0 switches suppression off, which the ablations need
        if not 0 <= self.nms_strength < 1:
            raise ValueError("nms_strength must lie in [0, 1)")
        if self.n < 0:
            raise ValueError("fixation count must be non-negative")

    def scaled_to(self, source_side: int) -> "SamplerParams":
        """Copy with ``nms_sigma`` rescaled from the 512px reference to ``source_side``."""
        return replace(self, nms_sigma=self.nms_sigma * source_side / REFERENCE_SIDE)


@dataclass
class PriorityMap:
    field: np.ndarray
    resolution: str = FEATURE_GRID
    offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.field = np.asarray(self.field, dtype=np.float64)
        if self.field.ndim != 2:
            raise ValueError("priority map must be 2-D")
        if (self.field < 0).any():
            raise ValueError("priority map has negative entries")

    @property
    def mass(self) -> float:
        return float(self.field.sum())


@dataclass
class FixationSet:
    points: np.ndarray  # (N, 2) source-space (row, col) window centres
    cells: np.ndarray  # (N, 2) pooled-grid indices
    snapshots: list[np.ndarray] = field(default_factory=list)
    fallback: bool = False

    def __len__(self):
        return len(self.points)


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().to(torch.float64).cpu().numpy()
    return np.asarray(t, dtype=np.float64)


def _unit_mass(a: np.ndarray) -> np.ndarray:
    mass = a.sum(axis=(-2, -1), keepdims=True)
    uniform = np.full_like(a, 1.0 / (a.shape[-1] * a.shape[-2]))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(mass > 0, a / np.where(mass > 0, mass, 1.0), uniform)


def refine_priority(priority, source: tuple[int, int], window: tuple[int, int], backend: str | None = None):
    """Upsample a feature-grid map to the source grid and window-average it.

    Accepts ``(h, w)`` or ``(B, h, w)`` maps (array, tensor or
    :class:`PriorityMap`).  Returns unit-mass maps of shape
    ``(H - H' + 1, W - W' + 1)``; a :class:`PriorityMap` in gives one back.
    """
    wrap = isinstance(priority, PriorityMap)
    field_ = priority.field if wrap else priority
    a = _to_numpy(field_)
    single = a.ndim == 2
    if single:
        a = a[None]
    (H, W), (wh, ww) = source, window
    if wh > H or ww > W or wh < 1 or ww < 1:
        raise ValueError(f"window {wh}x{ww} does not fit source {H}x{W}")
    up = bilinear_resize(torch.from_numpy(a), H, W).numpy()
    pooled = _unit_mass(kernels.box_mean(up, wh, ww, backend=backend))
    if single:
        pooled = pooled[0]
    if wrap:
        return PriorityMap(pooled, POOLED_GRID, (wh / 2.0, ww / 2.0))
    return pooled


def sampling_distribution(pooled, temperature: float) -> np.ndarray:
    """Per-cell draw probabilities ``softmax(log(S) / tau)`` over the last two axes.

    Zero cells get zero probability; an all-zero map gives the uniform one.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    a = _to_numpy(pooled.field if isinstance(pooled, PriorityMap) else pooled)
    top = a.max(axis=(-2, -1), keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(a > 0, (a / np.where(top > 0, top, 1.0)) ** (1.0 / temperature), 0.0)
    return _unit_mass(w)


def _uniforms(seed, n: int) -> np.ndarray:
    return np.random.default_rng(seed).random(n)


def sample_fixations(
    pooled: PriorityMap | np.ndarray,
    params: SamplerParams,
    window: tuple[int, int] | None = None,
    rng=None,
    record: bool = False,
    backend: str | None = None,
) -> FixationSet:
    """Draw ``params.n`` fixations from a pooled map with Gaussian-penalty NMS.

    ``params.nms_sigma`` is in grid cells here (pooled cells are source
    pixels).  ``window`` gives the offset that maps pooled indices to window
    centres; it defaults to the :class:`PriorityMap` offset.
    """
    if isinstance(pooled, PriorityMap):
        offset = np.asarray(pooled.offset if window is None else (window[0] / 2, window[1] / 2))
        m = pooled.field.copy()
    else:
        offset = np.zeros(2) if window is None else np.asarray((window[0] / 2, window[1] / 2))
        m = _to_numpy(pooled).copy()
    n = params.n
    if n == 0:
        return FixationSet(np.zeros((0, 2)), np.zeros((0, 2), dtype=np.int64), [m.copy()] if record else [])
    seed = params.seed if rng is None else rng
    u = _uniforms(seed, n)
    table = kernels.suppression_table(m.shape, params.nms_sigma, params.nms_strength, params.squared_kernel)
    maps = m[None].copy()
    if not record:
        maps, cells, flags = kernels.nms_sample(maps, u[None], params.temperature, params.nms_sigma,
                                                params.nms_strength, params.squared_kernel,
                                                backend=backend, table=table)
        cells, fallback, snaps = cells[0], bool(flags[0]), []
    else:
        snaps = [maps[0].copy()]
        steps, fallback = [], False
        for k in range(n):
            maps, c, f = kernels.nms_sample(maps, u[None, k : k + 1], params.temperature, params.nms_sigma,
                                            params.nms_strength, params.squared_kernel,
                                            backend=backend, table=table)
            steps.append(c[0, 0])
            fallback |= bool(f[0])
            snaps.append(maps[0].copy())
        cells = np.stack(steps)
    points = cells.astype(np.float64) + offset
    return FixationSet(points, cells, snaps, fallback)


def sample_fixations_batch(
    pooled: np.ndarray,
    params: SamplerParams,
    window: tuple[int, int],
    seeds: Sequence,
    backend: str | None = None,
    num_threads: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`sample_fixations`: ``(B, h, w)`` maps, one seed per map.

    Returns ``(points (B, N, 2), fallback (B,))``.
    """
    pooled = np.array(pooled, dtype=np.float64, copy=True)
    b = pooled.shape[0]
    if len(seeds) != b:
        raise ValueError("one seed per map required")
    n = params.n
    u = np.stack([_uniforms(s, n) for s in seeds]) if b else np.zeros((0, n))
    _, cells, flags = kernels.nms_sample(pooled, u, params.temperature, params.nms_sigma,
                                         params.nms_strength, params.squared_kernel,
                                         backend=backend, num_threads=num_threads)
    points = cells.astype(np.float64) + np.asarray((window[0] / 2, window[1] / 2))
    return points, flags


def random_fixations(pooled_shape: tuple[int, int], n: int, window: tuple[int, int], seeds: Sequence) -> np.ndarray:
    """Uniformly random valid window centres, ``(B, n, 2)``."""
    h, w = pooled_shape
    out = np.zeros((len(seeds), n, 2))
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        out[i, :, 0] = rng.integers(0, h, n)
        out[i, :, 1] = rng.integers(0, w, n)
    return out + np.asarray((window[0] / 2, window[1] / 2))


def _check_window(centers: np.ndarray, source: tuple[int, int], window: tuple[int, int]):
    half = np.asarray(window, dtype=np.float64) / 2
    size = np.asarray(source, dtype=np.float64)
    lo = centers - half
    hi = centers + half
    if (lo < -1e-9).any() or (hi > size + 1e-9).any():
        raise ValueError("fixation window reaches outside the image")


def extract_patches(x: torch.Tensor, centers, window: tuple[int, int]) -> torch.Tensor:
    """Bilinear crops of size ``window`` centred at ``centers``.

    ``x`` is ``(B, C, H, W)``; ``centers`` ``(B, N, 2)`` holds (row, col) in
    pixel-edge coordinates (pixel ``k`` spans ``[k, k+1)``).  Returns
    ``(B, N, C, H', W')``.  At integer-aligned centres the crop equals index
    slicing exactly.  Differentiable in ``x``.
    """
    c = np.asarray(centers.detach().cpu() if isinstance(centers, torch.Tensor) else centers, dtype=np.float64)
    B, C, H, W = x.shape
    if c.ndim != 3 or c.shape[0] != B or c.shape[2] != 2:
        raise ValueError(f"centers must be (B, N, 2) with B={B}, got {c.shape}")
    wh, ww = window
    _check_window(c.reshape(-1, 2), (H, W), window)
    N = c.shape[1]
    if N == 0:
        return x.new_zeros((B, 0, C, wh, ww))

    def axis(coords, size, length):
        # sample positions in index space: centre - half + i
        pos = coords[..., None] - length / 2.0 + np.arange(length)
        pos = np.clip(pos, 0.0, size - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, size - 1)
        frac = pos - lo
        return torch.from_numpy(lo), torch.from_numpy(hi), torch.from_numpy(frac).to(x.dtype)

    r_lo, r_hi, r_t = axis(c[..., 0], H, wh)  # (B, N, wh)
    c_lo, c_hi, c_t = axis(c[..., 1], W, ww)  # (B, N, ww)

    def take_rows(idx):
        g = idx.reshape(B, 1, N * wh, 1).expand(B, C, N * wh, W)
        return torch.gather(x, 2, g).reshape(B, C, N, wh, W)

    top, bottom = take_rows(r_lo), take_rows(r_hi)
    rows = top + (bottom - top) * r_t.reshape(B, 1, N, wh, 1)

    def take_cols(idx):
        g = idx.reshape(B, 1, N, 1, ww).expand(B, C, N, wh, ww)
        return torch.gather(rows, 4, g)

    left, right = take_cols(c_lo), take_cols(c_hi)
    out = left + (right - left) * c_t.reshape(B, 1, N, 1, ww)
    return out.permute(0, 2, 1, 3, 4)


def extract_patch(x: torch.Tensor, center: Sequence[float], window: tuple[int, int]) -> torch.Tensor:
    """Single-image :func:`extract_patches`: ``(C, H, W)`` in, ``(C, H', W')`` out."""
    return extract_patches(x[None], np.asarray(center, dtype=np.float64).reshape(1, 1, 2), window)[0, 0]


def affine_theta(center: Sequence[float], window: tuple[int, int], source: tuple[int, int], printed: bool = False) -> torch.Tensor:
    """2x3 ``affine_grid`` matrix for a window centred at ``center``.

    Rows follow torch's (x=col, y=row) convention.  The default scale
    ``W'/W`` crops exactly the ``H' x W'`` window; ``printed=True`` uses the
    ``1 + W'/W`` diagonal instead, which samples a region larger than the
    image (zero padded).
    """
    (r, c), (wh, ww), (H, W) = center, window, source
    sy, sx = wh / H, ww / W
    if printed:
        sy, sx = 1 + sy, 1 + sx
    return torch.tensor([[sx, 0.0, 2.0 * c / W - 1.0], [0.0, sy, 2.0 * r / H - 1.0]], dtype=torch.float64)


def extract_patch_affine(x: torch.Tensor, theta: torch.Tensor, window: tuple[int, int]) -> torch.Tensor:
    """Reference crop through ``affine_grid``/``grid_sample`` (``(C, H, W)`` in)."""
    xx = x[None].to(theta.dtype)
    grid = F.affine_grid(theta[None], [1, x.shape[0], *window], align_corners=False)
    return F.grid_sample(xx, grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]


def render_priority_progression(snapshots: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Unit-mass copies of the per-step suppressed maps."""
    return [_unit_mass(np.asarray(s, dtype=np.float64)) for s in snapshots]
