"""Pure-numpy fallback for the compiled kernels in ``_core.pyx``.

Arithmetic follows the compiled loops step for step, so both backends pick
the same fixations and leave bit-identical maps for the same uniforms.
"""
from __future__ import annotations

import numpy as np


def _ipow(x: np.ndarray, e: int) -> np.ndarray:
    result = np.ones_like(x)
    while e:
        if e & 1:
            result = result * x
        x = x * x
        e >>= 1
    return result


def _draw(m: np.ndarray, u: float, inv_tau: float, int_power: int) -> tuple[int, bool]:
    n = m.size
    pmax = m.max()
    if not (pmax > 0.0) or not np.isfinite(pmax):
        return min(int(u * n), n - 1), True
    ratio = np.maximum(m, 0.0) / pmax
    w = _ipow(ratio, int_power) if int_power > 0 else np.power(ratio, inv_tau)
    w[m <= 0.0] = 0.0
    cs = np.cumsum(w)
    idx = int(np.searchsorted(cs, u * cs[-1], side="right"))
    return min(idx, n - 1), False


def nms_sample(maps, uniforms, inv_tau, int_power, table, num_threads=1):
    """Sequential draw-and-suppress over a batch of maps (modified in place).

    Returns ``(indices (B, N, 2) int64, fallback (B,) bool)``.
    """
    B, H, W = maps.shape
    if uniforms.shape[0] != B:
        raise ValueError("one row of uniforms per map required")
    if table.shape[0] < H or table.shape[1] < W:
        raise ValueError("suppression table smaller than the map")
    N = uniforms.shape[1]
    out = np.zeros((B, N, 2), dtype=np.int64)
    flags = np.zeros(B, dtype=bool)
    rows = np.arange(H)
    cols = np.arange(W)
    for b in range(B):
        m = maps[b].reshape(-1)
        for k in range(N):
            idx, fb = _draw(m, float(uniforms[b, k]), inv_tau, int_power)
            flags[b] |= fb
            r, c = divmod(idx, W)
            out[b, k] = (r, c)
            maps[b] *= table[np.abs(rows - r)][:, np.abs(cols - c)]
    return out, flags


def box_mean(src, kh, kw):
    """Stride-one ``kh x kw`` window means via a summed-area table."""
    B, H, W = src.shape
    if kh < 1 or kw < 1 or kh > H or kw > W:
        raise ValueError(f"kernel {kh}x{kw} does not fit a {H}x{W} field")
    sat = np.zeros((B, H + 1, W + 1), dtype=np.float64)
    sat[:, 1:, 1:] = np.cumsum(np.cumsum(src, axis=2), axis=1)
    out = (sat[:, kh:, kw:] - sat[:, :-kh, kw:] - sat[:, kh:, :-kw] + sat[:, :-kh, :-kw]) / float(kh * kw)
    lo = src.min(axis=(1, 2), keepdims=True)
    hi = src.max(axis=(1, 2), keepdims=True)
    return np.minimum(np.maximum(out, lo), hi)
