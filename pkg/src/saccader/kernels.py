"""Backend selection for the sampling kernels.

The compiled ``_core`` extension is used when it imports; otherwise the
numpy twin in ``_kernels_py`` takes over.  ``SACC_PURE_PYTHON=1`` forces the
fallback.  Both produce bit-identical results for the same inputs.
"""
from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("SACC_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _core as _compiled
except ImportError:  # pragma: no cover - depends on the build
    _compiled = None

BACKENDS: dict[str, ModuleType] = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"


def get_backend(name: str | None = None) -> ModuleType:
    name = name or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("SACC_THREADS", "0")) or os.cpu_count() or 1)
    except ValueError:
        return 1


def suppression_table(shape: tuple[int, int], sigma: float, strength: float, squared: bool = False) -> np.ndarray:
    """Factor ``1 - strength * K`` indexed by absolute (row, col) offset."""
    h, w = shape
    dr = np.arange(h, dtype=np.float64)[:, None]
    dc = np.arange(w, dtype=np.float64)[None, :]
    d = dr * dr + dc * dc
    if not squared:
        d = np.sqrt(d)
    return np.ascontiguousarray(1.0 - strength * np.exp(-d / (2.0 * sigma * sigma)))


def integer_power(inv_tau: float) -> int:
    """``1/tau`` as an int when it is one (up to 64), else 0."""
    r = round(inv_tau)
    return int(r) if r == inv_tau and 0 < r <= 64 else 0


def nms_sample(maps, uniforms, tau, sigma, strength, squared=False, backend=None, num_threads=None, table=None):
    """Draw ``uniforms.shape[1]`` fixations per map with Gaussian suppression.

    ``maps`` (B, H, W) float64 is modified in place.
    """
    maps = np.ascontiguousarray(maps, dtype=np.float64)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    if table is None:
        table = suppression_table(maps.shape[1:], sigma, strength, squared)
    inv_tau = 1.0 / tau
    impl = get_backend(backend)
    idx, flags = impl.nms_sample(maps, uniforms, inv_tau, integer_power(inv_tau), table,
                                 num_threads or thread_count())
    return maps, idx, flags


def box_mean(src, kh, kw, backend=None):
    src = np.ascontiguousarray(src, dtype=np.float64)
    return get_backend(backend).box_mean(src, kh, kw)
