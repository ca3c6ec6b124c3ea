# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for fixation sampling; mirrors ``_kernels_py`` operation for operation."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport pow, isfinite

cnp.import_array()


cdef inline double _ipow(double x, long e) noexcept nogil:
    cdef double result = 1.0
    while e:
        if e & 1:
            result = result * x
        x = x * x
        e >>= 1
    return result


cdef double _max(double *m, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double pmax = 0.0
    for i in range(n):
        if m[i] > pmax:
            pmax = m[i]
    return pmax


cdef Py_ssize_t _draw(double *m, double *w, Py_ssize_t n, double pmax, double u, double inv_tau,
                      long int_power, bint *fallback) noexcept nogil:
    cdef Py_ssize_t i
    cdef double total = 0.0, v, target
    if not (pmax > 0.0) or not isfinite(pmax):
        fallback[0] = True
        i = <Py_ssize_t>(u * n)
        return i if i < n else n - 1
    if int_power > 0:
        for i in range(n):
            v = m[i]
            v = _ipow(v / pmax, int_power) if v > 0.0 else 0.0
            total = total + v
            w[i] = total
    else:
        for i in range(n):
            v = m[i]
            v = pow(v / pmax, inv_tau) if v > 0.0 else 0.0
            total = total + v
            w[i] = total
    target = u * total
    for i in range(n):
        if w[i] > target:
            return i
    return n - 1


cdef double _suppress(double *m, Py_ssize_t H, Py_ssize_t W, Py_ssize_t r, Py_ssize_t c,
                      double *table, Py_ssize_t tw) noexcept nogil:
    # returns the new maximum so the next draw needs no extra pass
    cdef Py_ssize_t i, j, a
    cdef double *row
    cdef double *trow
    cdef double pmax = 0.0, v
    for i in range(H):
        a = i - r if i >= r else r - i
        row = m + i * W
        trow = table + a * tw
        for j in range(c):
            v = row[j] * trow[c - j]
            row[j] = v
            if v > pmax:
                pmax = v
        for j in range(c, W):
            v = row[j] * trow[j - c]
            row[j] = v
            if v > pmax:
                pmax = v
    return pmax


def nms_sample(double[:, :, ::1] maps, double[:, ::1] uniforms, double inv_tau, long int_power,
               double[:, ::1] table, int num_threads=1):
    """Sequential draw-and-suppress over a batch of maps (modified in place).

    ``table[|dr|, |dc|]`` holds the multiplicative suppression factor for a
    cell at that offset from the draw.  ``int_power > 0`` selects exact
    repeated squaring for the temperature power.

    Returns ``(indices (B, N, 2) int64, fallback (B,) bool)``.
    """
    cdef Py_ssize_t B = maps.shape[0], H = maps.shape[1], W = maps.shape[2]
    cdef Py_ssize_t N = uniforms.shape[1]
    if uniforms.shape[0] != B:
        raise ValueError("one row of uniforms per map required")
    if table.shape[0] < H or table.shape[1] < W:
        raise ValueError("suppression table smaller than the map")
    out_arr = np.zeros((B, N, 2), dtype=np.int64)
    flags_arr = np.zeros(B, dtype=np.uint8)
    if B == 0 or N == 0:
        return out_arr, flags_arr.astype(bool)
    scratch_arr = np.empty((B, H * W), dtype=np.float64)
    cdef cnp.int64_t[:, :, ::1] out = out_arr
    cdef cnp.uint8_t[::1] flags = flags_arr
    cdef double[:, ::1] scratch = scratch_arr
    cdef Py_ssize_t b, k, idx, tw = table.shape[1]
    cdef double pmax
    cdef bint fb
    if num_threads < 1:
        num_threads = 1
    for b in prange(B, nogil=True, num_threads=num_threads, schedule="static"):
        fb = False
        pmax = _max(&maps[b, 0, 0], H * W)
        for k in range(N):
            idx = _draw(&maps[b, 0, 0], &scratch[b, 0], H * W, pmax, uniforms[b, k], inv_tau, int_power, &fb)
            out[b, k, 0] = idx // W
            out[b, k, 1] = idx % W
            pmax = _suppress(&maps[b, 0, 0], H, W, idx // W, idx % W, &table[0, 0], tw)
        if fb:
            flags[b] = 1
    return out_arr, flags_arr.astype(bool)


def box_mean(double[:, :, ::1] src, Py_ssize_t kh, Py_ssize_t kw):
    """Stride-one ``kh x kw`` window means via a summed-area table."""
    cdef Py_ssize_t B = src.shape[0], H = src.shape[1], W = src.shape[2]
    if kh < 1 or kw < 1 or kh > H or kw > W:
        raise ValueError(f"kernel {kh}x{kw} does not fit a {H}x{W} field")
    cdef Py_ssize_t oh = H - kh + 1, ow = W - kw + 1, b, i, j
    sat_arr = np.zeros((H + 1, W + 1), dtype=np.float64)
    out_arr = np.empty((B, oh, ow), dtype=np.float64)
    cdef double[:, ::1] sat = sat_arr
    cdef double[:, :, ::1] out = out_arr
    cdef double area = <double>(kh * kw), lo, hi, v
    for b in range(B):
        lo = src[b, 0, 0]
        hi = lo
        # row prefix sums, then column prefix sums (same order as numpy cumsum)
        for i in range(H):
            v = 0.0
            for j in range(W):
                if src[b, i, j] < lo:
                    lo = src[b, i, j]
                if src[b, i, j] > hi:
                    hi = src[b, i, j]
                v = v + src[b, i, j]
                sat[i + 1, j + 1] = v
        for i in range(1, H):
            for j in range(1, W + 1):
                sat[i + 1, j] = sat[i, j] + sat[i + 1, j]
        for i in range(oh):
            for j in range(ow):
                v = (sat[i + kh, j + kw] - sat[i, j + kw] - sat[i + kh, j] + sat[i, j]) / area
                if v < lo:
                    v = lo
                elif v > hi:
                    v = hi
                out[b, i, j] = v
    return out_arr
