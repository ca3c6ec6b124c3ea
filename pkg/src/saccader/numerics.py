"""Dense grid primitives shared by every other module.

All trainable maths runs on :class:`torch.Tensor`; reverse-mode gradients come
from torch autograd.  Everything here is checked against
:func:`finite_difference_check`, which is written independently of autograd
(plain central differences in float64).

GELU is the exact ``x * Phi(x)`` form with the error function, not the tanh
approximation.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

LAYER_NORM_EPS = 1e-5


def _as_axes(axes: int | Iterable[int], ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted({a % ndim for a in axes}))
    if not axes:
        raise ValueError("softmax needs at least one axis")
    return axes


def softmax_over(t: torch.Tensor, axes: int | Iterable[int] = -1, temperature: float = 1.0) -> torch.Tensor:
    """Softmax jointly over ``axes`` with max-subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    axes = _as_axes(axes, t.dim())
    logits = t / temperature
    logits = logits - logits.amax(dim=axes, keepdim=True).detach()
    e = torch.exp(logits)
    return e / e.sum(dim=axes, keepdim=True)


def gelu(t: torch.Tensor) -> torch.Tensor:
    # exact-erf variant
    return F.gelu(t)


def layer_norm(t: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    n = t.shape[-1]
    if scale.shape != (n,) or shift.shape != (n,):
        raise ValueError(
            f"scale/shift must have shape ({n},), got {tuple(scale.shape)} and {tuple(shift.shape)}"
        )
    return F.layer_norm(t, (n,), scale, shift, eps=LAYER_NORM_EPS)


def _lerp_axis(t: torch.Tensor, out: int, dim: int) -> torch.Tensor:
    n = t.shape[dim]
    if n == out:
        return t
    # align_corners=False source positions, clamped at the low edge like torch
    src = (torch.arange(out, dtype=torch.float64) + 0.5) * (n / out) - 0.5
    src = src.clamp(min=0.0, max=n - 1)
    lo = src.floor().long()
    hi = (lo + 1).clamp(max=n - 1)
    frac = (src - lo.to(torch.float64)).to(t.dtype)
    a = t.index_select(dim, lo)
    b = t.index_select(dim, hi)
    shape = [1] * t.dim()
    shape[dim] = out
    # a + (b - a) * w keeps constant fields exact
    return a + (b - a) * frac.view(shape)


def bilinear_resize(t: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resampling of the trailing two axes (align_corners=False).

    Matches ``F.interpolate(mode="bilinear", align_corners=False)`` without
    antialiasing, but interpolates in ``a + (b - a) * w`` form so constant
    fields stay bit-exact.
    """
    if t.dim() < 2 or t.shape[-1] == 0 or t.shape[-2] == 0:
        raise ValueError(f"cannot resize a zero-sized field of shape {tuple(t.shape)}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    t = _lerp_axis(t, out_h, t.dim() - 2)
    return _lerp_axis(t, out_w, t.dim() - 1)


def avg_pool_stride1(t: torch.Tensor, kh: int, kw: int) -> torch.Tensor:
    """Mean over every ``kh x kw`` window of the trailing two axes."""
    h, w = t.shape[-2:]
    if kh < 1 or kw < 1 or kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} does not fit a {h}x{w} field")
    lead = t.shape[:-2]
    flat = t.reshape(-1, 1, h, w)
    out = F.avg_pool2d(flat, (kh, kw), stride=1)
    # window means cannot leave the input range; clamp away rounding
    lo = flat.amin(dim=(-2, -1), keepdim=True)
    hi = flat.amax(dim=(-2, -1), keepdim=True)
    out = torch.minimum(torch.maximum(out, lo), hi)
    return out.reshape(*lead, h - kh + 1, w - kw + 1)


def gaussian_field(
    center: Sequence[float] | torch.Tensor,
    shape: tuple[int, int],
    sigma: float,
    squared: bool = False,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """Gaussian bump over an ``H x W`` grid of cell indices.

    ``squared=False`` gives ``exp(-d / (2 sigma^2))`` with ``d`` the Euclidean
    distance (the suppression kernel as the sampler uses it by default);
    ``squared=True`` gives the usual ``exp(-d^2 / (2 sigma^2))``.

    ``center`` may be a ``(..., 2)`` tensor of (row, col) pairs, in which case
    the result has shape ``(..., H, W)``.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    c = torch.as_tensor(center, dtype=dtype)
    h, w = shape
    rows = torch.arange(h, dtype=dtype)
    cols = torch.arange(w, dtype=dtype)
    dr = rows.view(*([1] * (c.dim() - 1)), h, 1) - c[..., 0, None, None]
    dc = cols.view(*([1] * (c.dim() - 1)), 1, w) - c[..., 1, None, None]
    d2 = dr * dr + dc * dc
    d = d2 if squared else torch.sqrt(d2)
    return torch.exp(-d / (2.0 * sigma * sigma))


def stop_gradient(t: torch.Tensor) -> torch.Tensor:
    return t.detach()


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t


def _relative_gap(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    err = (analytic - numeric).abs() / (analytic.abs() + 1e-8)
    return float(err.max()) if err.numel() else 0.0


def _central_differences(evaluate: Callable[[], torch.Tensor], x: torch.Tensor, h: float) -> torch.Tensor:
    # perturbs ``x`` in place, one coordinate at a time
    numeric = torch.zeros_like(x)
    flat = x.view(-1)
    num_flat = numeric.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(evaluate())
            flat[i] = orig - h
            fm = float(evaluate())
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * h)
    return numeric


def finite_difference_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    h: float = 1e-6,
) -> float:
    """Largest relative gap between autograd and central differences.

    Returns ``max |g_analytic - g_numeric| / (|g_analytic| + 1e-8)`` over all
    coordinates of ``x``.  ``f`` must map ``x`` to a scalar.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    x = x.detach().to(torch.float64).clone()
    xa = x.clone().requires_grad_(True)
    out = f(xa)
    if out.numel() != 1:
        raise ValueError(f"f must return a scalar, got shape {tuple(out.shape)}")
    analytic = None
    if out.requires_grad:
        (analytic,) = torch.autograd.grad(out.reshape(()), xa, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    numeric = _central_differences(lambda: f(x), x, h)
    return _relative_gap(analytic, numeric)


def module_gradient_check(
    module: torch.nn.Module,
    loss: Callable[[], torch.Tensor],
    h: float = 1e-6,
    names: Iterable[str] | None = None,
) -> dict[str, float]:
    """Finite-difference check of every (or the named) parameter of ``module``.

    ``loss()`` evaluates a scalar through ``module``.  The module should be in
    float64.  Returns the worst relative error per parameter name.
    """
    params = dict(module.named_parameters())
    wanted = list(params) if names is None else list(names)
    module.zero_grad(set_to_none=True)
    out = loss()
    if out.numel() != 1:
        raise ValueError("loss must be a scalar")
    grads = torch.autograd.grad(out.reshape(()), [params[n] for n in wanted], allow_unused=True)
    report = {}
    for name, g in zip(wanted, grads):
        p = params[name]
        analytic = torch.zeros_like(p) if g is None else g.detach()
        numeric = _central_differences(loss, p.data, h)
        report[name] = _relative_gap(analytic, numeric)
    return report
