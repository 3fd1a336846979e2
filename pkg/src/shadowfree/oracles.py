"""Slow reference computations used by the self-check suite and the tests.

Nothing here shares code with the fast paths it is checking.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

_MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _gauss2d(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def ssim_maps_bruteforce(x: np.ndarray, y: np.ndarray, c1=1e-4, c2=9e-4, size=11, sigma=1.5):
    """Per-window (ssim, cs) over valid positions of 2-D arrays, by explicit window sums."""
    w = _gauss2d(size, sigma)
    h, wd = x.shape
    oh, ow = h - size + 1, wd - size + 1
    s_map, cs_map = np.empty((oh, ow)), np.empty((oh, ow))
    for i in range(oh):
        for j in range(ow):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cov = (w * (px - mx) * (py - my)).sum()
            cs = (2 * cov + c2) / (vx + vy + c2)
            s_map[i, j] = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1) * cs
            cs_map[i, j] = cs
    return s_map, cs_map


def ssim_bruteforce(x: np.ndarray, y: np.ndarray) -> float:
    """Mean SSIM over channels of (C, H, W) arrays."""
    return float(np.mean([ssim_maps_bruteforce(a, b)[0].mean() for a, b in zip(x, y)]))


def _halve(a):
    h, w = (a.shape[-2] // 2) * 2, (a.shape[-1] // 2) * 2
    a = a[..., :h, :w]
    return 0.25 * (a[..., 0::2, 0::2] + a[..., 1::2, 0::2] + a[..., 0::2, 1::2] + a[..., 1::2, 1::2])


def ms_ssim_bruteforce(x: np.ndarray, y: np.ndarray, max_scales=5) -> float:
    """MS-SSIM of two (C, H, W) arrays with the scale-count fallback rule."""
    side = min(x.shape[-2:])
    n = 1
    while n < max_scales and side >= 2 ** n * 11:
        n += 1
    wts = np.array(_MS_WEIGHTS[:n]) / sum(_MS_WEIGHTS[:n])
    value = 1.0
    for s in range(n):
        maps = [ssim_maps_bruteforce(a, b) for a, b in zip(x, y)]
        if s == n - 1:
            factor = np.mean([m[0].mean() for m in maps])
        else:
            factor = np.mean([m[1].mean() for m in maps])
            x, y = _halve(x), _halve(y)
        value *= max(factor, 1e-8) ** wts[s]
    return float(value)


def finite_difference_grads(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                            eps: float = 1e-6) -> list:
    """Central differences of scalar ``fn(*inputs)`` w.r.t. every element of every input."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(fn(*inputs))
                flat[i] = orig - eps
                fm = float(fn(*inputs))
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * eps)
            grads.append(g)
    return grads


def gradient_rel_error(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                       eps: float = 1e-6, seed: int = 0) -> float:
    """Relative L2 error between autograd and central differences of <fn(inputs), r>.

    Tensor outputs are contracted with a fixed random probe ``r`` to get a scalar.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    with torch.no_grad():
        out = fn(*inputs)
    probe = None
    if out.dim() > 0:
        gen = torch.Generator().manual_seed(seed)
        probe = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    def scalar(*xs):
        o = fn(*xs)
        return (o * probe).sum() if probe is not None else o

    analytic = torch.autograd.grad(scalar(*inputs), inputs, allow_unused=True)
    analytic = [torch.zeros_like(x) if a is None else a for a, x in zip(analytic, inputs)]
    numeric = finite_difference_grads(scalar, inputs, eps)
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return float((a - n).norm() / n.norm().clamp(min=1e-12))
