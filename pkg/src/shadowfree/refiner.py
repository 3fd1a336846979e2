"""Encoder-decoder refiner built from fast-Fourier attention transformer blocks.

Attention per head, with Q, K, V flattened to (ch, S), S = H*W:

    FQ, FK = DFT_S(Q), DFT_S(K)                   unitary DFT along the spatial axis
    A_F    = FQ @ FK.T / tau                      (ch, ch), plain transpose
    A      = LN(Re(IDFT_rows(A_F)))               inverse DFT along each row, LN over the map
    F_A    = A @ V

The ``elementwise`` variant instead multiplies spectra per frequency
(A_F = FQ * FK / tau, shape (ch, S)), takes the inverse DFT along S and gates V
elementwise.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .removal import LayerNorm2d, PixelShuffleUp, check_channels, init_weights

TAU_MIN = 1e-3

# Test hook: flipping this to +1 corrupts the naive DFT so the FFT oracle must fail.
# exponent sign of the naive forward kernel; the inverse kernel is fixed at +1 so that
# flipping this (a test hook) is observable rather than a harmless global conjugation
_NAIVE_DFT_SIGN = -1.0


def naive_dft(x: torch.Tensor, inverse: bool = False) -> torch.Tensor:
    """Unitary DFT along the last axis by direct O(n^2) summation."""
    n = x.shape[-1]
    real_dtype = torch.float64 if x.dtype in (torch.float64, torch.complex128) else torch.float32
    idx = torch.arange(n, dtype=real_dtype)
    sign = 1.0 if inverse else _NAIVE_DFT_SIGN
    angle = sign * 2 * math.pi * torch.outer(idx, idx) / n
    kernel = torch.polar(torch.full_like(angle, 1 / math.sqrt(n)), angle)
    if not x.is_complex():
        x = x.to(kernel.dtype)
    # out[..., k] = sum_s x[..., s] * kernel[s, k]
    return x @ kernel


def dft(x: torch.Tensor, inverse: bool = False, mode: str = "fast") -> torch.Tensor:
    if mode == "naive":
        return naive_dft(x, inverse)
    if mode != "fast":
        raise ValueError(f"unknown DFT mode {mode!r}")
    return torch.fft.ifft(x, dim=-1, norm="ortho") if inverse else torch.fft.fft(x, dim=-1, norm="ortho")


def map_norm(a: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Layer norm over the last two axes with an explicit affine."""
    mu = a.mean(dim=(-2, -1), keepdim=True)
    var = (a - mu).pow(2).mean(dim=(-2, -1), keepdim=True)
    return (a - mu) / torch.sqrt(var + eps) * weight + bias


class QKVProjection(nn.Module):
    """Independent bias-free pointwise 1x1 then depthwise 3x3 convs for Q, K and V."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.pointwise = nn.Conv2d(channels, 3 * channels, 1, bias=False)
        self.depthwise = nn.Conv2d(3 * channels, 3 * channels, 3, padding=1, groups=3 * channels, bias=False)

    def forward(self, x):
        check_channels(x, self.channels, "QKVProjection")
        return self.depthwise(self.pointwise(x)).chunk(3, dim=1)


class FourierAttention(nn.Module):
    def __init__(self, channels: int, heads: int = 1, variant: str = "matrix"):
        super().__init__()
        if channels % heads:
            raise ValueError(f"FourierAttention: {heads} heads do not divide {channels} channels")
        if variant not in ("matrix", "elementwise"):
            raise ValueError(f"unknown attention variant {variant!r}")
        self.heads, self.variant = heads, variant
        ch = channels // heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        shape = (ch, ch) if variant == "matrix" else (ch, 1)
        self.norm_weight = nn.Parameter(torch.ones(shape))
        self.norm_bias = nn.Parameter(torch.zeros(shape))
        self.mode = "fast"

    def correlation(self, q, k, mode=None):
        """Frequency correlation A_F for (N, heads, ch, S) query/key tensors."""
        mode = mode or self.mode
        if (self.temperature <= 0).any():
            raise ValueError("FourierAttention: temperature must be positive")
        tau = self.temperature.clamp(min=TAU_MIN)
        fq, fk = dft(q, mode=mode), dft(k, mode=mode)
        if self.variant == "matrix":
            return fq @ fk.transpose(-2, -1) / tau
        return fq * fk / tau

    def forward(self, q, k, v, mode=None):
        mode = mode or self.mode
        if not (q.shape == k.shape == v.shape):
            raise ValueError("FourierAttention: Q, K, V shapes differ")
        n, c, h, w = q.shape
        if c % self.heads:
            raise ValueError(f"FourierAttention: {self.heads} heads do not divide {c} channels")
        q, k, v = (t.reshape(n, self.heads, c // self.heads, h * w) for t in (q, k, v))
        a_f = self.correlation(q, k, mode)
        a = map_norm(dft(a_f, inverse=True, mode=mode).real, self.norm_weight, self.norm_bias)
        out = a @ v if self.variant == "matrix" else a * v
        return out.reshape(n, c, h, w)


class GatedFeedForward(nn.Module):
    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        hidden = expansion * channels
        self.norm = LayerNorm2d(channels)
        self.expand = nn.Conv2d(channels, 2 * hidden, 1)
        self.contract = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        a, b = self.expand(self.norm(x)).chunk(2, dim=1)
        return self.contract(F.gelu(a) * b)


class FFATBlock(nn.Module):
    """F + Conv1x1(FourierAttention(Q, K, V)), then a gated feed-forward residual."""

    def __init__(self, channels: int, heads: int = 1, variant: str = "matrix"):
        super().__init__()
        self.channels = channels
        self.qkv = QKVProjection(channels)
        self.attn = FourierAttention(channels, heads, variant)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.ffn = GatedFeedForward(channels)

    def zero_init_(self):
        for conv in (self.proj, self.ffn.contract):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        check_channels(x, self.channels, "FFATBlock")
        x = x + self.proj(self.attn(*self.qkv(x)))
        return x + self.ffn(x)


class Refiner(nn.Module):
    """U-shaped FFAT network predicting a clamped additive correction to its input image."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c, levels = config.refiner_channels, config.refiner_levels
        nb, heads, variant = config.refiner_blocks, config.ffa_heads, config.ffa_variant
        widths = [c * 2 ** i for i in range(levels)]
        self.levels = levels

        def stack(width):
            return nn.Sequential(*[FFATBlock(width, heads, variant) for _ in range(nb)])

        self.embed = nn.Conv2d(3, c, 3, padding=1)
        self.enc = nn.ModuleList(stack(w) for w in widths)
        self.down = nn.ModuleList(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
                                  for i in range(levels - 1))
        self.up = nn.ModuleList(PixelShuffleUp(widths[i + 1], widths[i]) for i in reversed(range(levels - 1)))
        self.reduce = nn.ModuleList(nn.Conv2d(2 * widths[i], widths[i], 1) for i in reversed(range(levels - 1)))
        self.dec = nn.ModuleList(stack(widths[i]) for i in reversed(range(levels - 1)))
        self.head = nn.Conv2d(c, 3, 3, padding=1)
        init_weights(self)
        if config.refiner_zero_init:
            # a zero head alone already makes the refiner the identity; the blocks keep
            # their random init so they receive gradient from the first stage-2 step
            self.zero_head_()

    def zero_head_(self):
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def zero_init_(self):
        """Zero every output projection so the refiner is the identity on [0, 1] images."""
        for m in self.modules():
            if isinstance(m, FFATBlock):
                m.zero_init_()
        self.zero_head_()

    def set_mode(self, mode: str):
        for m in self.modules():
            if isinstance(m, FourierAttention):
                m.mode = mode

    def forward(self, y):
        check_channels(y, 3, "Refiner")
        m = 2 ** (self.levels - 1)
        if y.shape[-2] % m or y.shape[-1] % m:
            raise ValueError(f"Refiner: spatial size {tuple(y.shape[-2:])} not divisible by {m}")
        x = self.embed(y)
        skips = []
        for i, enc in enumerate(self.enc):
            x = enc(x)
            if i < self.levels - 1:
                skips.append(x)
                x = self.down[i](x)
        for up, reduce, dec, skip in zip(self.up, self.reduce, self.dec, reversed(skips)):
            x = dec(reduce(torch.cat([up(x), skip], dim=1)))
        return torch.clamp(y + self.head(x), 0.0, 1.0)
