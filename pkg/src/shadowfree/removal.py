"""Shadow removal network: ConvNext U-Net plus a Haar-DWT / fast-Fourier-convolution branch."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, ModelConfig


def init_weights(module: nn.Module) -> None:
    """Truncated-normal(0.02) conv weights, zero biases, unit/zero norm affines."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, LayerNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def check_channels(x: torch.Tensor, expected: int, who: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ValueError(f"{who}: expected {expected} input channels, got shape {tuple(x.shape)}")


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ConvNextBlock(nn.Module):
    """x + pw2(GELU(pw1(LN(dw7(x)))))"""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.dw7 = nn.Conv2d(channels, channels, 7, padding=3, groups=channels)
        self.norm = LayerNorm2d(channels)
        self.pw1 = nn.Conv2d(channels, 4 * channels, 1)
        self.act = nn.GELU()
        self.pw2 = nn.Conv2d(4 * channels, channels, 1)

    def forward(self, x):
        check_channels(x, self.channels, "ConvNextBlock")
        return x + self.pw2(self.act(self.pw1(self.norm(self.dw7(x)))))


class AttentionBlock(nn.Module):
    """Channel attention gate followed by a pixel attention gate."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.ca = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1), nn.ReLU(),
            nn.Conv2d(hidden, channels, 1), nn.Sigmoid(),
        )
        self.pa = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.ReLU(),
            nn.Conv2d(hidden, 1, 1), nn.Sigmoid(),
        )

    def forward(self, x):
        x = x * self.ca(x)
        return x * self.pa(x)


class Downsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm = LayerNorm2d(cin)
        self.conv = nn.Conv2d(cin, cout, 2, stride=2)

    def forward(self, x):
        return self.conv(self.norm(x))


class PixelShuffleUp(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, 4 * cout, 1)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x):
        return self.shuffle(self.conv(x))


class ConvNextUNet(nn.Module):
    """Three stride-2 encoder stages of ConvNext blocks; pixel-shuffle + attention decoder."""

    def __init__(self, base_channels: int = 32, blocks_per_level=(2, 2, 2), in_channels: int = 3):
        super().__init__()
        c = base_channels
        widths = [c, 2 * c, 4 * c, 8 * c]
        self.in_channels = in_channels
        self.stem = nn.Conv2d(in_channels, c, 3, padding=1)
        self.down = nn.ModuleList(Downsample(widths[i], widths[i + 1]) for i in range(3))
        self.enc = nn.ModuleList(
            nn.Sequential(*[ConvNextBlock(widths[i + 1]) for _ in range(blocks_per_level[i])])
            for i in range(3)
        )
        self.bottleneck = AttentionBlock(widths[3])
        self.up = nn.ModuleList(PixelShuffleUp(widths[i + 1], widths[i]) for i in reversed(range(3)))
        self.dec = nn.ModuleList(AttentionBlock(widths[i]) for i in reversed(range(3)))

    def encode(self, x):
        feats = [self.stem(x)]
        for down, enc in zip(self.down, self.enc):
            feats.append(enc(down(feats[-1])))
        return feats

    def forward(self, x):
        check_channels(x, self.in_channels, "ConvNextUNet")
        if x.shape[-2] % 8 or x.shape[-1] % 8:
            raise ValueError(f"ConvNextUNet: spatial size {tuple(x.shape[-2:])} not divisible by 8")
        feats = self.encode(x)
        y = self.bottleneck(feats[3])
        for up, dec, skip in zip(self.up, self.dec, reversed(feats[:3])):
            y = dec(up(y) + skip)
        return y


class DwtSubbands(NamedTuple):
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor


def haar_dwt2(x: torch.Tensor) -> DwtSubbands:
    """Single-level orthonormal 2D Haar analysis."""
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"haar_dwt2: spatial size {tuple(x.shape[-2:])} must be even")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return DwtSubbands(
        (a + b + c + d) / 2,
        (a + b - c - d) / 2,  # vertical detail
        (a - b + c - d) / 2,  # horizontal detail
        (a - b - c + d) / 2,
    )


def haar_idwt2(s: DwtSubbands) -> torch.Tensor:
    ll, lh, hl, hh = s
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    n, ch, h, w = ll.shape
    out = ll.new_empty(n, ch, 2 * h, 2 * w)
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out


class FourierUnit(nn.Module):
    """rfft2 -> 1x1 conv over stacked real/imag channels -> activation -> irfft2."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, 2 * channels, 1)
        self.act = nn.GELU()

    def forward(self, x):
        n, c, h, w = x.shape
        spec = torch.fft.rfft2(x, norm="ortho")
        z = torch.cat([spec.real, spec.imag], dim=1)
        z = self.act(self.conv(z))
        spec = torch.complex(z[:, :c], z[:, c:])
        return torch.fft.irfft2(spec, s=(h, w), norm="ortho")


class FFCBlock(nn.Module):
    """Half the channels see a 3x3 conv, the other half a global spectral transform."""

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ValueError(f"FFCBlock: channel count must be even, got {channels}")
        self.channels = channels
        half = channels // 2
        self.local = nn.Conv2d(half, half, 3, padding=1)
        self.spectral = FourierUnit(half)
        self.fuse = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        check_channels(x, self.channels, "FFCBlock")
        xl, xg = x.chunk(2, dim=1)
        return x + self.fuse(torch.cat([self.local(xl), self.spectral(xg)], dim=1))


class DwtFFCBranch(nn.Module):
    """LL subband through FFC blocks, detail subbands through a 3x3 conv, merged at full size."""

    def __init__(self, channels: int = 32, n_ffc: int = 2):
        super().__init__()
        self.low_in = nn.Conv2d(3, channels, 3, padding=1)
        self.low = nn.Sequential(*[FFCBlock(channels) for _ in range(n_ffc)])
        self.high = nn.Conv2d(9, channels, 3, padding=1)
        self.low_up = PixelShuffleUp(channels, channels)
        self.high_up = PixelShuffleUp(channels, channels)
        self.merge = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x):
        s = haar_dwt2(x)
        low = self.low(self.low_in(s.ll))
        high = self.high(torch.cat([s.lh, s.hl, s.hh], dim=1))
        return self.merge(torch.cat([self.low_up(low), self.high_up(high)], dim=1))


class RemovalNet(nn.Module):
    """Enabled branches -> concatenated latents -> 3x3 conv, added to logit(x) -> sigmoid.

    The logit-space input residual makes the untrained net close to the identity,
    so the branches only learn the correction inside shadowed regions.
    """

    LOGIT_EPS = 1e-3

    def __init__(self, config: ModelConfig):
        super().__init__()
        if not (config.enable_unet_branch or config.enable_dwtffc_branch):
            raise ConfigError("RemovalNet: at least one branch must be enabled")
        c = config.base_channels
        self.unet = ConvNextUNet(c, config.blocks_per_level) if config.enable_unet_branch else None
        self.dwtffc = DwtFFCBranch(c) if config.enable_dwtffc_branch else None
        n_branches = (self.unet is not None) + (self.dwtffc is not None)
        self.fuse = nn.Conv2d(n_branches * c, 3, 3, padding=1)
        init_weights(self)

    def forward(self, x):
        check_channels(x, 3, "RemovalNet")
        if x.shape[-2] % 16 or x.shape[-1] % 16:
            raise ValueError(f"RemovalNet: spatial size {tuple(x.shape[-2:])} not divisible by 16")
        latents = []
        if self.unet is not None:
            latents.append(self.unet(x))
        if self.dwtffc is not None:
            latents.append(self.dwtffc(x))
        return torch.sigmoid(self.fuse(torch.cat(latents, dim=1)) + self.input_logit(x))

    def input_logit(self, x):
        return torch.logit(x.clamp(self.LOGIT_EPS, 1 - self.LOGIT_EPS))
