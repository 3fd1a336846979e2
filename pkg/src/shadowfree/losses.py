"""Composite restoration loss: L1 + alpha*(1 - MS-SSIM) + beta*perceptual + gamma*adversarial."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
WINDOW = 11
SIGMA = 1.5


def _check_pair(pred, target, who):
    if pred.shape != target.shape:
        raise ValueError(f"{who}: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")


def l1_loss(pred, target):
    _check_pair(pred, target, "l1_loss")
    return (pred - target).abs().mean()


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    return (g / g.sum()).to(dtype)


def _filter(x, g):
    c = x.shape[1]
    x = F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)


def ssim_components(x, y):
    """Per-pixel (luminance * cs, cs) maps over valid windows, per channel."""
    if min(x.shape[-2:]) < WINDOW:
        raise ValueError(f"SSIM needs images of at least {WINDOW}x{WINDOW}, got {tuple(x.shape[-2:])}")
    g = gaussian_window(dtype=x.dtype).to(x.device)
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    cs = (2 * sxy + SSIM_C2) / (sxx + syy + SSIM_C2)
    lum = (2 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1)
    return lum * cs, cs


def ms_ssim_scales(height: int, width: int, max_scales: int = 5) -> int:
    side = min(height, width)
    if side < WINDOW:
        raise ValueError(f"MS-SSIM needs images of at least {WINDOW}x{WINDOW}, got {height}x{width}")
    n = 1
    while n < max_scales and side >= 2 ** n * WINDOW:
        n += 1
    return n


def ms_ssim(x, y, max_scales: int = 5):
    """Multi-scale SSIM, averaged over batch; exponents renormalized when fewer scales fit."""
    _check_pair(x, y, "ms_ssim")
    n = ms_ssim_scales(*x.shape[-2:], max_scales=max_scales)
    w = torch.tensor(MS_SSIM_WEIGHTS[:n], dtype=x.dtype, device=x.device)
    w = w / w.sum()
    factors = []
    for i in range(n):
        s, cs = ssim_components(x, y)
        if i == n - 1:
            factors.append(s.mean(dim=(1, 2, 3)))
        else:
            factors.append(cs.mean(dim=(1, 2, 3)))
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    vals = torch.stack(factors, dim=0).clamp(min=1e-8)
    return torch.prod(vals ** w[:, None], dim=0).mean()


def ms_ssim_loss(pred, target):
    return 1.0 - ms_ssim(pred, target)


# --- perceptual ---------------------------------------------------------------

class RandomConvExtractor(nn.Module):
    """Frozen 5-stage strided conv stack, seed-0 initialized; taps after every stage."""

    def __init__(self, widths=(16, 32, 64, 64, 64), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * cin)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.stages = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x) -> List[torch.Tensor]:
        taps = []
        for conv in self.stages:
            x = F.relu(conv(x))
            taps.append(x)
        return taps


VGG16_TAPS = {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22, "relu5_3": 29}


class VGG16Extractor(nn.Module):
    """VGG-16 feature taps loaded from a local ``features.*`` state-dict archive."""

    def __init__(self, weights_path, taps=tuple(VGG16_TAPS)):
        super().__init__()
        from torchvision.models import vgg16

        self.features = vgg16(weights=None).features
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        state = {k.removeprefix("features."): v for k, v in state.items() if not k.startswith("classifier")}
        self.features.load_state_dict(state)
        self.taps = list(taps)
        self.tap_index = {VGG16_TAPS[t]: t for t in self.taps}
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x) -> List[torch.Tensor]:
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out, last = [], max(self.tap_index)
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.tap_index:
                out.append(x)
            if i == last:
                break
        return out


def perceptual_loss(pred, target, extractor: nn.Module):
    _check_pair(pred, target, "perceptual_loss")
    fp, ft = extractor(pred), extractor(target)
    if not fp:
        raise ValueError("perceptual_loss: extractor returned no feature maps")
    return torch.stack([(a - b).abs().mean() for a, b in zip(fp, ft)]).mean()


# --- adversarial ----------------------------------------------------------------

class PatchDiscriminator(nn.Module):
    """Four stride-2 4x4 convs and a 3x3 logit head; one logit per image patch."""

    MIN_SIZE = 32

    def __init__(self, channels: int = 32):
        super().__init__()
        widths = [channels, 2 * channels, 4 * channels, 8 * channels]
        layers, cin = [], 3
        for i, cout in enumerate(widths):
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(cout, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"PatchDiscriminator: expected RGB input, got {tuple(x.shape)}")
        if min(x.shape[-2:]) < self.MIN_SIZE:
            raise ValueError(f"PatchDiscriminator: image smaller than {self.MIN_SIZE}x{self.MIN_SIZE}")
        return self.net(x)


def _bce(logits, value: float):
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, value))


def generator_adv_loss(pred, disc: nn.Module):
    """BCE(D(pred), 1) with gradients reaching ``pred`` only, never D's parameters."""
    flags = [p.requires_grad for p in disc.parameters()]
    disc.requires_grad_(False)
    try:
        return _bce(disc(pred), 1.0)
    finally:
        for p, f in zip(disc.parameters(), flags):
            p.requires_grad_(f)


def discriminator_loss(pred, real, disc: nn.Module):
    return _bce(disc(real), 1.0) + _bce(disc(pred.detach()), 0.0)


def adversarial_losses(pred, real, disc: nn.Module):
    """Non-saturating GAN objective; returns (g_loss, d_loss)."""
    _check_pair(pred, real, "adversarial_losses")
    return generator_adv_loss(pred, disc), discriminator_loss(pred, real, disc)


# --- combination ------------------------------------------------------------------

@dataclass
class LossBreakdown:
    l1: torch.Tensor
    ssim_term: torch.Tensor
    percep: torch.Tensor
    adv: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("l1", "ssim_term", "percep", "adv", "total")}


def combine(l1, ssim_term, percep, adv, weights: LossWeights, stage: int = 1) -> LossBreakdown:
    if stage == 2:
        adv = torch.zeros_like(torch.as_tensor(l1))
    total = l1 + weights.alpha * ssim_term + weights.beta * percep
    if stage == 1:
        total = total + weights.gamma * adv
    return LossBreakdown(l1, ssim_term, percep, adv, total)


def total_loss(pred, target, weights: LossWeights, stage: int, extractor: nn.Module,
               disc: Optional[nn.Module] = None) -> LossBreakdown:
    """Stage 1 uses all four terms; stage 2 drops the adversarial term and never calls D."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    l1 = l1_loss(pred, target)
    ssim_term = ms_ssim_loss(pred, target)
    percep = perceptual_loss(pred, target, extractor)
    if stage == 1:
        if disc is None:
            raise ValueError("total_loss: stage 1 needs a discriminator")
        adv = generator_adv_loss(pred, disc)
    else:
        adv = None
    return combine(l1, ssim_term, percep, adv, weights, stage)
