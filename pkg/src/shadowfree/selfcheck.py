"""Numerical self-checks: transform oracles, gradient checks, identity inits, loss and LR arithmetic."""
from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import torch

from . import refiner as refiner_mod
from .config import ConfigError, ModelConfig, RunConfig
from .data import PairedSample, synth_pair
from .losses import RandomConvExtractor, combine, l1_loss, ms_ssim_loss, total_loss
from .oracles import gradient_rel_error, ms_ssim_bruteforce
from .refiner import FFATBlock, FourierAttention, Refiner, dft
from .removal import ConvNextBlock, ConvNextUNet, FFCBlock, RemovalNet, haar_dwt2, haar_idwt2
from .trainer import lr_at, train_stage1, train_stage2


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rand(*shape, seed=0, dtype=torch.float64):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def _heads_for(config: RunConfig, channels: int) -> int:
    h = config.model.ffa_heads
    return h if channels % h == 0 else 1


# --- individual checks; each returns (value, threshold) or raises --------------------

def ffa_fast_vs_naive(config: RunConfig):
    worst = 0.0
    for shape in ((1, 8, 8, 8), (2, 16, 8, 16)):
        for seed in range(20):
            torch.manual_seed(seed)
            attn = FourierAttention(shape[1], _heads_for(config, shape[1]), config.model.ffa_variant).double()
            with torch.no_grad():
                attn.temperature.uniform_(0.5, 2.0)
                attn.norm_weight.normal_(1.0, 0.1)
                attn.norm_bias.normal_(0.0, 0.1)
            q, k, v = (_rand(*shape, seed=100 * seed + i) for i in range(3))
            with torch.no_grad():
                diff = (attn(q, k, v, mode="fast") - attn(q, k, v, mode="naive")).abs().max()
            worst = max(worst, float(diff))
        # the matrix attention is blind to a conjugated transform (Q U U^T K^T is real), so
        # the spectra themselves are compared as well
        x = _rand(*shape, seed=shape[-1]).flatten(-2)
        for inverse in (False, True):
            diff = (dft(x, inverse, "fast") - dft(x, inverse, "naive")).abs().max()
            worst = max(worst, float(diff))
    return worst, 1e-6


def parseval_crosscheck(config: RunConfig):
    q, k = _rand(2, 8, 64, seed=1), _rand(2, 8, 64, seed=2)
    fq, fk = dft(q), dft(k)
    lhs = (fq @ fk.conj().transpose(-2, -1)).real
    return float((lhs - q @ k.transpose(-2, -1)).abs().max()), 1e-6


def haar_roundtrip(config: RunConfig):
    x = _rand(1, 3, 32, 32, seed=3, dtype=torch.float32)
    return float((haar_idwt2(haar_dwt2(x)) - x).abs().max()), 1e-6


def haar_parseval(config: RunConfig):
    x = _rand(1, 3, 32, 32, seed=4)
    energy = sum(float((b ** 2).sum()) for b in haar_dwt2(x))
    ref = float((x ** 2).sum())
    return abs(energy - ref) / ref, 1e-5


def grad_convnext(config: RunConfig):
    torch.manual_seed(0)
    block = ConvNextBlock(8).double()
    return gradient_rel_error(block, [_rand(1, 8, 8, 8, seed=5)]), 1e-4


def grad_ffc(config: RunConfig):
    torch.manual_seed(0)
    block = FFCBlock(8).double()
    return gradient_rel_error(block, [_rand(1, 8, 8, 8, seed=6)]), 1e-4


def grad_ffa(config: RunConfig):
    torch.manual_seed(0)
    attn = FourierAttention(4, 1, config.model.ffa_variant).double()
    qkv = [_rand(1, 4, 4, 4, seed=7 + i) for i in range(3)]
    return gradient_rel_error(attn, qkv), 1e-4


def grad_ffat(config: RunConfig):
    torch.manual_seed(0)
    block = FFATBlock(8, _heads_for(config, 8), config.model.ffa_variant).double()
    return gradient_rel_error(block, [_rand(1, 8, 8, 8, seed=10)]), 1e-4


def grad_unet(config: RunConfig):
    torch.manual_seed(0)
    net = ConvNextUNet(8, [1, 1, 1]).double()
    return gradient_rel_error(net, [_rand(1, 3, 16, 16, seed=11)]), 1e-3


def grad_stage2_loss(config: RunConfig):
    extractor = RandomConvExtractor().double()
    target = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(12), dtype=torch.float64)
    pred = (target + 0.2 * _rand(1, 3, 16, 16, seed=13)).clamp(0.05, 0.95)

    def fn(p):
        return total_loss(p, target, config.loss, 2, extractor).total

    return gradient_rel_error(fn, [pred]), 1e-3


def identity_convnext(config: RunConfig):
    torch.manual_seed(0)
    block = ConvNextBlock(16)
    torch.nn.init.zeros_(block.pw2.weight)
    torch.nn.init.zeros_(block.pw2.bias)
    x = _rand(1, 16, 16, 16, seed=14, dtype=torch.float32)
    with torch.no_grad():
        return float((block(x) - x).abs().max()), 1e-6


def identity_ffat(config: RunConfig):
    torch.manual_seed(0)
    block = FFATBlock(16, _heads_for(config, 16), config.model.ffa_variant)
    block.zero_init_()
    x = _rand(1, 16, 16, 16, seed=15, dtype=torch.float32)
    with torch.no_grad():
        return float((block(x) - x).abs().max()), 1e-6


def identity_refiner(config: RunConfig):
    """Both the default (zero head) init and fully zeroed projections give the identity."""
    torch.manual_seed(0)
    cfg = copy.deepcopy(config.model)
    cfg.refiner_zero_init = True
    default = Refiner(cfg)
    cfg.refiner_zero_init = False
    full = Refiner(cfg)
    full.zero_init_()
    side = 2 ** (cfg.refiner_levels - 1) * 4
    y = torch.rand(1, 3, side, side, generator=torch.Generator().manual_seed(16))
    with torch.no_grad():
        return max(float((net(y) - y).abs().max()) for net in (default, full)), 1e-6


def loss_breakdown(config: RunConfig):
    w = config.loss
    parts = combine(*(torch.tensor(v, dtype=torch.float64) for v in (0.3, 0.7, 1.9, -0.4)), w, 1)
    expected = 0.3 + w.alpha * 0.7 + w.beta * 1.9 + w.gamma * -0.4
    err = abs(float(parts.total) - expected)
    ones = combine(1.0, 1.0, 1.0, 1.0, w, 1).total
    ones2 = combine(1.0, 1.0, 1.0, 1.0, w, 2).total
    err = max(err, abs(ones - (1 + w.alpha + w.beta + w.gamma)), abs(ones2 - (1 + w.alpha + w.beta)))
    return err, 1e-7


def ms_ssim_oracle(config: RunConfig):
    gen = torch.Generator().manual_seed(17)
    x = torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64)
    y = (x + 0.2 * torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64)).clamp(0, 1)
    fast = 1.0 - float(ms_ssim_loss(x, y))
    ref = ms_ssim_bruteforce(x[0].numpy(), y[0].numpy())
    return abs(fast - ref), 1e-5


def lr_endpoints(config: RunConfig):
    s = copy.deepcopy(config.schedule)
    s.stage1_steps = 1000
    err = max(abs(lr_at(0, s, 1) - s.lr1_start), abs(lr_at(1000, s, 1) - s.lr1_end),
              abs(lr_at(500, s, 1) - (s.lr1_start + s.lr1_end) / 2), abs(lr_at(7, s, 2) - s.lr2))
    lrs = [lr_at(t, s, 1) for t in range(1001)]
    if any(b > a for a, b in zip(lrs, lrs[1:])):
        err = math.inf
    return err, 1e-15


def removal_liveness(config: RunConfig):
    """Output in [0,1] with input shape, and every parameter gets nonzero gradient."""
    torch.manual_seed(0)
    cfg = copy.deepcopy(config.model)
    cfg.base_channels, cfg.blocks_per_level = 8, [1, 1, 1]
    net = RemovalNet(cfg)
    gen = torch.Generator().manual_seed(18)
    x, t = torch.rand(2, 3, 32, 32, generator=gen), torch.rand(2, 3, 32, 32, generator=gen)
    out = net(x)
    if out.shape != x.shape or out.min() < 0 or out.max() > 1:
        return math.inf, 0.0
    l1_loss(out, t).backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    return float(len(dead)), 0.0


def stage_isolation(config: RunConfig):
    """Stage 1 leaves the refiner alone; stage 2 leaves D alone and moves removal iff joint."""
    cfg = copy.deepcopy(config)
    m = cfg.model
    m.base_channels, m.blocks_per_level, m.refiner_channels, m.disc_channels = 8, [1, 1, 1], 8, 8
    m.ffa_heads = 1 if m.refiner_channels % m.ffa_heads else m.ffa_heads
    cfg.schedule.stage1_steps = cfg.schedule.stage2_steps = 2
    cfg.schedule.batch_size = 1
    cfg.augment.crop_size = 32
    samples = []
    for i in range(2):
        clean, shadow, _, _ = synth_pair(np.random.default_rng([cfg.seed, 99, i]), 32)
        to_t = lambda a: torch.from_numpy(a.astype(np.float32) / 255).permute(2, 0, 1)[None].contiguous()
        samples.append(PairedSample(to_t(shadow), to_t(clean), str(i)))
    s1, _ = train_stage1(samples, cfg, cfg.seed)
    init, _ = train_stage1(samples, cfg, cfg.seed, until=0)
    bad = 0
    bad += any(not torch.equal(init.refiner[k], s1.refiner[k]) for k in init.refiner)
    bad += all(torch.equal(init.removal[k], s1.removal[k]) for k in init.removal)
    if not m.enable_refiner and not cfg.schedule.stage2_joint:
        # nothing is trainable in stage 2; the contract is an up-front refusal
        try:
            train_stage2(s1, samples, cfg)
        except ConfigError:
            return float(bad), 0.0
        return float(bad + 1), 0.0
    s2, _ = train_stage2(s1, samples, cfg)
    bad += any(not torch.equal(s1.disc[k], s2.disc[k]) for k in s1.disc)
    removal_same = all(torch.equal(s1.removal[k], s2.removal[k]) for k in s1.removal)
    bad += removal_same == cfg.schedule.stage2_joint
    if m.enable_refiner:
        bad += all(torch.equal(s1.refiner[k], s2.refiner[k]) for k in s1.refiner)
    return float(bad), 0.0


CHECKS: List[tuple] = [
    ("ffa_fft_vs_naive_dft", ffa_fast_vs_naive),
    ("dft_parseval_crosscheck", parseval_crosscheck),
    ("haar_roundtrip", haar_roundtrip),
    ("haar_parseval", haar_parseval),
    ("grad_convnext_block", grad_convnext),
    ("grad_ffc_block", grad_ffc),
    ("grad_ffa_attention", grad_ffa),
    ("grad_ffat_block", grad_ffat),
    ("grad_unet", grad_unet),
    ("grad_stage2_total_loss", grad_stage2_loss),
    ("identity_convnext_block", identity_convnext),
    ("identity_ffat_block", identity_ffat),
    ("identity_refiner", identity_refiner),
    ("loss_breakdown", loss_breakdown),
    ("ms_ssim_bruteforce", ms_ssim_oracle),
    ("lr_endpoints", lr_endpoints),
    ("removal_liveness", removal_liveness),
    ("stage_isolation", stage_isolation),
]


def run_checks(config: RunConfig, corrupt_dft_sign: bool = False,
               report: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
    saved = refiner_mod._NAIVE_DFT_SIGN
    refiner_mod._NAIVE_DFT_SIGN = 1.0 if corrupt_dft_sign else -1.0
    results = []
    try:
        for name, fn in CHECKS:
            t0 = time.time()
            try:
                value, limit = fn(config)
                ok = value <= limit
                detail = f"{value:.3g} <= {limit:g}" if ok else f"{value:.3g} > {limit:g}"
            except Exception as exc:  # a crash is a failed check, reported by name
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            res = CheckResult(name, ok, f"{detail} ({time.time() - t0:.1f}s)")
            results.append(res)
            if report:
                report(res)
    finally:
        refiner_mod._NAIVE_DFT_SIGN = saved
    return results
