"""Acceptance criteria 1-10, one test each; every test prints a single PASS/FAIL line.

Criteria 8 and 9 train real models and take several minutes on one CPU core.
"""
import copy
import importlib.util
import itertools
import math
import tempfile
import time
from pathlib import Path

import pytest
import torch

from shadowfree import selfcheck as sc
from shadowfree.cli import run_ablation
from shadowfree.config import RunConfig
from shadowfree.losses import combine, ms_ssim, total_loss
from shadowfree.metrics import evaluate_pairs, psnr, ssim
from shadowfree.oracles import ms_ssim_bruteforce
from shadowfree.trainer import (batch_at, build_models, lr_at, make_predictor, train_stage1,
                                train_stage2)

from conftest import synth_samples

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}", flush=True)
        assert ok, f"criterion {number} ({title}) failed: {detail}"

    return emit


def _run(checks, config):
    return {name: fn(config) for name, fn in checks}


def test_criterion_01_ffa_oracle(verdict):
    t0 = time.time()
    worst = {}
    for variant in ("matrix", "elementwise"):
        cfg = RunConfig()
        cfg.model.ffa_variant = variant
        worst[variant], _ = sc.ffa_fast_vs_naive(cfg)
    secs = time.time() - t0
    ok = max(worst.values()) <= 1e-6 and secs < 10
    verdict(1, "FFA fast vs naive DFT", ok,
            ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f" (<= 1e-6), {secs:.1f}s (< 10s)")


def test_criterion_02_gradient_suite(verdict):
    t0 = time.time()
    res = _run([("convnext", sc.grad_convnext), ("ffc", sc.grad_ffc), ("ffat", sc.grad_ffat),
                ("stage2 loss", sc.grad_stage2_loss)], RunConfig())
    secs = time.time() - t0
    limits = {"convnext": 1e-4, "ffc": 1e-4, "ffat": 1e-4, "stage2 loss": 1e-3}
    ok = all(res[k][0] <= limits[k] for k in limits) and secs < 120
    verdict(2, "finite-difference gradients", ok,
            ", ".join(f"{k} {res[k][0]:.1e}<={limits[k]:g}" for k in limits) + f", {secs:.1f}s")


def test_criterion_03_transform_identities(verdict):
    res = _run([("dwt roundtrip", sc.haar_roundtrip), ("dwt parseval", sc.haar_parseval),
                ("dft parseval", sc.parseval_crosscheck)], RunConfig())
    limits = {"dwt roundtrip": 1e-6, "dwt parseval": 1e-5, "dft parseval": 1e-6}
    ok = all(res[k][0] <= limits[k] for k in limits)
    verdict(3, "transform identities", ok, ", ".join(f"{k} {res[k][0]:.1e}<={limits[k]:g}" for k in limits))


def test_criterion_04_identity_initializations(verdict):
    cfg = RunConfig()
    res = _run([("convnext", sc.identity_convnext), ("ffat", sc.identity_ffat),
                ("refiner", sc.identity_refiner)], cfg)
    for variant in ("elementwise",):
        alt = copy.deepcopy(cfg)
        alt.model.ffa_variant = variant
        res[f"ffat/{variant}"] = sc.identity_ffat(alt)
        res[f"refiner/{variant}"] = sc.identity_refiner(alt)

    # stage-2 step 0 against the stage-1 final weights on the same batch, default model
    samples = synth_samples(4, 64)
    cfg.schedule.stage1_steps = 3
    s1, _ = train_stage1(samples, cfg)
    _, recs = train_stage2(s1, samples, cfg, until=1)
    models = build_models(cfg, s1.seed, s1)
    x, y = batch_at(samples, 0, 2, s1.seed, cfg)
    with torch.no_grad():
        ref = float(total_loss(models.removal(x), y, cfg.loss, 2, models.extractor).total)
    handoff = abs(recs[0].total - ref)

    ok = all(v[0] <= 1e-6 for v in res.values()) and handoff <= 1e-5
    verdict(4, "identity initializations", ok,
            ", ".join(f"{k} {v[0]:.1e}" for k, v in res.items()) + f" (<= 1e-6); stage handoff {handoff:.1e} (<= 1e-5)")


def test_criterion_05_loss_arithmetic(verdict):
    w = RunConfig().loss
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(200):
        v = torch.rand(4, generator=gen, dtype=torch.float64) * torch.tensor([5.0, 1.0, 50.0, 10.0])
        parts = combine(v[0], v[1], v[2], v[3] - 5.0, w, 1)
        expected = parts.l1 + w.alpha * parts.ssim_term + w.beta * parts.percep + w.gamma * parts.adv
        worst = max(worst, abs(float(parts.total - expected)))
    worked = combine(1.0, 1.0, 1.0, 1.0, w, 1).total
    x = torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64)
    y = (x + 0.2 * torch.randn(1, 3, 32, 32, generator=gen, dtype=torch.float64)).clamp(0, 1)
    ms_err = abs(float(ms_ssim(x, y)) - ms_ssim_bruteforce(x[0].numpy(), y[0].numpy()))
    ok = (w.alpha, w.beta, w.gamma) == (0.2, 0.01, 0.0005) and worst <= 1e-7 and worked == 1.2105 and ms_err <= 1e-5
    verdict(5, "loss arithmetic", ok,
            f"breakdown {worst:.1e} (<= 1e-7), worked example {worked!r} (== 1.2105), MS-SSIM vs brute force {ms_err:.1e} (<= 1e-5)")


def test_criterion_06_metric_golden_values(verdict):
    a, b = torch.full((1, 3, 32, 32), 0.5), torch.full((1, 3, 32, 32), 0.25)
    x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    p, s, s_self = psnr(a, b), ssim(a, b), ssim(x, x)
    ok = abs(p - 12.0412) <= 1e-4 and abs(s - 0.80007) <= 5e-4 and abs(s_self - 1.0) <= 1e-12
    verdict(6, "metric golden values", ok, f"PSNR {p:.5f} dB, SSIM {s:.5f}, SSIM(x,x) {s_self!r}")


def test_criterion_07_schedule_endpoints(verdict):
    s = RunConfig().schedule
    t = s.stage1_steps
    got = (lr_at(0, s, 1), lr_at(t, s, 1), lr_at(t // 2, s, 1))
    ok = got == (1e-4, 6.25e-6, 5.3125e-5) and t % 2 == 0
    verdict(7, "LR schedule endpoints", ok, f"t=0 {got[0]!r}, t=T {got[1]!r}, t=T/2 {got[2]!r}")


def _overfit_module():
    spec = importlib.util.spec_from_file_location("overfit_synthetic", ROOT / "scripts" / "overfit_synthetic.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_criterion_08_desk_scale_overfit(verdict):
    cfg = RunConfig()
    assert (cfg.schedule.stage1_steps, cfg.schedule.stage2_steps, cfg.seed) == (1500, 500, 0)
    result, _, _ = _overfit_module().run(cfg, count=4, size=64, log_every=10 ** 9)
    ok = (result["stage2_psnr"] >= 30.0 and result["stage2_gain_db"] >= 0.1
          and result["seconds"] <= 15 * 60)
    verdict(8, "desk-scale overfit", ok,
            f"stage 1 {result['stage1_psnr']:.2f} dB, stage 2 {result['stage2_psnr']:.2f} dB (>= 30), "
            f"gain {result['stage2_gain_db']:+.3f} dB (>= 0.1), {result['seconds']:.0f}s (<= 900, "
            f"{torch.get_num_threads()} thread(s))")


def test_criterion_09_ablation_and_selfcheck_matrix(verdict):
    samples = synth_samples(4, 64)
    rows = run_ablation(samples, RunConfig(), steps=200, stage2_steps=0)
    ablation_ok = len(rows) == 4 and all(math.isfinite(r["psnr_db"]) and math.isfinite(r["ssim"]) for r in rows)

    failures, combos = [], 0
    flag_sets = [(True, True, True), (True, True, False), (True, False, False), (False, True, False)]
    for (unet, dwt, refine), variant, joint in itertools.product(flag_sets, ("matrix", "elementwise"), (True, False)):
        cfg = RunConfig()
        m = cfg.model
        m.enable_unet_branch, m.enable_dwtffc_branch, m.enable_refiner = unet, dwt, refine
        m.ffa_variant, cfg.schedule.stage2_joint = variant, joint
        combos += 1
        bad = [r.name for r in sc.run_checks(cfg) if not r.passed]
        if bad:
            failures.append(f"{(unet, dwt, refine, variant, joint)}: {bad}")
    ok = ablation_ok and not failures
    detail = " | ".join(f"{r['configuration']} {r['psnr_db']:.2f} dB" for r in rows)
    verdict(9, "ablation runnability + selfcheck matrix", ok,
            f"{detail}; selfcheck green on {combos - len(failures)}/{combos} flag combinations"
            + (f"; failing {failures}" if failures else ""))


def test_criterion_10_determinism(verdict):
    samples = synth_samples(4, 64)
    cfg = RunConfig()
    cfg.schedule.stage1_steps, cfg.schedule.stage2_steps = 20, 10
    runs = []
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(2):
            s1, r1 = train_stage1(samples, cfg)
            s2, r2 = train_stage2(s1, samples, cfg)
            report = evaluate_pairs([(s.id, s.shadow, s.clean) for s in samples],
                                    make_predictor(build_models(cfg, s2.seed, s2)))
            path = Path(tmp) / f"eval{i}.csv"
            report.write_csv(path)
            runs.append((r1 + r2, path.read_bytes()))
    worst = max(abs(a.total - b.total) for a, b in zip(runs[0][0], runs[1][0]))
    ok = worst <= 1e-7 and runs[0][1] == runs[1][1] and len(runs[0][0]) == 30
    verdict(10, "determinism", ok, f"max per-step loss diff {worst:.1e} (<= 1e-7), "
            f"evaluation CSVs {'identical' if runs[0][1] == runs[1][1] else 'DIFFER'}")
