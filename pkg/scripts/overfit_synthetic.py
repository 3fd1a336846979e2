"""Desk-scale overfit run: 4 synthetic 64x64 pairs, stage 1 then stage 2, training-set PSNR.

    python scripts/overfit_synthetic.py --out runs/overfit [--set key=value ...]
"""
import argparse
import json
import tempfile
import time
from pathlib import Path

from shadowfree.config import load_config
from shadowfree.data import load_paired_dataset, synth_generate
from shadowfree.metrics import evaluate_pairs
from shadowfree.trainer import build_models, make_predictor, train_stage1, train_stage2, write_losses_csv


def training_psnr(state, samples, config):
    models = build_models(config, state.seed, state)
    report = evaluate_pairs([(s.id, s.shadow, s.clean) for s in samples], make_predictor(models))
    return report.aggregate


def run(config, count=4, size=64, log_every=100, out=None):
    with tempfile.TemporaryDirectory() as tmp:
        synth_generate(count, size, config.seed, tmp)
        samples = load_paired_dataset(tmp)
    t0 = time.time()

    def progress(rec):
        if rec.step % log_every == 0:
            print(f"stage {rec.stage} step {rec.step:5d} total {rec.total:.5f} l1 {rec.l1:.5f} "
                  f"[{time.time() - t0:.0f}s]", flush=True)

    s1, rec1 = train_stage1(samples, config, on_step=progress)
    m1 = training_psnr(s1, samples, config)
    s2, rec2 = train_stage2(s1, samples, config, on_step=progress)
    m2 = training_psnr(s2, samples, config)
    result = {
        "stage1_psnr": m1["psnr_db"], "stage1_ssim": m1["ssim"],
        "stage2_psnr": m2["psnr_db"], "stage2_ssim": m2["ssim"],
        "stage2_gain_db": m2["psnr_db"] - m1["psnr_db"],
        "seconds": time.time() - t0,
    }
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_losses_csv(rec1 + rec2, out / "losses.csv")
        (out / "result.json").write_text(json.dumps(result, indent=2))
    return result, rec1, rec2


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out")
    args = ap.parse_args()
    config = load_config(args.config, args.set)
    result, _, _ = run(config, out=args.out)
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
