"""Command line entry point: make-synth, train, infer, evaluate, ablate, selfcheck."""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

from .config import ConfigError, DataError, NumericError, RunConfig, dump_config, load_config
from .data import IMAGE_SUFFIXES, load_paired_dataset, read_image, synth_generate, write_image
from .metrics import evaluate_pairs, load_lpips_backend
from .selfcheck import run_checks
from .trainer import (build_models, checkpoint_name, load_checkpoint, make_extractor, make_predictor,
                      save_checkpoint, train_stage1, train_stage2, write_losses_csv)

log = logging.getLogger("shadowfree")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

# Table 4 rows that can be trained here (the Restormer-swap row is not reimplemented).
ABLATIONS = {
    "full": {},
    "w/o refinement": {"enable_refiner": "false"},
    "only convnext unet": {"enable_refiner": "false", "enable_dwtffc_branch": "false"},
    "only dwt-ffc": {"enable_refiner": "false", "enable_unet_branch": "false"},
}


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    summary: str = ""
    artifacts: List[str] = field(default_factory=list)


def _config(args, extra: Sequence[str] = ()) -> RunConfig:
    return load_config(args.config, list(args.set) + list(extra))


# --- subcommands ------------------------------------------------------------------

def cmd_make_synth(args) -> CommandResult:
    synth_generate(args.count, args.size, args.seed, args.out)
    return CommandResult(summary=f"wrote {args.count} synthetic pairs to {args.out}", artifacts=[args.out])


def cmd_train(args) -> CommandResult:
    cfg = _config(args)
    samples = load_paired_dataset(args.data)
    if not samples:
        raise DataError(f"no image pairs found under {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    extractor = make_extractor(args.vgg_weights)
    resume = load_checkpoint(args.resume, cfg) if args.resume else None
    artifacts, losses = [], out / "losses.csv"
    append = resume is not None

    def log_step(rec):
        if rec.step % 50 == 0:
            log.info("stage %d step %d total %.5f lr %.3g", rec.stage, rec.step, rec.total, rec.lr)

    stages = [1, 2] if args.stage is None else [args.stage]
    state = resume
    if 1 in stages:
        if resume is not None and resume.stage == 2:
            raise ConfigError("stage: cannot resume stage 1 from a stage-2 checkpoint")
        state, records = train_stage1(samples, cfg, extractor=extractor, resume=resume, on_step=log_step)
        write_losses_csv(records, losses, append=append)
        append = True
        path = out / checkpoint_name(1, state.step)
        save_checkpoint(state, path)
        artifacts.append(str(path))
    if 2 in stages:
        if state is None:
            raise ConfigError("stage 2 needs --resume with a stage-1 checkpoint")
        state, records = train_stage2(state, samples, cfg, extractor=extractor, on_step=log_step)
        write_losses_csv(records, losses, append=append)
        path = out / checkpoint_name(2, state.step)
        save_checkpoint(state, path)
        artifacts.append(str(path))
    artifacts.append(str(losses))
    return CommandResult(summary=f"trained stage(s) {stages}; final checkpoint {artifacts[-2]}",
                         artifacts=artifacts)


def _models_from_checkpoint(args):
    state = load_checkpoint(args.ckpt)
    cfg = state.run_config
    if args.config or args.set:
        cfg = load_config(args.config, list(args.set))
        state = load_checkpoint(args.ckpt, cfg)
    return build_models(cfg, state.seed, state), cfg


def cmd_infer(args) -> CommandResult:
    models, _ = _models_from_checkpoint(args)
    predict = make_predictor(models)
    src = Path(args.input)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    elif src.is_file():
        files = [src]
    else:
        raise FileNotFoundError(f"input not found: {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in files:
        dest = out / f"{f.stem}.png"
        write_image(predict(read_image(f)), dest)
        written.append(str(dest))
    return CommandResult(summary=f"wrote {len(written)} images to {out}", artifacts=written)


def _lpips(args):
    if getattr(args, "with_lpips", False) and not getattr(args, "lpips_backend", None):
        raise ConfigError("--with-lpips requires --lpips-backend PATH")
    return load_lpips_backend(args.lpips_backend) if getattr(args, "lpips_backend", None) else None


def cmd_evaluate(args) -> CommandResult:
    lpips_fn = _lpips(args)
    models, cfg = _models_from_checkpoint(args)
    samples = load_paired_dataset(args.data)
    if not samples:
        raise DataError(f"no image pairs found under {args.data}")
    report = evaluate_pairs([(s.id, s.shadow, s.clean) for s in samples], make_predictor(models),
                            cfg.ssim_mode, lpips_fn)
    report.write_csv(args.out)
    agg = ", ".join(f"{k}={v:.4f}" for k, v in report.aggregate.items())
    return CommandResult(summary=f"{report.count} images: {agg}", artifacts=[args.out])


def run_ablation(samples, base: RunConfig, steps: int, stage2_steps: int, lpips_fn=None) -> List[dict]:
    rows = []
    pairs = [(s.id, s.shadow, s.clean) for s in samples]
    for name, overrides in ABLATIONS.items():
        cfg = copy.deepcopy(base)
        for k, v in overrides.items():
            setattr(cfg.model, k, v == "true")
        cfg.schedule.stage1_steps, cfg.schedule.stage2_steps = steps, max(stage2_steps, 1)
        cfg.validate()
        state, _ = train_stage1(samples, cfg)
        if stage2_steps > 0:
            state, _ = train_stage2(state, samples, cfg)
        models = build_models(cfg, state.seed, state)
        report = evaluate_pairs(pairs, make_predictor(models), cfg.ssim_mode, lpips_fn)
        row = {"configuration": name, **report.aggregate}
        rows.append(row)
        log.info("ablation %s: %s", name, row)
    return rows


def cmd_ablate(args) -> CommandResult:
    lpips_fn = _lpips(args)
    cfg = _config(args)
    samples = load_paired_dataset(args.data)
    if not samples:
        raise DataError(f"no image pairs found under {args.data}")
    rows = run_ablation(samples, cfg, args.steps, args.stage2_steps, lpips_fn)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ablation.csv"
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in rows:
            writer.writerow([row[k] if k == "configuration" else f"{row[k]:.6f}" for k in keys])
    return CommandResult(summary=f"{len(rows)} ablation rows -> {path}", artifacts=[str(path)])


def cmd_selfcheck(args) -> CommandResult:
    cfg = _config(args, [f"ffa_variant={args.ffa_variant}"] if args.ffa_variant else [])

    def show(res):
        print(f"{'PASS' if res.passed else 'FAIL'}  {res.name:28s} {res.detail}", flush=True)

    results = run_checks(cfg, corrupt_dft_sign=args.corrupt_dft_sign, report=show)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError("self-check failed: " + ", ".join(failed))
    return CommandResult(summary=f"all {len(results)} checks passed")


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowfree", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.set_defaults(func=fn)
        return p

    p = add("make-synth", cmd_make_synth, "write synthetic shadow/clean pairs")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "two-stage training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--vgg-weights", metavar="PATH", help="VGG-16 state dict for the perceptual loss")

    p = add("infer", cmd_infer, "restore an image or a directory of images")
    p.add_argument("--input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "PSNR/SSIM report on a paired dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--with-lpips", action="store_true")
    p.add_argument("--lpips-backend", metavar="PATH", help="file.py[:func] or module[:func]")

    p = add("ablate", cmd_ablate, "train and evaluate the ablation configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=200, help="stage-1 steps per configuration")
    p.add_argument("--stage2-steps", type=int, default=0, help="stage-2 steps per configuration")
    p.add_argument("--with-lpips", action="store_true")
    p.add_argument("--lpips-backend", metavar="PATH")

    p = add("selfcheck", cmd_selfcheck, "run the numerical oracle suite")
    p.add_argument("--ffa-variant", choices=("matrix", "elementwise"))
    p.add_argument("--corrupt-dft-sign", action="store_true", help=argparse.SUPPRESS)
    return parser


def run(argv=None) -> CommandResult:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return CommandResult(EXIT_CONFIG, f"config error: {exc}")
    except DataError as exc:
        return CommandResult(EXIT_DATA, f"data error: {exc}")
    except NumericError as exc:
        return CommandResult(EXIT_NUMERIC, f"numeric error: {exc}")
    except OSError as exc:
        return CommandResult(EXIT_IO, f"io error: {exc}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    result = run(argv)
    print(result.summary, file=sys.stderr if result.exit_code else sys.stdout)
    for a in result.artifacts:
        print(f"  {a}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
