"""Two-stage training: removal net + discriminator, then refiner (optionally joint) without the GAN term."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import safetensors.torch
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import safe_open

from .config import AugmentSpec, ConfigError, NumericError, RunConfig, StageSchedule, draw_rng, seed_all
from .data import PairedSample, augment, effective_augment
from .losses import (LossBreakdown, PatchDiscriminator, RandomConvExtractor, VGG16Extractor,
                     discriminator_loss, total_loss)
from .refiner import Refiner
from .removal import RemovalNet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "shadowfree-ckpt-1"
LOSS_COLUMNS = ("step", "stage", "l1", "ssim_term", "percep", "adv", "total", "lr")


def lr_at(step: int, schedule: StageSchedule, stage: int) -> float:
    """Stage 1: cosine from lr1_start (t=0) to lr1_end (t=T). Stage 2: constant lr2."""
    total = schedule.stage1_steps if stage == 1 else schedule.stage2_steps
    if not 0 <= step <= total:
        raise ValueError(f"lr_at: step {step} outside [0, {total}] for stage {stage}")
    if stage == 2:
        return schedule.lr2
    if stage != 1:
        raise ValueError(f"lr_at: unknown stage {stage}")
    # exact rational arithmetic over the decimal config values, rounded once: the
    # endpoints and the midpoint then come out as the nearest doubles to their true values
    cos = 0 if 2 * step == total else Fraction(math.cos(math.pi * step / total))
    hi, lo = Fraction(repr(schedule.lr1_start)), Fraction(repr(schedule.lr1_end))
    return float((hi + lo) / 2 + (hi - lo) / 2 * cos)


@dataclass
class StepRecord:
    step: int
    stage: int
    l1: float
    ssim_term: float
    percep: float
    adv: float
    total: float
    lr: float


@dataclass
class CheckpointState:
    removal: dict
    refiner: dict
    disc: dict
    step: int
    stage: int
    config: dict
    seed: int
    opt_g: Optional[dict] = None
    opt_d: Optional[dict] = None

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)


@dataclass
class Models:
    removal: RemovalNet
    refiner: Refiner
    disc: PatchDiscriminator
    extractor: nn.Module
    config: RunConfig = field(repr=False)

    def pipeline(self, x, use_refiner: Optional[bool] = None):
        if use_refiner is None:
            use_refiner = self.config.model.enable_refiner
        y = self.removal(x)
        return self.refiner(y) if use_refiner else y


def make_extractor(vgg_weights=None) -> nn.Module:
    return VGG16Extractor(vgg_weights) if vgg_weights else RandomConvExtractor()


def build_models(config: RunConfig, seed: int, state: Optional[CheckpointState] = None,
                 extractor: Optional[nn.Module] = None) -> Models:
    seed_all(seed)
    models = Models(RemovalNet(config.model), Refiner(config.model),
                    PatchDiscriminator(config.model.disc_channels),
                    extractor if extractor is not None else RandomConvExtractor(), config)
    if state is not None:
        models.removal.load_state_dict(state.removal)
        models.refiner.load_state_dict(state.refiner)
        models.disc.load_state_dict(state.disc)
    return models


def snapshot(models: Models, step: int, stage: int, seed: int, opt_g=None, opt_d=None) -> CheckpointState:
    def copy(sd):
        return {k: v.detach().clone() for k, v in sd.items()}

    return CheckpointState(
        removal=copy(models.removal.state_dict()),
        refiner=copy(models.refiner.state_dict()),
        disc=copy(models.disc.state_dict()),
        step=step, stage=stage, config=models.config.to_dict(), seed=seed,
        opt_g=None if opt_g is None else _clone_tree(opt_g.state_dict()),
        opt_d=None if opt_d is None else _clone_tree(opt_d.state_dict()),
    )


def _clone_tree(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone()
    if isinstance(obj, dict):
        return {k: _clone_tree(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clone_tree(v) for v in obj]
    return obj


# --- data stream ---------------------------------------------------------------

def batch_at(samples: Sequence[PairedSample], step: int, stage: int, seed: int,
             config: RunConfig, spec: Optional[AugmentSpec] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Deterministic augmented batch for ``step``: a pure function of (seed, stage, step)."""
    n, bs = len(samples), config.schedule.batch_size
    spec = spec or effective_augment(config.augment, samples)
    xs, ys = [], []
    for j in range(bs):
        pos = step * bs + j
        epoch, slot = divmod(pos, n)
        idx = int(draw_rng(seed, 11, stage, epoch).permutation(n)[slot])
        s = augment(samples[idx], spec, draw_rng(seed, 13, stage, epoch, idx))
        xs.append(s.shadow)
        ys.append(s.clean)
    return torch.cat(xs), torch.cat(ys)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _adam(params, schedule: StageSchedule):
    return torch.optim.Adam(params, lr=schedule.lr1_start, betas=(schedule.adam_beta1, schedule.adam_beta2))


def _check_finite(parts: LossBreakdown, stage: int, step: int):
    if not torch.isfinite(parts.total):
        raise NumericError(f"non-finite loss at stage {stage} step {step}")


def _record(step, stage, parts: LossBreakdown, lr) -> StepRecord:
    return StepRecord(step, stage, **parts.as_floats(), lr=lr)


def _clip(params, max_norm):
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


# --- stages ----------------------------------------------------------------------

def train_stage1(samples: Sequence[PairedSample], config: RunConfig, seed: Optional[int] = None, *,
                 resume: Optional[CheckpointState] = None, until: Optional[int] = None,
                 extractor: Optional[nn.Module] = None,
                 on_step: Optional[Callable[[StepRecord], None]] = None) -> Tuple[CheckpointState, List[StepRecord]]:
    """Optimize the removal net with the full loss, alternating one discriminator step per step."""
    if not samples:
        raise ValueError("train_stage1: empty dataset")
    seed = config.seed if seed is None else seed
    sched = config.schedule
    models = build_models(config, seed, resume, extractor)
    opt_g = _adam(models.removal.parameters(), sched)
    opt_d = _adam(models.disc.parameters(), sched)
    start = 0
    if resume is not None and resume.stage == 1 and resume.opt_g is not None:
        opt_g.load_state_dict(resume.opt_g)
        opt_d.load_state_dict(resume.opt_d)
        start = resume.step
    end = sched.stage1_steps if until is None else min(until, sched.stage1_steps)
    spec = effective_augment(config.augment, samples)
    records = []
    for step in range(start, end):
        lr = lr_at(step, sched, 1)
        x, y = batch_at(samples, step, 1, seed, config, spec)
        pred = models.removal(x)
        parts = total_loss(pred, y, config.loss, 1, models.extractor, models.disc)
        _check_finite(parts, 1, step)
        _set_lr(opt_g, lr)
        opt_g.zero_grad(set_to_none=True)
        parts.total.backward()
        _clip(models.removal.parameters(), sched.clip_norm)
        opt_g.step()

        d_loss = discriminator_loss(pred, y, models.disc)
        if not torch.isfinite(d_loss):
            raise NumericError(f"non-finite discriminator loss at stage 1 step {step}")
        _set_lr(opt_d, lr)
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        _clip(models.disc.parameters(), sched.clip_norm)
        opt_d.step()

        rec = _record(step, 1, parts, lr)
        records.append(rec)
        if on_step:
            on_step(rec)
    return snapshot(models, end, 1, seed, opt_g, opt_d), records


def stage2_parameters(models: Models) -> List[nn.Parameter]:
    cfg = models.config
    params = list(models.refiner.parameters()) if cfg.model.enable_refiner else []
    if cfg.schedule.stage2_joint:
        params += list(models.removal.parameters())
    return params


def stage2_forward(models: Models, x):
    if models.config.schedule.stage2_joint:
        y = models.removal(x)
    else:
        with torch.no_grad():
            y = models.removal(x)
    return models.refiner(y) if models.config.model.enable_refiner else y


def train_stage2(ckpt: CheckpointState, samples: Sequence[PairedSample], config: RunConfig,
                 seed: Optional[int] = None, *, until: Optional[int] = None,
                 extractor: Optional[nn.Module] = None,
                 on_step: Optional[Callable[[StepRecord], None]] = None) -> Tuple[CheckpointState, List[StepRecord]]:
    """Train refiner(removal(x)) without the adversarial term; the discriminator stays frozen."""
    if not samples:
        raise ValueError("train_stage2: empty dataset")
    seed = ckpt.seed if seed is None else seed
    sched = config.schedule
    models = build_models(config, seed, ckpt, extractor)
    params = stage2_parameters(models)
    if not params:
        raise ConfigError("stage2_joint: stage 2 has nothing to train with the refiner disabled")
    opt = _adam(params, sched)
    start = 0
    if ckpt.stage == 2 and ckpt.opt_g is not None:
        opt.load_state_dict(ckpt.opt_g)
        start = ckpt.step
    end = sched.stage2_steps if until is None else min(until, sched.stage2_steps)
    spec = effective_augment(config.augment, samples)
    records = []
    for step in range(start, end):
        lr = lr_at(step, sched, 2)
        x, y = batch_at(samples, step, 2, seed, config, spec)
        parts = total_loss(stage2_forward(models, x), y, config.loss, 2, models.extractor)
        _check_finite(parts, 2, step)
        _set_lr(opt, lr)
        opt.zero_grad(set_to_none=True)
        parts.total.backward()
        _clip(params, sched.clip_norm)
        opt.step()
        rec = _record(step, 2, parts, lr)
        records.append(rec)
        if on_step:
            on_step(rec)
    return snapshot(models, end, 2, seed, opt_g=opt), records


# --- persistence ---------------------------------------------------------------------

def checkpoint_name(stage: int, step: int) -> str:
    return f"ckpt_stage{stage}_step{step}.safetensors"


def _encode(obj, path: str, tensors: dict):
    """JSON-able skeleton of ``obj`` with tensors swapped for their archive keys."""
    if isinstance(obj, torch.Tensor):
        tensors[path] = obj.detach().contiguous().clone()
        return {"$t": path}
    if isinstance(obj, dict):
        return {"$d": [[k, _encode(v, f"{path}/{k}", tensors)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"$tuple": [_encode(v, f"{path}/{i}", tensors) for i, v in enumerate(obj)]}
    if isinstance(obj, list):
        return [_encode(v, f"{path}/{i}", tensors) for i, v in enumerate(obj)]
    return obj


def _decode(node, tensors: dict):
    if isinstance(node, dict):
        if "$t" in node:
            return tensors[node["$t"]]
        if "$tuple" in node:
            return tuple(_decode(v, tensors) for v in node["$tuple"])
        return {k: _decode(v, tensors) for k, v in node["$d"]}
    if isinstance(node, list):
        return [_decode(v, tensors) for v in node]
    return node


def save_checkpoint(state: CheckpointState, path) -> None:
    """safetensors archive: tensors by hierarchical key, everything else as JSON metadata.

    Unlike torch.save this carries no per-save id or pickle memo, so save-load-save is
    byte-identical.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    skeleton = {f.name: _encode(getattr(state, f.name), f.name, tensors) for f in fields(state)}
    # one metadata key only: the header stores metadata in a hash map with unstable order
    doc = json.dumps({"format": CHECKPOINT_FORMAT, "state": skeleton}, sort_keys=True)
    path.write_bytes(safetensors.torch.save(tensors, metadata={"checkpoint": doc}))


def load_checkpoint(path, config: Optional[RunConfig] = None) -> CheckpointState:
    """Load a checkpoint; with ``config`` given, its model architecture must match."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as fh:
            doc = json.loads((fh.metadata() or {})["checkpoint"])
            if doc.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"unknown checkpoint format {doc.get('format')!r}")
            tensors = {k: fh.get_tensor(k) for k in fh.keys()}
        skeleton = doc["state"]
        state = CheckpointState(**{k: _decode(v, tensors) for k, v in skeleton.items()})
    except Exception as exc:
        raise ConfigError(f"corrupt checkpoint {path}: {exc}") from exc
    if config is not None:
        saved = state.config["model"]
        wanted = asdict(config.model)
        diff = sorted(k for k in wanted if saved.get(k) != wanted[k])
        if diff:
            raise ConfigError(f"checkpoint {path.name} config mismatch on: {', '.join(diff)} "
                              f"(saved {[saved.get(k) for k in diff]}, requested {[wanted[k] for k in diff]})")
    return state


def write_losses_csv(records: Sequence[StepRecord], path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOSS_COLUMNS)
        for r in records:
            writer.writerow([r.step, r.stage] + [repr(getattr(r, k)) for k in LOSS_COLUMNS[2:]])


# --- inference -----------------------------------------------------------------------

def pad_to_multiple(x: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


def make_predictor(models: Models, use_refiner: Optional[bool] = None) -> Callable[[torch.Tensor], torch.Tensor]:
    multiple = models.config.model.pad_multiple

    @torch.no_grad()
    def predict(x):
        xp, (h, w) = pad_to_multiple(x, multiple)
        return models.pipeline(xp, use_refiner)[..., :h, :w]

    return predict
