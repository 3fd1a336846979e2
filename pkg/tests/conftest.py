import numpy as np
import pytest
import torch

from shadowfree.config import RunConfig, draw_rng
from shadowfree.data import PairedSample, synth_pair


def synth_samples(count=2, size=32, seed=0):
    out = []
    for i in range(count):
        clean, shadow, _, _ = synth_pair(draw_rng(seed, 7, i), size)
        to_t = lambda a: torch.from_numpy(a.astype(np.float32) / 255).permute(2, 0, 1)[None].contiguous()
        out.append(PairedSample(to_t(shadow), to_t(clean), f"{i:04d}"))
    return out


def tiny_config(**schedule) -> RunConfig:
    cfg = RunConfig()
    m = cfg.model
    m.base_channels, m.blocks_per_level = 8, [1, 1, 1]
    m.refiner_channels, m.refiner_blocks, m.disc_channels = 8, 1, 8
    cfg.schedule.stage1_steps = cfg.schedule.stage2_steps = 4
    cfg.schedule.batch_size = 1
    cfg.augment.crop_size = 32
    for k, v in schedule.items():
        setattr(cfg.schedule, k, v)
    cfg.validate()
    return cfg


@pytest.fixture
def samples():
    return synth_samples()
