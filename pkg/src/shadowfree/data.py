"""Paired shadow/clean datasets, paired augmentation and a synthetic pair generator."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .config import AugmentSpec, DataError, draw_rng

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class PairedSample:
    shadow: torch.Tensor  # (1, 3, H, W) in [0, 1]
    clean: torch.Tensor
    id: str

    def __post_init__(self):
        if self.shadow.shape != self.clean.shape:
            raise DataError(f"{self.id}: shadow {tuple(self.shadow.shape)} and clean "
                            f"{tuple(self.clean.shape)} differ in size")
        if self.shadow.dim() != 4 or self.shadow.shape[:2] != (1, 3):
            raise DataError(f"{self.id}: expected a (1, 3, H, W) RGB image, got {tuple(self.shadow.shape)}")


def read_image(path) -> torch.Tensor:
    """Decode an image file to a (1, 3, H, W) float32 tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DataError(f"{Path(path).name}: cannot decode image ({exc})") from exc
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0).contiguous()


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor in [0, 1] -> (H, W, 3) uint8 array."""
    if img.dim() == 4:
        img = img[0]
    arr = img.detach().clamp(0, 1).permute(1, 2, 0).cpu().double().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def write_image(img: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def load_paired_dataset(root) -> List[PairedSample]:
    root = Path(root)
    in_dir, gt_dir = root / "input", root / "gt"
    for d in (in_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"missing directory {d}")

    def stems(d):
        return {p.stem: p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}

    inputs, gts = stems(in_dir), stems(gt_dir)
    samples = []
    for stem in sorted(inputs):
        if stem not in gts:
            raise DataError(f"{stem}: input has no ground-truth partner in {gt_dir}")
        samples.append(PairedSample(read_image(inputs[stem]), read_image(gts[stem]), stem))
    orphans = sorted(set(gts) - set(inputs))
    if orphans:
        raise DataError(f"{orphans[0]}: ground truth has no input partner in {in_dir}")
    return samples


def _transform(img: torch.Tensor, top: int, left: int, size: int, k: int, hflip: bool, vflip: bool):
    out = img[..., top:top + size, left:left + size]
    if k:
        out = torch.rot90(out, k, dims=(-2, -1))
    if hflip:
        out = torch.flip(out, dims=(-1,))
    if vflip:
        out = torch.flip(out, dims=(-2,))
    return out.contiguous()


def draw_augmentation(spec: AugmentSpec, height: int, width: int, rng: np.random.Generator):
    """Sample (top, left, quarter_turns, hflip, vflip); each transform drawn independently."""
    if spec.crop_size > min(height, width):
        raise DataError(f"crop size {spec.crop_size} exceeds image size {height}x{width}")
    top = int(rng.integers(0, height - spec.crop_size + 1))
    left = int(rng.integers(0, width - spec.crop_size + 1))
    k = int(rng.choice(spec.rotations)) // 90
    hflip = bool(spec.hflip and rng.random() < 0.5)
    vflip = bool(spec.vflip and rng.random() < 0.5)
    return top, left, k, hflip, vflip


def augment(sample: PairedSample, spec: AugmentSpec, rng: np.random.Generator) -> PairedSample:
    """Apply one randomly drawn crop/rotation/flip identically to both images."""
    _, _, h, w = sample.shadow.shape
    params = draw_augmentation(spec, h, w, rng)
    return PairedSample(
        _transform(sample.shadow, *params[:2], spec.crop_size, *params[2:]),
        _transform(sample.clean, *params[:2], spec.crop_size, *params[2:]),
        sample.id,
    )


def effective_augment(spec: AugmentSpec, samples: Sequence[PairedSample]) -> AugmentSpec:
    """Clamp crop_size to the smallest image, warning when it had to shrink."""
    smallest = min(min(s.shadow.shape[-2:]) for s in samples)
    if spec.crop_size <= smallest:
        return spec
    log.warning("crop_size %d exceeds smallest image side %d; clamping", spec.crop_size, smallest)
    return AugmentSpec(smallest, list(spec.rotations), spec.hflip, spec.vflip)


# --- synthetic pairs --------------------------------------------------------

def _smooth_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((size, size, 3))
    for c in range(3):
        a, b, c0 = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.3, 0.8)
        fx, fy, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        img[..., c] = c0 + a * xx + b * yy + 0.1 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    canvas = Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(3, 8))):
        x0, y0 = rng.uniform(0, size, 2)
        w, h = rng.uniform(0.1, 0.4, 2) * size
        color = tuple(int(v) for v in rng.integers(30, 256, 3))
        box = [x0, y0, x0 + w, y0 + h]
        if rng.random() < 0.5:
            draw.rectangle(box, fill=color)
        else:
            draw.ellipse(box, fill=color)
    return np.asarray(canvas, dtype=np.float64)


MIN_SHADOW_COVERAGE = 0.05


def _shadow_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    # degenerate polygons can cover almost nothing; redraw those
    while True:
        mask = _draw_shadow_shape(rng, size)
        if mask.mean() >= MIN_SHADOW_COVERAGE:
            return mask


def _draw_shadow_shape(rng: np.random.Generator, size: int) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    cx, cy = rng.uniform(0.3, 0.7, 2) * size
    if rng.random() < 0.5:
        rx, ry = rng.uniform(0.15, 0.35, 2) * size
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    else:
        n = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = rng.uniform(0.2, 0.4, n) * size
        draw.polygon([(cx + r * np.cos(t), cy + r * np.sin(t)) for t, r in zip(angles, radii)], fill=255)
    return np.asarray(canvas, dtype=np.float64) / 255.0


def synth_pair(rng: np.random.Generator, size: int):
    """Return (clean, shadow, core_mask, soft_mask); images are uint8 HxWx3.

    ``soft_mask`` is exactly zero wherever the shadow leaves the image untouched.
    """
    clean = _smooth_texture(rng, size)
    core = _shadow_mask(rng, size)
    sigma = rng.uniform(1.0, 5.0)
    soft = np.clip(gaussian_filter(core, sigma, mode="constant", truncate=3.0), 0.0, 1.0)
    atten = rng.uniform(0.3, 0.7, 3)
    factor = 1.0 - soft[..., None] * (1.0 - atten)
    shadow = np.round(clean * factor)
    return clean.astype(np.uint8), shadow.astype(np.uint8), core > 0.5, soft


def synth_generate(count: int, size: int, seed: int, out) -> None:
    if size < 32:
        raise DataError(f"synthetic image size must be >= 32, got {size}")
    out = Path(out)
    for sub in ("input", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(count)))
    for i in range(count):
        clean, shadow, _, _ = synth_pair(draw_rng(seed, 7, i), size)
        name = f"{i:0{width}d}.png"
        Image.fromarray(shadow).save(out / "input" / name)
        Image.fromarray(clean).save(out / "gt" / name)
