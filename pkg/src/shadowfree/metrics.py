"""PSNR / SSIM evaluation with an optional pluggable LPIPS backend."""
from __future__ import annotations

import csv
import importlib
import importlib.util
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import torch

from .config import ConfigError
from .losses import ssim_components

PSNR_CAP = 99.0
_LUMA = (0.299, 0.587, 0.114)


def psnr(pred: torch.Tensor, target: torch.Tensor) -> float:
    """10*log10(1/MSE) over all elements, peak 1.0; capped at 99 dB."""
    if pred.shape != target.shape:
        raise ValueError(f"psnr: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    mse = float(((pred.double() - target.double()) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _luma(x):
    w = torch.tensor(_LUMA, dtype=x.dtype).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def ssim(pred: torch.Tensor, target: torch.Tensor, mode: str = "rgb") -> float:
    """Mean local SSIM (Gaussian window 11, sigma 1.5), per channel then averaged."""
    if pred.shape != target.shape:
        raise ValueError(f"ssim: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    x, y = pred.double(), target.double()
    if mode == "luma":
        x, y = _luma(x), _luma(y)
    elif mode != "rgb":
        raise ValueError(f"ssim: unknown mode {mode!r}")
    s, _ = ssim_components(x, y)
    return float(s.mean())


@dataclass
class MetricsReport:
    per_image: List[dict] = field(default_factory=list)  # id, psnr_db, ssim[, lpips]

    @property
    def count(self) -> int:
        return len(self.per_image)

    @property
    def aggregate(self) -> dict:
        if not self.per_image:
            return {}
        keys = [k for k in self.per_image[0] if k != "id"]
        return {k: sum(r[k] for r in self.per_image) / self.count for k in keys}

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = list(self.per_image[0]) if self.per_image else ["id", "psnr_db", "ssim"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys)
            for row in self.per_image:
                writer.writerow([row[k] if k == "id" else f"{row[k]:.6f}" for k in keys])


def load_lpips_backend(spec: str) -> Callable:
    """Resolve ``path/to/file.py[:func]`` or ``package.module[:func]``; default func ``lpips``."""
    target, _, attr = spec.partition(":")
    attr = attr or "lpips"
    try:
        if target.endswith(".py"):
            path = Path(target)
            if not path.is_file():
                raise ConfigError(f"lpips backend file not found: {path}")
            module_spec = importlib.util.spec_from_file_location("_lpips_backend", path)
            module = importlib.util.module_from_spec(module_spec)
            module_spec.loader.exec_module(module)
        else:
            module = importlib.import_module(target)
        return getattr(module, attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load lpips backend {spec!r}: {exc}") from exc


def evaluate_pairs(pairs: Sequence, predict: Callable, ssim_mode: str = "rgb",
                   lpips_fn: Optional[Callable] = None) -> MetricsReport:
    """``pairs`` yields (id, shadow, clean); ``predict`` maps a shadow batch to a restored batch."""
    report = MetricsReport()
    for sid, shadow, clean in sorted(pairs, key=lambda p: p[0]):
        out = predict(shadow)
        row = {"id": sid, "psnr_db": psnr(out, clean), "ssim": ssim(out, clean, ssim_mode)}
        if lpips_fn is not None:
            row["lpips"] = float(lpips_fn(out, clean))
        report.per_image.append(row)
    return report
