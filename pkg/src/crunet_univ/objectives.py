"""Reconstruction/classification losses and cropped image-quality metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F

from .kspace import center_crop

SSIM_WIN = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PSNR_INF = math.inf


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.5
    l2: float = 0.5
    ssim: float = 1.0
    cls: float = 0.025

    def __post_init__(self):
        for name in ("l1", "l2", "ssim", "cls"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    ax = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x: torch.Tensor, y: torch.Tensor, data_range: float | torch.Tensor | None = None) -> torch.Tensor:
    """Mean SSIM over every ``[H, W]`` slice of ``x`` against reference ``y``.

    7x7 Gaussian window (sigma 1.5), valid region only, population
    statistics. ``data_range`` defaults to ``max|y|``.
    """
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    h, w = x.shape[-2:]
    if min(h, w) < SSIM_WIN:
        raise ValueError(f"ssim: images must be at least {SSIM_WIN}x{SSIM_WIN}")
    if data_range is None:
        data_range = y.abs().max().detach()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    win = gaussian_window(dtype=x.dtype).to(x.device)[None, None]
    x = x.reshape(-1, 1, h, w)
    y = y.reshape(-1, 1, h, w)
    mu_x, mu_y = F.conv2d(x, win), F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x**2
    syy = F.conv2d(y * y, win) - mu_y**2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return (num / den).mean()


def rec_loss(rec: torch.Tensor, gnd: torch.Tensor, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted L1 + MSE + (1 - SSIM) on image magnitudes."""
    if rec.shape != gnd.shape:
        raise ValueError(f"rec_loss: shape mismatch {tuple(rec.shape)} vs {tuple(gnd.shape)}")
    rec, gnd = rec.abs(), gnd.abs()
    diff = rec - gnd
    return w.l1 * diff.abs().mean() + w.l2 * (diff**2).mean() + w.ssim * (1 - ssim(rec, gnd))


def cls_loss(logits: Mapping[str, torch.Tensor], labels: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Sum of the contrast, trajectory and acceleration cross-entropies (each batch-mean)."""
    return sum(F.cross_entropy(logits[k], labels[k]) for k in ("contrast", "trajectory", "accel"))


def total_loss(l_rec, l_cls, w: LossWeights = LossWeights()):
    return w.cls * l_cls + l_rec


# --------------------------------------------------------------------------- metrics


def _crop(img: torch.Tensor, fraction: float) -> torch.Tensor:
    h, w = img.shape[-2:]
    return center_crop(img, max(1, round(h * fraction)), max(1, round(w * fraction)))


def psnr(rec, gnd, crop: float = 0.5) -> float:
    rec, gnd = _crop(torch.as_tensor(rec).double(), crop), _crop(torch.as_tensor(gnd).double(), crop)
    mse = float(((rec - gnd) ** 2).mean())
    if mse == 0.0:
        return PSNR_INF
    return 20 * math.log10(float(gnd.max()) / math.sqrt(mse))


def nmse(rec, gnd, crop: float = 0.5) -> float:
    rec, gnd = _crop(torch.as_tensor(rec).double(), crop), _crop(torch.as_tensor(gnd).double(), crop)
    energy = float((gnd**2).sum())
    if energy == 0.0:
        raise ValueError("nmse: ground truth is zero in the evaluated region")
    return float(((rec - gnd) ** 2).sum()) / energy


def ssim_metric(rec, gnd, crop: float = 0.5) -> float:
    rec, gnd = _crop(torch.as_tensor(rec).double(), crop), _crop(torch.as_tensor(gnd).double(), crop)
    if torch.equal(rec, gnd):
        return 1.0
    return float(ssim(rec, gnd))


def case_metrics(rec, gnd, crop: float = 0.5) -> dict[str, float]:
    return {"psnr": psnr(rec, gnd, crop), "ssim": ssim_metric(rec, gnd, crop), "nmse": nmse(rec, gnd, crop)}


# --------------------------------------------------------------------------- report

GROUP_KEYS = ("center_id", "contrast", "trajectory", "accel")


def _mean(rows: list[dict[str, float]]) -> dict[str, float]:
    return {k: sum(r[k] for r in rows) / len(rows) for k in ("psnr", "ssim", "nmse")}


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def metric_report(entries: Iterable[tuple[str, Mapping, Mapping[str, float]]], crop: float) -> dict:
    """Per-case metrics plus means per case id group and overall.

    ``entries`` yields ``(case_id, meta_dict, metrics)``.
    """
    cases, groups = {}, {k: {} for k in GROUP_KEYS}
    rows = []
    for case_id, meta, m in entries:
        cases[case_id] = {**{k: meta[k] for k in GROUP_KEYS}, **m}
        rows.append(m)
        for k in GROUP_KEYS:
            groups[k].setdefault(str(meta[k]), []).append(m)
    if not rows:
        raise ValueError("metric_report: no cases")
    return _jsonable(
        {
            "crop_fraction": crop,
            "n_cases": len(rows),
            "cases": cases,
            "groups": {k: {g: {**_mean(v), "n": len(v)} for g, v in sorted(d.items())} for k, d in groups.items()},
            "overall": _mean(rows),
        }
    )


def write_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
