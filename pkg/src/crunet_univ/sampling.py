"""Undersampling masks: uniform Cartesian, Gaussian Cartesian and pseudo-radial.

Cartesian masks select phase-encode rows (axis ``H``) and keep the full
readout. The ACS block is counted inside the sampling budget, so the
empirical acceleration stays near the nominal one at small matrix sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

TRAJECTORIES = ("uniform", "gaussian", "pseudo_radial")
ACCELS = (8, 16, 24)
GOLDEN_ANGLE = math.pi / ((1 + math.sqrt(5)) / 2)  # ~111.246 deg
ACCEL_TOLERANCE = 0.15


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingMask:
    mask: np.ndarray  # uint8 [T, H, W]
    trajectory: str
    accel: int
    acs: int  # row count (Cartesian) or square side (radial)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.mask.shape)

    def acs_region(self) -> np.ndarray:
        """Boolean ``[H, W]`` map of the fully sampled calibration block."""
        _, h, w = self.mask.shape
        return acs_region(self.trajectory, self.acs, h, w)


def _central(n: int, size: int) -> slice:
    start = n // 2 - size // 2
    return slice(start, start + size)


def acs_region(trajectory: str, acs: int, h: int, w: int) -> np.ndarray:
    region = np.zeros((h, w), dtype=bool)
    if acs <= 0:
        return region
    if trajectory == "pseudo_radial":
        region[_central(h, acs), _central(w, acs)] = True
    else:
        region[_central(h, acs), :] = True
    return region


def default_acs(trajectory: str, accel: int, h: int, w: int) -> int:
    """ACS size that leaves at least half of the budget for the trajectory itself.

    Capped at 20, the calibration size used by the challenge data.
    """
    if trajectory == "pseudo_radial":
        return max(1, min(20, int(math.sqrt(h * w / (2 * accel)))))
    return max(1, min(20, math.ceil(h / accel) // 2))


def _uniform_rows(h: int, accel: int, acs_rows: np.ndarray) -> np.ndarray:
    # Lattice through the k-space center; stride grown until lattice + ACS fits the budget.
    best, best_err = None, math.inf
    for stride in range(accel, max(accel, h) + 1):
        rows = np.zeros(h, dtype=bool)
        rows[h // 2 :: stride] = True
        rows[h // 2 :: -stride] = True
        rows |= acs_rows
        err = abs(h / rows.sum() - accel)
        if err < best_err:
            best, best_err = rows, err
    return best


def _gaussian_rows(h: int, accel: int, acs_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    budget = math.ceil(h / accel)
    n_extra = budget - int(acs_rows.sum())
    rows = acs_rows.copy()
    if n_extra > 0:
        idx = np.arange(h)
        sigma = h / 6
        weight = np.exp(-0.5 * ((idx - h // 2) / sigma) ** 2)
        weight[acs_rows] = 0.0
        picked = rng.choice(h, size=n_extra, replace=False, p=weight / weight.sum())
        rows[picked] = True
    return rows


def _rasterize_spokes(h: int, w: int, angles: np.ndarray, r_max: float | None = None) -> np.ndarray:
    """Nearest-cell rasterization of spokes through the center, out to ``r_max`` cells.

    Offsets are rounded half-to-even, which is odd-symmetric, and clipped so a
    cell's point reflection is always on the grid.
    """
    cy, cx = h // 2, w // 2
    ry = (h - 1) // 2 if h % 2 else h // 2 - 1
    rx = (w - 1) // 2 if w % 2 else w // 2 - 1
    n = int(math.ceil(math.hypot(h, w)))
    radii = 0.5 * np.arange(-n, n + 1)
    if r_max is not None:
        radii = radii[np.abs(radii) <= r_max]
    grid = np.zeros((h, w), dtype=bool)
    for theta in angles:
        dy = np.rint(radii * math.sin(theta)).astype(int)
        dx = np.rint(radii * math.cos(theta)).astype(int)
        keep = (np.abs(dy) <= ry) & (np.abs(dx) <= rx)
        grid[cy + dy[keep], cx + dx[keep]] = True
    return grid


def _radial_frame(h, w, n_spokes, frame, acs_cells, r_max=None) -> np.ndarray:
    angles = frame * GOLDEN_ANGLE + np.arange(n_spokes) * (math.pi / n_spokes)
    return _rasterize_spokes(h, w, angles, r_max) | acs_cells


def _radial_geometry(h: int, w: int, accel: int, acs_cells: np.ndarray) -> tuple[int, float | None]:
    """Spoke count and spoke radius whose frame-0 cell count best matches ``H*W/R``.

    Spokes run to the grid edge whenever a whole number of them lands within
    tolerance; otherwise the first over-budget spoke count is kept and the
    spoke length is trimmed, which matters only for coarse grids.
    """
    budget = h * w / accel
    prev = None
    for n in range(1, 2 * max(h, w)):
        cells = int(_radial_frame(h, w, n, 0, acs_cells).sum())
        if cells >= budget:
            break
        prev = (n, cells)
    else:
        return n, None
    if abs(cells - budget) <= 0.05 * budget:
        return n, None
    if prev is not None and abs(prev[1] - budget) <= 0.05 * budget:
        return prev[0], None
    lo, hi = 0.0, math.hypot(h, w)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _radial_frame(h, w, n, 0, acs_cells, mid).sum() > budget:
            hi = mid
        else:
            lo = mid
    return n, lo


def make_mask(trajectory: str, accel: int, T: int, H: int, W: int, acs: int | None = None, seed: int = 0) -> SamplingMask:
    """Generate a ``[T, H, W]`` sampling mask.

    Uniform masks are identical across frames. Gaussian masks redraw the
    non-ACS rows each frame; pseudo-radial masks rotate the spoke set by the
    golden angle each frame.
    """
    if trajectory not in TRAJECTORIES:
        raise MaskError(f"unknown trajectory {trajectory!r}; expected one of {TRAJECTORIES}")
    if accel not in ACCELS:
        raise MaskError(f"unsupported acceleration {accel}; expected one of {ACCELS}")
    if min(T, H, W) < 1:
        raise MaskError(f"invalid mask shape {(T, H, W)}")
    if acs is None:
        acs = default_acs(trajectory, accel, H, W)
    if acs < 0:
        raise MaskError("acs must be non-negative")

    region = acs_region(trajectory, acs, H, W)
    mask = np.zeros((T, H, W), dtype=np.uint8)
    if trajectory == "pseudo_radial":
        if acs > min(H, W):
            raise MaskError(f"ACS side {acs} exceeds grid {H}x{W}")
        if acs * acs > H * W / accel:
            raise MaskError("acceleration infeasible with requested ACS")
        n_spokes, r_max = _radial_geometry(H, W, accel, region)
        for f in range(T):
            mask[f] = _radial_frame(H, W, n_spokes, f, region, r_max)
        return SamplingMask(mask, trajectory, accel, acs)

    if acs > H:
        raise MaskError(f"ACS lines {acs} exceed H={H}")
    if acs > math.ceil(H / accel):
        raise MaskError("acceleration infeasible with requested ACS")
    acs_rows = region[:, 0].copy()
    if trajectory == "uniform":
        mask[:] = _uniform_rows(H, accel, acs_rows)[None, :, None]
    else:
        rng = np.random.default_rng(seed)
        for f in range(T):
            mask[f] = _gaussian_rows(H, accel, acs_rows, rng)[:, None]
    return SamplingMask(mask, trajectory, accel, acs)


@lru_cache(maxsize=4096)
def cached_mask(trajectory: str, accel: int, T: int, H: int, W: int, acs: int | None, seed: int) -> SamplingMask:
    """Memoized :func:`make_mask`; callers must not mutate the returned array."""
    return make_mask(trajectory, accel, T, H, W, acs, seed)


def extract_acs(ksp, mask: SamplingMask) -> torch.Tensor:
    """Zero k-space outside the ACS block and average over frames: ``[T, C, H, W] -> [C, H, W]``."""
    ksp = torch.as_tensor(ksp)
    region = torch.as_tensor(mask.acs_region())
    return (ksp * region.to(ksp.dtype)).mean(dim=-4)


def empirical_accel(mask) -> float:
    m = mask.mask if isinstance(mask, SamplingMask) else np.asarray(mask)
    n = int(np.count_nonzero(m))
    if n == 0:
        return math.inf
    return m.size / n
