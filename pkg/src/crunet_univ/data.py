"""Synthetic dynamic multi-coil cases, the on-disk case format, frame windowing
and the contrast-balanced sampler."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .kspace import fft2c, ifft2c, rss, sens_expand
from .sampling import ACCELS, TRAJECTORIES, SamplingMask, make_mask

CONTRASTS = ("cine", "phase_contrast", "tagging", "t1_map", "t2_map", "black_blood", "t1w", "t2w")
STATIC_CONTRASTS = frozenset({"black_blood", "t1w", "t2w"})

# Tissue intensities per contrast: (body, myocardium, blood pool, static organ).
_TISSUE = {
    "cine": (0.35, 0.45, 1.00, 0.60),
    "phase_contrast": (0.20, 0.30, 0.90, 0.25),
    "tagging": (0.40, 0.70, 0.85, 0.55),
    "t1_map": (0.55, 0.80, 0.40, 0.95),
    "t2_map": (0.30, 0.50, 0.85, 0.45),
    "black_blood": (0.45, 0.90, 0.05, 0.70),
    "t1w": (0.70, 0.60, 0.25, 1.00),
    "t2w": (0.25, 0.55, 0.15, 0.95),
}

# Scanner/center profiles mirroring the multi-center setting of the challenge data.
SCANNER_PROFILES = (
    ("C001", "UIH", "umr780", "3.0T"),
    ("C002", "Siemens", "CIMA.X", "3.0T"),
    ("C003", "UIH", "umr880", "3.0T"),
    ("C004", "Siemens", "Aera", "1.5T"),
    ("C005", "GE", "voyager", "1.5T"),
)

CASE_FORMAT_VERSION = 1


class CaseFormatError(ValueError):
    """Malformed or inconsistent case directory."""


@dataclass(frozen=True)
class ScanMeta:
    vendor: str
    scanner_model: str
    field_strength: str
    contrast: str
    trajectory: str
    accel: int
    center_id: str

    def __post_init__(self):
        for name in ("vendor", "scanner_model", "field_strength", "center_id"):
            if not getattr(self, name):
                raise ValueError(f"ScanMeta.{name} must be non-empty")
        if self.contrast not in CONTRASTS:
            raise ValueError(f"ScanMeta.contrast {self.contrast!r} not in {CONTRASTS}")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"ScanMeta.trajectory {self.trajectory!r} not in {TRAJECTORIES}")
        if self.accel not in ACCELS:
            raise ValueError(f"ScanMeta.accel {self.accel} not in {ACCELS}")

    @property
    def contrast_index(self) -> int:
        return CONTRASTS.index(self.contrast)

    @property
    def trajectory_index(self) -> int:
        return TRAJECTORIES.index(self.trajectory)

    @property
    def accel_index(self) -> int:
        return ACCELS.index(self.accel)


@dataclass
class KSpaceCase:
    """Fully sampled k-space plus the acquisition mask it is evaluated with.

    ``ksp`` is complex ``[T, C, H, W]``; training re-masks it when the
    curriculum draws a different acceleration.
    """

    ksp: torch.Tensor
    mask: SamplingMask
    meta: ScanMeta
    ground_truth: torch.Tensor
    single_frame: bool = False
    case_id: str = ""

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.ksp.shape)

    def undersampled(self, mask: SamplingMask | None = None) -> torch.Tensor:
        m = torch.as_tensor((mask or self.mask).mask)
        return self.ksp * m.unsqueeze(-3).to(self.ksp.dtype)


def validate_case(case: KSpaceCase, atol: float = 1e-5) -> None:
    """Raise ``ValueError`` if any structural invariant of ``case`` is violated."""
    if case.ksp.ndim != 4 or not case.ksp.is_complex():
        raise ValueError(f"ksp must be complex [T,C,H,W], got {tuple(case.ksp.shape)} {case.ksp.dtype}")
    t, _, h, w = case.ksp.shape
    if case.mask.shape != (t, h, w):
        raise ValueError(f"mask shape {case.mask.shape} != {(t, h, w)}")
    if tuple(case.ground_truth.shape) != (t, h, w):
        raise ValueError(f"ground truth shape {tuple(case.ground_truth.shape)} != {(t, h, w)}")
    if not bool(torch.isfinite(case.ksp).all()):
        raise ValueError("ksp contains non-finite values")
    ref = rss(ifft2c(case.ksp)).to(case.ground_truth.dtype)
    err = float((ref - case.ground_truth).abs().max())
    if err > atol * max(1.0, float(ref.abs().max())):
        raise ValueError(f"ground truth differs from rss(ifft2c(ksp)) by {err:.3g}")
    if case.single_frame and t != 1:
        raise ValueError("single_frame flag set on a multi-frame case")


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def phantom(contrast: str, T: int, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """Complex ``[T, H, W]`` phantom: body, static organ, myocardial ring and a beating blood pool."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    yy = (yy - H / 2) / (H / 2)
    xx = (xx - W / 2) / (W / 2)
    body = (rng.uniform(0.62, 0.72), rng.uniform(0.72, 0.82))
    organ_c = (rng.uniform(0.15, 0.30), rng.uniform(-0.55, -0.40))
    organ_r = (rng.uniform(0.12, 0.18), rng.uniform(0.15, 0.22))
    heart_c = (rng.uniform(-0.15, 0.0), rng.uniform(0.05, 0.25))
    r0 = rng.uniform(0.16, 0.22)
    wall = rng.uniform(0.06, 0.09)
    amp = rng.uniform(0.12, 0.20)
    phase_coef = rng.normal(scale=0.6, size=3)
    b, m, p, o = _TISSUE[contrast]

    phase = np.exp(1j * (phase_coef[0] + phase_coef[1] * yy + phase_coef[2] * xx))
    out = np.zeros((T, H, W), dtype=np.complex128)
    for t in range(T):
        r = r0 * (1.0 + amp * math.sin(2 * math.pi * t / T)) if T > 1 else r0
        img = np.where(_ellipse(yy, xx, 0.0, 0.0, *body), b, 0.0)
        img = np.where(_ellipse(yy, xx, *organ_c, *organ_r), o, img)
        img = np.where(_ellipse(yy, xx, *heart_c, r + wall, r + wall), m, img)
        img = np.where(_ellipse(yy, xx, *heart_c, r, r), p, img)
        out[t] = img * phase
    return out


def coil_maps(C: int, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-bump sensitivities on a ring around the FOV, normalized per pixel."""
    if C == 1:
        return np.ones((1, H, W), dtype=np.complex128)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    yy = (yy - H / 2) / (H / 2)
    xx = (xx - W / 2) / (W / 2)
    offset = rng.uniform(0, 2 * np.pi)
    maps = np.empty((C, H, W), dtype=np.complex128)
    for c in range(C):
        ang = offset + 2 * np.pi * c / C
        cy, cx = 1.1 * np.sin(ang), 1.1 * np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.8**2))
        maps[c] = mag * np.exp(1j * (rng.uniform(-np.pi, np.pi) + 0.5 * (yy * np.cos(ang) + xx * np.sin(ang))))
    return maps / np.sqrt((np.abs(maps) ** 2).sum(axis=0, keepdims=True))


def generate_phantom_case(
    meta: ScanMeta,
    T: int,
    C: int,
    H: int,
    W: int,
    seed: int,
    noise_std: float = 0.0,
    acs: int | None = None,
    case_id: str = "",
) -> KSpaceCase:
    """Simulate one case. Static contrasts collapse to a single frame.

    Geometry, coil maps and noise come from ``seed`` only, so two contrasts
    with the same seed share geometry and differ in tissue intensities.
    """
    if min(T, C, H, W) < 1:
        raise ValueError(f"invalid dims T={T} C={C} H={H} W={W}")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    static = meta.contrast in STATIC_CONTRASTS
    if static:
        T = 1
    rng = np.random.default_rng(seed)
    img = phantom(meta.contrast, T, H, W, rng)
    sens = coil_maps(C, H, W, rng)
    ksp = fft2c(sens_expand(torch.from_numpy(img), torch.from_numpy(sens)))
    if noise_std > 0:
        noise = rng.normal(scale=noise_std, size=(2,) + tuple(ksp.shape))
        ksp = ksp + torch.from_numpy(noise[0] + 1j * noise[1])
    ksp = ksp.to(torch.complex64)
    gt = rss(ifft2c(ksp)).to(torch.float32)
    mask = make_mask(meta.trajectory, meta.accel, T, H, W, acs, seed)
    return KSpaceCase(ksp, mask, meta, gt, single_frame=static, case_id=case_id)


def expand_static(case: KSpaceCase) -> KSpaceCase:
    """Mark a frame-less acquisition as a one-frame sequence (no duplication)."""
    if case.ksp.shape[0] == 1:
        return replace(case, single_frame=True)
    return case


# --------------------------------------------------------------------------- windows


@dataclass(frozen=True)
class TrainingWindow:
    frames: tuple[int, ...]
    target_index: int | None  # position inside ``frames``; None means every frame is a target

    @property
    def target_frame(self) -> int | None:
        return None if self.target_index is None else self.frames[self.target_index]


WINDOW = 5
CLIP = 12


def win5_window(T: int, target: int) -> TrainingWindow:
    if T < WINDOW:
        return TrainingWindow(tuple(range(T)), None)
    start = min(max(target - WINDOW // 2, 0), T - WINDOW)
    return TrainingWindow(tuple(range(start, start + WINDOW)), target - start)


def window_frames(T: int, policy: str, seed: int | None = None) -> list[TrainingWindow]:
    """Frame windows for a ``T``-frame sequence.

    ``clip12``: one random contiguous 12-frame clip (whole sequence if T <= 12).
    ``win5``: one 5-frame window per target frame, shifted inward at the ends.
    """
    if policy == "clip12":
        if T <= CLIP:
            return [TrainingWindow(tuple(range(T)), None)]
        start = int(np.random.default_rng(seed).integers(0, T - CLIP + 1))
        return [TrainingWindow(tuple(range(start, start + CLIP)), None)]
    if policy == "win5":
        if T < WINDOW:
            return [TrainingWindow(tuple(range(T)), None)]
        return [win5_window(T, t) for t in range(T)]
    raise ValueError(f"unknown window policy {policy!r}")


# --------------------------------------------------------------------------- sampler


def balanced_sampler(labels: Sequence[str], samples_per_epoch: int, seed: int) -> Iterator[int]:
    """Yield ``samples_per_epoch`` dataset indices with every class equally likely.

    ``labels[i]`` is the class (contrast) of item ``i``. A class is drawn
    uniformly first, then an item uniformly with replacement inside it.
    """
    classes: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        classes.setdefault(lab, []).append(i)
    if not classes:
        raise ValueError("balanced_sampler: empty dataset")
    keys = sorted(classes)
    rng = np.random.default_rng(seed)
    for _ in range(samples_per_epoch):
        members = classes[keys[int(rng.integers(len(keys)))]]
        yield members[int(rng.integers(len(members)))]


# --------------------------------------------------------------------------- IO


def _write_bin(path: Path, arr: np.ndarray, dtype: str) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes())


def _read_bin(path: Path, shape: Sequence[int], dtype: str) -> np.ndarray:
    dt = np.dtype(dtype)
    expected = int(np.prod(shape)) * dt.itemsize
    if not path.exists():
        raise CaseFormatError(f"{path.name}: missing payload")
    raw = path.read_bytes()
    if len(raw) != expected:
        raise CaseFormatError(
            f"{path.name}: header shape {tuple(shape)} needs {expected} bytes, file has {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def save_case(case: KSpaceCase, path: str | Path) -> Path:
    """Write ``meta`` (JSON), ``ksp.bin``, ``mask.bin`` and ``gt.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    t, c, h, w = case.ksp.shape
    header = {
        "format_version": CASE_FORMAT_VERSION,
        "case_id": case.case_id,
        **asdict(case.meta),
        "shape": {"T": t, "C": c, "H": h, "W": w},
        "dtype": {"ksp": "<c8 (interleaved <f4 real, imag)", "mask": "u1", "gt": "<f4"},
        "mask": {"trajectory": case.mask.trajectory, "accel": case.mask.accel, "acs": case.mask.acs},
        "single_frame": case.single_frame,
    }
    (path / "meta").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ksp = case.ksp.detach().cpu().to(torch.complex64).numpy()
    _write_bin(path / "ksp.bin", ksp.view(np.float32), "<f4")
    _write_bin(path / "mask.bin", case.mask.mask, "u1")
    _write_bin(path / "gt.bin", case.ground_truth.detach().cpu().numpy(), "<f4")
    return path


def load_case(path: str | Path) -> KSpaceCase:
    path = Path(path)
    meta_path = path / "meta"
    if not meta_path.exists():
        raise CaseFormatError(f"{path}: no meta header")
    try:
        header = json.loads(meta_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CaseFormatError(f"{meta_path}: unreadable header ({exc})") from exc
    try:
        shp = header["shape"]
        t, c, h, w = (int(shp[k]) for k in ("T", "C", "H", "W"))
        meta = ScanMeta(**{f: header[f] for f in ScanMeta.__dataclass_fields__})
        mk = header["mask"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseFormatError(f"{meta_path}: invalid header field ({exc})") from exc

    ksp = _read_bin(path / "ksp.bin", (t, c, h, w, 2), "<f4")
    mask = _read_bin(path / "mask.bin", (t, h, w), "u1")
    gt = _read_bin(path / "gt.bin", (t, h, w), "<f4")
    ksp_t = torch.view_as_complex(torch.from_numpy(ksp.astype(np.float32)))
    return KSpaceCase(
        ksp=ksp_t,
        mask=SamplingMask(mask, mk["trajectory"], int(mk["accel"]), int(mk["acs"])),
        meta=meta,
        ground_truth=torch.from_numpy(gt.astype(np.float32)),
        single_frame=bool(header.get("single_frame", False)),
        case_id=str(header.get("case_id", path.name)),
    )


def load_dataset(root: str | Path) -> list[KSpaceCase]:
    """Load every case directory under ``root`` in sorted order."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "meta").exists())
    if not dirs:
        raise CaseFormatError(f"{root}: no case directories")
    return [load_case(d) for d in dirs]


@dataclass
class SimulationSpec:
    cases: int
    H: int = 64
    W: int = 64
    frames: int = 8
    coils: int = 4
    contrasts: Sequence[str] = ("cine",)
    trajectories: Sequence[str] = TRAJECTORIES
    accels: Sequence[int] = ACCELS
    noise_std: float = 0.0
    seed: int = 0


def simulate_dataset(spec: SimulationSpec) -> list[KSpaceCase]:
    """Cases stratified over the contrast x trajectory x accel grid, cycling in order."""
    grid = [(c, tr, a) for c in spec.contrasts for tr in spec.trajectories for a in spec.accels]
    out = []
    for k in range(spec.cases):
        contrast, traj, accel = grid[k % len(grid)]
        center, vendor, model, field_ = SCANNER_PROFILES[k % len(SCANNER_PROFILES)]
        meta = ScanMeta(vendor, model, field_, contrast, traj, int(accel), center)
        case_seed = spec.seed * 100_003 + k
        out.append(
            generate_phantom_case(
                meta, spec.frames, spec.coils, spec.H, spec.W, case_seed, spec.noise_std, case_id=f"case{k:04d}"
            )
        )
    return out
