"""Unrolled reconstruction model: SME, prompt-guided CRUNet cascades with hard
data consistency, and the auxiliary classifier heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from ..kspace import fft2c, ifft2c, rss, sens_expand, sens_reduce
from ..prompts import PromptRefiner
from .crunet import CascadeFeatureStore, CRUNet, PromptContext
from .layers import conv3x3

TASKS = ("contrast", "trajectory", "accel")


@dataclass
class ModelConfig:
    num_cascades: int = 6
    channels: int = 64
    dilations: tuple[int, int, int] = (1, 2, 4)
    text_dim: int = 64
    prompt_size: int = 16
    n_contrast: int = 8
    n_trajectory: int = 3
    n_accel: int = 3
    sme_channels: int = 16
    head_hidden: int = 64
    dc_mode: str = "hard"

    def __post_init__(self):
        self.dilations = tuple(self.dilations)
        if len(self.dilations) != 3:
            raise ValueError("dilations must list two levels plus the bottleneck")
        for name in ("num_cascades", "channels", "text_dim", "prompt_size", "sme_channels", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dc_mode != "hard":
            raise ValueError(f"unsupported dc_mode {self.dc_mode!r}")

    @property
    def n_classes(self) -> dict[str, int]:
        return {"contrast": self.n_contrast, "trajectory": self.n_trajectory, "accel": self.n_accel}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d


# --------------------------------------------------------------------------- SME


def to_channels(img: torch.Tensor) -> torch.Tensor:
    """Complex ``[..., H, W]`` -> real ``[..., 2, H, W]``."""
    return torch.view_as_real(img).movedim(-1, -3)


def to_complex(x: torch.Tensor) -> torch.Tensor:
    if x.dtype in (torch.bfloat16, torch.float16):
        x = x.float()
    return torch.view_as_complex(x.movedim(-3, -1).contiguous())


def normalize_maps(maps: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Scale ``[..., C, H, W]`` maps to unit RSS at every pixel with any nonzero coil."""
    norm = rss(maps).unsqueeze(-3)
    return torch.where(norm > eps, maps / norm.clamp_min(eps), torch.zeros_like(maps))


class SensitivityEstimator(nn.Module):
    """Two-level conv encoder-decoder that refines per-coil ACS images, then RSS-normalizes."""

    def __init__(self, channels: int = 16):
        super().__init__()
        c = channels
        self.enc1 = nn.Sequential(conv3x3(2, c), nn.ReLU(), conv3x3(c, c), nn.ReLU())
        self.enc2 = nn.Sequential(conv3x3(c, 2 * c, stride=2), nn.ReLU(), conv3x3(2 * c, 2 * c), nn.ReLU())
        self.dec = nn.Sequential(conv3x3(3 * c, c), nn.ReLU(), conv3x3(c, 2))

    def forward(self, acs_img: torch.Tensor) -> torch.Tensor:
        """``acs_img``: complex ``[B, C, H, W]`` -> normalized maps ``[B, C, H, W]``."""
        b, c, h, w = acs_img.shape
        scale = acs_img.abs().amax(dim=(-3, -2, -1), keepdim=True)
        if bool((scale == 0).any()):
            raise ValueError("SME: all-zero ACS signal")
        x = to_channels(acs_img / scale).reshape(b * c, 2, h, w)
        pad_h, pad_w = h % 2, w % 2
        e1 = self.enc1(F.pad(x, (0, pad_w, 0, pad_h)) if pad_h or pad_w else x)
        e2 = F.interpolate(self.enc2(e1), size=e1.shape[-2:], mode="bilinear", align_corners=False)
        y = x + self.dec(torch.cat([e1, e2], dim=1))[..., :h, :w]
        return normalize_maps(to_complex(y.reshape(b, c, 2, h, w)))


def sme_estimate(sme: SensitivityEstimator, acs_img: torch.Tensor) -> torch.Tensor:
    return sme(acs_img if acs_img.ndim == 4 else acs_img.unsqueeze(0))


# --------------------------------------------------------------------------- DC


def dc_kspace(ksp, ksp_meas, mask):
    """Replace multi-coil k-space at sampled entries with the measurements."""
    m = mask.unsqueeze(-3).to(ksp.dtype)
    return (1 - m) * ksp + m * ksp_meas


def data_consistency(img, ksp_meas, mask, sens):
    """Hard k-space replacement, then conjugate-weighted coil combination.

    ``img`` ``[..., T, H, W]``, ``ksp_meas`` ``[..., T, C, H, W]``, ``mask``
    ``[..., T, H, W]`` and ``sens`` ``[..., C, H, W]``. The replacement itself
    is exact; with more than one coil the final combination projects the coil
    images onto the map span, so a re-expanded result only approximates the
    measurements.
    """
    k = dc_kspace(fft2c(sens_expand(img, sens)), ksp_meas, mask)
    return sens_reduce(ifft2c(k), sens)


# --------------------------------------------------------------------------- heads


def _standardize(p: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Parameter-free layer norm over the channel axis."""
    return F.layer_norm(p, p.shape[-1:], eps=eps)



class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, hidden: int, n_out: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_out)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))

    @torch.no_grad()
    def widen(self, in_dim: int) -> None:
        """Grow the input dimension; new input columns start at zero."""
        old = self.fc1
        if in_dim < old.in_features:
            raise ValueError("cannot shrink a classifier head")
        new = nn.Linear(in_dim, old.out_features, dtype=old.weight.dtype, device=old.weight.device)
        new.weight.zero_()
        new.weight[:, : old.in_features] = old.weight
        new.bias.copy_(old.bias)
        self.fc1 = new


# --------------------------------------------------------------------------- model


@dataclass
class ReconInput:
    """One batch of undersampled windows with their conditioning."""

    ksp: torch.Tensor  # masked multi-coil k-space [B, T, C, H, W] (complex)
    mask: torch.Tensor  # [B, T, H, W]
    acs_region: torch.Tensor  # [B, H, W] bool
    scanner_emb: torch.Tensor  # [B, D]
    acquisition_emb: torch.Tensor  # [B, D]
    contrast_idx: torch.Tensor  # [B] long
    trajectory_idx: torch.Tensor
    accel_idx: torch.Tensor
    target_index: int | None = None  # frame to return; None returns the whole window


@dataclass
class ReconOutput:
    recon: torch.Tensor  # magnitude [B, T', H, W], de-normalized
    logits: dict[str, torch.Tensor]
    prompt_states: list[tuple[torch.Tensor, torch.Tensor]]
    image: torch.Tensor  # complex [B, T, H, W], normalized units
    sens: torch.Tensor
    scale: torch.Tensor  # [B]
    stream_logits: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)


class CRUNetMRUniv(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.sme = SensitivityEstimator(cfg.sme_channels)
        self.scanner_refiner = PromptRefiner(cfg.text_dim, cfg.channels)
        self.acquisition_refiner = PromptRefiner(cfg.text_dim, cfg.channels)
        self.cascades = nn.ModuleList(self._new_cascade(i) for i in range(cfg.num_cascades))
        in_dim = cfg.num_cascades * cfg.channels
        self.heads_u = nn.ModuleDict({t: ClassifierHead(in_dim, cfg.head_hidden, n) for t, n in cfg.n_classes.items()})
        self.heads_s = nn.ModuleDict({t: ClassifierHead(in_dim, cfg.head_hidden, n) for t, n in cfg.n_classes.items()})

    def _new_cascade(self, index: int) -> CRUNet:
        c = self.cfg
        return CRUNet(index, c.channels, c.dilations, c.prompt_size, c.n_trajectory, c.n_contrast, c.n_accel)

    @property
    def num_cascades(self) -> int:
        return len(self.cascades)

    def context(self, inp: ReconInput) -> PromptContext:
        return PromptContext(
            scanner=self.scanner_refiner(inp.scanner_emb),
            acquisition=self.acquisition_refiner(inp.acquisition_emb),
            traj_idx=inp.trajectory_idx,
            contrast_idx=inp.contrast_idx,
            accel_idx=inp.accel_idx,
        )

    def prepare(self, inp: ReconInput):
        """Normalize, estimate maps and form the coil-combined zero-filled image."""
        coil = ifft2c(inp.ksp)
        scale = coil.abs().amax(dim=(-4, -3, -2, -1))
        if bool((scale == 0).any()):
            raise ValueError("model input has all-zero k-space")
        s = scale.to(coil.dtype)[:, None, None, None, None]
        ksp = inp.ksp / s
        coil = coil / s
        region = inp.acs_region.unsqueeze(-3).unsqueeze(-4).to(ksp.dtype)  # [B, 1, 1, H, W]
        acs = (ksp * region).mean(dim=1)
        sens = self.sme(ifft2c(acs))
        x0 = sens_reduce(coil, sens)
        return ksp, sens, x0, scale

    def classify(self, p_u: list[torch.Tensor], p_s: list[torch.Tensor]):
        # Each cascade's embedding is standardized on its own: the raw prompts
        # sit near (1, 0) with class differences of order 1e-3, too small for
        # the heads to read. Per-chunk statistics keep growth logit-neutral.
        u = torch.cat([_standardize(p) for p in p_u], dim=-1)
        s = torch.cat([_standardize(p) for p in p_s], dim=-1)
        streams = {
            "u": {t: self.heads_u[t](u) for t in TASKS},
            "s": {t: self.heads_s[t](s) for t in TASKS},
        }
        merged = {t: 0.5 * (streams["u"][t] + streams["s"][t]) for t in TASKS}
        return merged, streams

    def forward(self, inp: ReconInput, feature_hook=None) -> ReconOutput:
        """``feature_hook(i, store)``, if given, runs after cascade ``i`` stores its features."""
        ksp, sens, x, scale = self.prepare(inp)
        mask = inp.mask.to(ksp.real.dtype)
        ctx = self.context(inp)
        store = CascadeFeatureStore()
        hiddens: dict[str, torch.Tensor] = {}
        pu_prev = None
        p_us, p_ss, states = [], [], []
        for block in self.cascades:
            refined, features, hiddens, p_u, p_s = block(to_channels(x), ctx, store, hiddens, pu_prev)
            x = data_consistency(to_complex(refined), ksp, mask, sens)
            store.push(features)
            if feature_hook is not None:
                feature_hook(len(store) - 1, store)
            pu_prev = p_u
            p_us.append(p_u)
            p_ss.append(p_s)
            states.append((p_u, p_s))
        recon = x.abs() * scale[:, None, None, None]
        if inp.target_index is not None:
            recon = recon[:, inp.target_index : inp.target_index + 1]
        logits, streams = self.classify(p_us, p_ss)
        return ReconOutput(recon, logits, states, x, sens, scale, streams)


def model_forward(model: CRUNetMRUniv, inp: ReconInput) -> ReconOutput:
    return model(inp)


@torch.no_grad()
def grow_cascades(model: CRUNetMRUniv, n_new: int) -> CRUNetMRUniv:
    """Append ``n_new`` freshly initialized cascades in place and widen the heads.

    Existing parameters are untouched; the new head input columns are zero so
    the logits do not change at the moment of growth.
    """
    if n_new <= 0:
        raise ValueError("n_new must be positive")
    ref = next(model.parameters())
    for _ in range(n_new):
        model.cascades.append(model._new_cascade(len(model.cascades)).to(dtype=ref.dtype, device=ref.device))
    model.cfg = _with_cascades(model.cfg, len(model.cascades))
    in_dim = model.num_cascades * model.cfg.channels
    for heads in (model.heads_u, model.heads_s):
        for head in heads.values():
            head.widen(in_dim)
    return model


def _with_cascades(cfg: ModelConfig, n: int) -> ModelConfig:
    d = cfg.to_dict()
    d["num_cascades"] = n
    return ModelConfig(**d)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
