"""Text and spatial prompts.

Text prompts are rendered from scan metadata, embedded by a frozen text
encoder and injected with FiLM. Spatial prompts come from three learnable
pools indexed by trajectory, contrast and acceleration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

SCANNER_TEMPLATE = "{vendor} {model} MRI scanner at {field} field strength"
ACQUISITION_TEMPLATE = (
    "MRI scan of {contrast}, sampled using {trajectory} trajectory with an acceleration factor of {accel}"
)
HASH_ENCODER_SEED = 20250917


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class TextPrompt:
    scanner_text: str
    acquisition_text: str


def render_prompts(meta) -> TextPrompt:
    return TextPrompt(
        scanner_text=SCANNER_TEMPLATE.format(vendor=meta.vendor, model=meta.scanner_model, field=meta.field_strength),
        acquisition_text=ACQUISITION_TEMPLATE.format(
            contrast=meta.contrast, trajectory=meta.trajectory, accel=meta.accel
        ),
    )


class TextEncoder(Protocol):
    dim: int

    def __call__(self, text: str) -> torch.Tensor: ...


class HashTextEncoder:
    """Frozen stand-in for a clinical language model.

    SHA-256 of ``seed:text`` seeds a Gaussian draw that is normalized to unit
    length. Deterministic across processes (no reliance on ``hash()``).
    """

    def __init__(self, dim: int = 64, seed: int = HASH_ENCODER_SEED):
        self.dim = dim
        self.seed = seed

    def __call__(self, text: str) -> torch.Tensor:
        if not text:
            raise PromptError("cannot embed an empty prompt")
        digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint32))
        v = rng.standard_normal(self.dim)
        return torch.from_numpy(v / np.linalg.norm(v)).to(torch.float32)


class TransformersTextEncoder:
    """Adapter for a pretrained Hugging Face encoder (CLS embedding, frozen).

    Only constructed when a run config asks for it; ``dim`` is the model's
    hidden size and must match ``ModelConfig.text_dim``.
    """

    def __init__(self, name: str = "emilyalsentzer/Bio_ClinicalBERT"):
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(name)
        self.model = AutoModel.from_pretrained(name).eval()
        self.dim = self.model.config.hidden_size
        self._cache: dict[str, torch.Tensor] = {}

    @torch.no_grad()
    def __call__(self, text: str) -> torch.Tensor:
        if not text:
            raise PromptError("cannot embed an empty prompt")
        if text not in self._cache:
            tok = self.tokenizer(text, return_tensors="pt")
            self._cache[text] = self.model(**tok).last_hidden_state[0, 0].float()
        return self._cache[text]


TEXT_ENCODERS = {"hash": HashTextEncoder, "transformers": TransformersTextEncoder}


def build_text_encoder(name: str, **kwargs) -> TextEncoder:
    try:
        return TEXT_ENCODERS[name](**kwargs)
    except KeyError:
        raise PromptError(f"unknown text encoder {name!r}; known: {sorted(TEXT_ENCODERS)}") from None


_DEFAULT_ENCODER = HashTextEncoder()


def embed_text(text: str, encoder: TextEncoder | None = None) -> torch.Tensor:
    return (encoder or _DEFAULT_ENCODER)(text)


class PromptRefiner(nn.Sequential):
    """Trainable MLP from the frozen text embedding to the model width."""

    def __init__(self, text_dim: int, channels: int):
        super().__init__(nn.Linear(text_dim, channels), nn.ReLU(), nn.Linear(channels, channels))


class FiLM(nn.Module):
    """Per-frame, per-channel affine modulation generated from ``[prompt, GAP(features)]``.

    The last generator layer starts near zero with bias ``(1, 0)`` so the
    block is close to identity at initialization.
    """

    def __init__(self, channels: int, init_scale: float = 0.01):
        super().__init__()
        self.channels = channels
        self.hidden = nn.Linear(2 * channels, channels)
        self.out = nn.Linear(channels, 2 * channels)
        with torch.no_grad():
            self.out.weight.mul_(init_scale)
            self.out.bias.zero_()
            self.out.bias[:channels] = 1.0

    def forward(self, x: torch.Tensor, prompt: torch.Tensor):
        """``x``: ``[B, T, C, H, W]``, ``prompt``: ``[B, C]`` -> ``(x', W_P, B_P)``."""
        b, t, c = x.shape[:3]
        if c != self.channels or prompt.shape != (b, c):
            raise PromptError(f"FiLM expects features with {self.channels} channels and prompt [{b}, {c}]")
        pooled = x.mean(dim=(-2, -1))
        cond = torch.cat([prompt.unsqueeze(1).expand(b, t, c), pooled], dim=-1)
        w_p, b_p = self.out(F.relu(self.hidden(cond))).chunk(2, dim=-1)
        return w_p[..., None, None] * x + b_p[..., None, None], w_p, b_p


def film_modulate(film: FiLM, features: torch.Tensor, prompt: torch.Tensor):
    return film(features, prompt)


def update_pu(w_p: torch.Tensor, b_p: torch.Tensor) -> torch.Tensor:
    """Undersampling prompt: temporal mean of ``W_P + B_P`` -> ``[B, C]``."""
    return (w_p + b_p).mean(dim=1)


class SpatialPromptPool(nn.Module):
    """Learnable pools of ``[C, H0, W0]`` prompts for trajectory, contrast and acceleration."""

    def __init__(self, channels: int, size: int = 16, n_traj: int = 3, n_contrast: int = 8, n_accel: int = 3, std: float = 0.02):
        super().__init__()
        self.trajectory = nn.Parameter(std * torch.randn(n_traj, channels, size, size))
        self.contrast = nn.Parameter(std * torch.randn(n_contrast, channels, size, size))
        self.accel = nn.Parameter(std * torch.randn(n_accel, channels, size, size))

    def assemble(self, i_s: torch.Tensor, i_c: torch.Tensor, i_r: torch.Tensor) -> torch.Tensor:
        """``P_S`` for each batch item: ``[B, 3, C, H0, W0]``."""
        for name, idx, pool in (("trajectory", i_s, self.trajectory), ("contrast", i_c, self.contrast), ("accel", i_r, self.accel)):
            if idx.min() < 0 or idx.max() >= pool.shape[0]:
                raise PromptError(f"{name} index out of pool range [0, {pool.shape[0]})")
        return torch.stack([self.trajectory[i_s], self.contrast[i_c], self.accel[i_r]], dim=1)


class PromptBlock(nn.Module):
    """Adds a feature-weighted mix of the three selected pool prompts to the features."""

    def __init__(self, channels: int, size: int = 16, n_traj: int = 3, n_contrast: int = 8, n_accel: int = 3):
        super().__init__()
        self.pool = SpatialPromptPool(channels, size, n_traj, n_contrast, n_accel)
        self.weight = nn.Linear(channels, 3)

    def mix(self, features: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.weight(features.mean(dim=(-2, -1))), dim=-1)

    def forward(self, x: torch.Tensor, i_s, i_c, i_r, alpha: torch.Tensor | None = None):
        """``x``: ``[B, T, C, h, w]`` -> ``(x + prompt_map, p_s [B, C])``.

        ``alpha`` (``[B, T, 3]``) overrides the learned mixing weights.
        """
        b, t, c, h, w = x.shape
        p_s = self.pool.assemble(i_s, i_c, i_r)  # [B, 3, C, H0, W0]
        if alpha is None:
            alpha = self.mix(x)
        prompt = torch.einsum("btk,bkchw->btchw", alpha, p_s)
        prompt = F.interpolate(prompt.reshape(b * t, c, *p_s.shape[-2:]), size=(h, w), mode="bilinear", align_corners=False)
        prompt = prompt.reshape(b, t, c, h, w)
        return x + prompt, prompt.mean(dim=(-2, -1)).mean(dim=1)
