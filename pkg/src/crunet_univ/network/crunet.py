"""Prompt-guided convolutional recurrent U-Net used inside every cascade."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from ..prompts import FiLM, PromptBlock, update_pu
from .layers import BCRNNTI, CFA, CRNNTI, Conv2Plus1D, _frames, conv3x3

LEVELS = ("enc1", "enc2", "bott")


@dataclass
class CascadeFeatureStore:
    """Per-level features of all previous cascades, consumed by the CFA blocks."""

    buffers: dict[str, list[torch.Tensor]] = field(default_factory=lambda: {k: [] for k in LEVELS})

    def __len__(self) -> int:
        sizes = {len(v) for v in self.buffers.values()}
        if len(sizes) != 1:
            raise RuntimeError(f"feature buffers out of step: { {k: len(v) for k, v in self.buffers.items()} }")
        return sizes.pop()

    def push(self, features: dict[str, torch.Tensor]) -> None:
        if set(features) != set(LEVELS):
            raise ValueError(f"expected features for {LEVELS}, got {sorted(features)}")
        for k in LEVELS:
            self.buffers[k].append(features[k])


@dataclass
class PromptContext:
    """Per-sample conditioning shared by every cascade."""

    scanner: torch.Tensor  # refined scanner-text prompt [B, C]
    acquisition: torch.Tensor  # refined acquisition-text prompt [B, C]
    traj_idx: torch.Tensor  # [B] long
    contrast_idx: torch.Tensor
    accel_idx: torch.Tensor


class _EncoderLevel(nn.Module):
    def __init__(self, channels: int, dilation: int, n_previous: int):
        super().__init__()
        self.cfa = CFA(channels, n_previous, dilation)
        self.rnn = CRNNTI(channels, dilation, reverse=False)
        self.film1 = FiLM(channels)
        self.film2 = FiLM(channels)
        self.down = Conv2Plus1D(channels, dilation, mode="down")


class _DecoderLevel(nn.Module):
    def __init__(self, channels: int, dilation: int, prompt_size: int, n_traj: int, n_contrast: int, n_accel: int):
        super().__init__()
        self.up = Conv2Plus1D(channels, dilation, mode="up")
        self.rnn = CRNNTI(channels, dilation, reverse=True)
        self.film1 = FiLM(channels)
        self.film2 = FiLM(channels)
        self.prompt = PromptBlock(channels, prompt_size, n_traj, n_contrast, n_accel)


class CRUNet(nn.Module):
    """Two-level U-Net with CRNNTI-F encoders, a BCRNNTI bottleneck and CRNNTI-B decoders.

    ``index`` is the cascade position; it fixes how many stored feature maps
    each CFA block concatenates.
    """

    def __init__(
        self,
        index: int,
        channels: int = 64,
        dilations: tuple[int, int, int] = (1, 2, 4),
        prompt_size: int = 16,
        n_traj: int = 3,
        n_contrast: int = 8,
        n_accel: int = 3,
    ):
        super().__init__()
        if len(dilations) != 3:
            raise ValueError("need dilations for two levels and the bottleneck")
        self.index = index
        d1, d2, d3 = dilations
        self.lift = conv3x3(2, channels)
        self.enc1 = _EncoderLevel(channels, d1, index)
        self.enc2 = _EncoderLevel(channels, d2, index)
        self.bott_cfa = CFA(channels, index, d3)
        self.bott = BCRNNTI(channels, d3)
        self.dec2 = _DecoderLevel(channels, d2, prompt_size, n_traj, n_contrast, n_accel)
        self.dec1 = _DecoderLevel(channels, d1, prompt_size, n_traj, n_contrast, n_accel)
        self.drop = conv3x3(channels, 2)

    def _encode(self, level, x, store, hiddens, key, ctx, pu_prompt):
        x = level.cfa(store.buffers[key], x)
        h = level.rnn(x, hiddens.get(key))
        x, _, _ = level.film1(h, ctx.scanner)
        x, _, _ = level.film2(x, pu_prompt)
        return h, level.down(x)

    def _decode(self, level, x, skip, hiddens, key, ctx, pu_prompt):
        x = level.up(x) + skip
        h = level.rnn(x, hiddens.get(key))
        x, _, _ = level.film1(h, ctx.scanner)
        x, w_p, b_p = level.film2(x, pu_prompt)
        x, p_s = level.prompt(x, ctx.traj_idx, ctx.contrast_idx, ctx.accel_idx)
        return h, x, update_pu(w_p, b_p), p_s

    def forward(
        self,
        img: torch.Tensor,
        ctx: PromptContext,
        store: CascadeFeatureStore,
        hiddens: dict[str, torch.Tensor] | None = None,
        pu_prev: torch.Tensor | None = None,
    ):
        """Refine a 2-channel sequence ``[B, T, 2, H, W]``.

        Returns ``(refined, features, new_hiddens, p_u, p_s)``; ``features``
        holds this cascade's entries for the feature store.
        """
        hiddens = hiddens or {}
        if len(store) != self.index:
            raise ValueError(f"cascade {self.index} needs {self.index} stored feature sets, store has {len(store)}")
        h0, w0 = img.shape[-2:]
        pad_h, pad_w = (-h0) % 4, (-w0) % 4
        x_in = F.pad(img, (0, pad_w, 0, pad_h)) if pad_h or pad_w else img
        pu_prompt = ctx.acquisition if pu_prev is None else ctx.acquisition + pu_prev

        x = _frames(self.lift, x_in)
        h1, x = self._encode(self.enc1, x, store, hiddens, "enc1", ctx, pu_prompt)
        h2, x = self._encode(self.enc2, x, store, hiddens, "enc2", ctx, pu_prompt)
        x = self.bott_cfa(store.buffers["bott"], x)
        hb = self.bott(x, hiddens.get("bott"))
        d2, x, _, p_s = self._decode(self.dec2, hb, h2, hiddens, "dec2", ctx, pu_prompt)
        d1, x, p_u, _ = self._decode(self.dec1, x, h1, hiddens, "dec1", ctx, pu_prompt)
        out = x_in + _frames(self.drop, x)
        out = out[..., :h0, :w0]
        new_hiddens = {"enc1": h1, "enc2": h2, "bott": hb, "dec2": d2, "dec1": d1}
        features = {"enc1": h1, "enc2": h2, "bott": hb}
        return out, features, new_hiddens, p_u, p_s


def crunet_forward(net: CRUNet, img_2ch, ctx, store, iter_hiddens=None, pu_prev=None):
    refined, features, hiddens, p_u, p_s = net(img_2ch, ctx, store, iter_hiddens, pu_prev)
    return refined, hiddens, p_u, p_s
