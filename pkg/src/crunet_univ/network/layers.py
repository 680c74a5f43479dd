"""Recurrent and convolutional building blocks on ``[B, T, C, H, W]`` sequences."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def _frames(conv: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Apply a 2-D module to every frame of ``[B, T, C, H, W]``."""
    b, t = x.shape[:2]
    y = conv(x.reshape(b * t, *x.shape[2:]))
    return y.reshape(b, t, *y.shape[1:])


def conv3x3(c_in: int, c_out: int, dilation: int = 1, stride: int = 1, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=dilation, dilation=dilation, bias=bias)


class CRNNTI(nn.Module):
    """Convolutional recurrent unit over time and iterations.

    ``h_t = ReLU(conv_x(x_t) + conv_t(h_{t-1}) + conv_i(h_iter_t))`` where
    ``h_iter`` is this unit's output from the previous cascade. ``reverse``
    runs the recurrence from the last frame to the first.
    """

    def __init__(self, channels: int, dilation: int = 1, reverse: bool = False):
        super().__init__()
        self.reverse = reverse
        self.conv_x = conv3x3(channels, channels, dilation)
        self.conv_t = conv3x3(channels, channels, dilation, bias=False)
        self.conv_i = conv3x3(channels, channels, dilation, bias=False)

    def step(self, x_t, h_prev_time, h_prev_iter):
        if not (x_t.shape == h_prev_time.shape == h_prev_iter.shape):
            raise ValueError(
                f"CRNNTI shape mismatch: x {tuple(x_t.shape)}, h_time {tuple(h_prev_time.shape)}, h_iter {tuple(h_prev_iter.shape)}"
            )
        return F.relu(self.conv_x(x_t) + self.conv_t(h_prev_time) + self.conv_i(h_prev_iter))

    def forward(self, x: torch.Tensor, h_iter: torch.Tensor | None = None) -> torch.Tensor:
        if h_iter is not None and h_iter.shape != x.shape:
            raise ValueError(f"iteration hidden {tuple(h_iter.shape)} does not match input {tuple(x.shape)}")
        # Input and iteration terms have no temporal dependency: batch them over frames.
        drive = _frames(self.conv_x, x)
        if h_iter is not None:
            drive = drive + _frames(self.conv_i, h_iter)
        t_len = x.shape[1]
        order = range(t_len - 1, -1, -1) if self.reverse else range(t_len)
        h = torch.zeros_like(x[:, 0])
        out = [None] * t_len
        for t in order:
            h = F.relu(drive[:, t] + self.conv_t(h))
            out[t] = h
        return torch.stack(out, dim=1)


class BCRNNTI(nn.Module):
    """Forward and backward CRNNTI with independent weights, outputs summed."""

    def __init__(self, channels: int, dilation: int = 1):
        super().__init__()
        self.fwd = CRNNTI(channels, dilation, reverse=False)
        self.bwd = CRNNTI(channels, dilation, reverse=True)

    def forward(self, x: torch.Tensor, h_iter: torch.Tensor | None = None) -> torch.Tensor:
        return self.fwd(x, h_iter) + self.bwd(x, h_iter)


class Conv2Plus1D(nn.Module):
    """Spatial 3x3 conv (optionally strided or after x2 upsampling), then a 3-tap temporal conv.

    Temporal padding reflects at the sequence ends; a one-frame sequence is
    replicated since it has nothing to reflect.
    """

    def __init__(self, channels: int, dilation: int = 1, mode: str = "same"):
        super().__init__()
        if mode not in ("same", "down", "up"):
            raise ValueError(f"unknown resampling mode {mode!r}")
        self.mode = mode
        self.spatial = conv3x3(channels, channels, dilation, stride=2 if mode == "down" else 1)
        self.temporal = nn.Conv3d(channels, channels, (3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "up":
            b, t = x.shape[:2]
            x = F.interpolate(x.flatten(0, 1), scale_factor=2, mode="bilinear", align_corners=False)
            x = x.reshape(b, t, *x.shape[1:])
        x = F.relu(_frames(self.spatial, x))
        y = x.transpose(1, 2)  # [B, C, T, H, W]
        pad_mode = "reflect" if y.shape[2] > 1 else "replicate"
        y = self.temporal(F.pad(y, (0, 0, 0, 0, 1, 1), mode=pad_mode))
        return y.transpose(1, 2)


class CFA(nn.Module):
    """Cascaded feature aggregation: concat previous cascades' features with the current ones, conv back to C."""

    def __init__(self, channels: int, n_previous: int, dilation: int = 1):
        super().__init__()
        self.n_previous = n_previous
        self.conv = conv3x3(channels * (n_previous + 1), channels, dilation)

    def forward(self, buffer: list[torch.Tensor], current: torch.Tensor) -> torch.Tensor:
        if len(buffer) != self.n_previous:
            raise ValueError(f"CFA built for {self.n_previous} previous cascades, got {len(buffer)}")
        return _frames(self.conv, torch.cat([*buffer, current], dim=2))


def cfa_merge(cfa: CFA, buffer: list[torch.Tensor], current: torch.Tensor) -> torch.Tensor:
    return cfa(buffer, current)
