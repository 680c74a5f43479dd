"""Model inputs from cases, and sliding-window sequence reconstruction."""

from __future__ import annotations

from typing import Sequence

import torch

from .data import KSpaceCase, TrainingWindow, window_frames
from .kspace import zero_filled_recon
from .network.model import CRUNetMRUniv, ReconInput
from .prompts import TextEncoder, embed_text, render_prompts
from .sampling import SamplingMask


def make_input(
    case: KSpaceCase,
    window: TrainingWindow,
    mask: SamplingMask | None = None,
    encoder: TextEncoder | None = None,
    dtype: torch.dtype = torch.float32,
) -> ReconInput:
    """Undersample ``case`` with ``mask`` (default: its own) and cut out ``window``."""
    mask = mask or case.mask
    frames = list(window.frames)
    m = torch.as_tensor(mask.mask[frames]).to(dtype)
    ctype = torch.complex128 if dtype == torch.float64 else torch.complex64
    ksp = case.ksp[frames].to(ctype) * m.unsqueeze(-3).to(ctype)
    prompts = render_prompts(case.meta)
    meta = _meta_for(case, mask)
    return ReconInput(
        ksp=ksp.unsqueeze(0),
        mask=m.unsqueeze(0),
        acs_region=torch.as_tensor(mask.acs_region()).unsqueeze(0),
        scanner_emb=embed_text(prompts.scanner_text, encoder).to(dtype).unsqueeze(0),
        acquisition_emb=embed_text(render_prompts(meta).acquisition_text, encoder).to(dtype).unsqueeze(0),
        contrast_idx=torch.tensor([meta.contrast_index]),
        trajectory_idx=torch.tensor([meta.trajectory_index]),
        accel_idx=torch.tensor([meta.accel_index]),
        target_index=window.target_index,
    )


def _meta_for(case: KSpaceCase, mask: SamplingMask):
    from dataclasses import replace

    if (mask.trajectory, mask.accel) == (case.meta.trajectory, case.meta.accel):
        return case.meta
    return replace(case.meta, trajectory=mask.trajectory, accel=mask.accel)


@torch.no_grad()
def reconstruct_sequence(
    model: CRUNetMRUniv,
    case: KSpaceCase,
    encoder: TextEncoder | None = None,
    mask: SamplingMask | None = None,
    order: Sequence[int] | None = None,
) -> torch.Tensor:
    """Magnitude reconstruction ``[T, H, W]`` of the whole sequence.

    Each frame is the middle (or shifted-boundary) target of its own 5-frame
    window; sequences shorter than five frames go through in one pass.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    t_len = case.ksp.shape[0]
    windows = window_frames(t_len, "win5")
    if len(windows) == 1 and windows[0].target_index is None:
        return model(make_input(case, windows[0], mask, encoder, dtype)).recon[0].float()
    out = torch.empty(case.ground_truth.shape, dtype=torch.float32)
    for t in order if order is not None else range(t_len):
        out[t] = model(make_input(case, windows[t], mask, encoder, dtype)).recon[0, 0].float()
    return out


def zero_filled(case: KSpaceCase, mask: SamplingMask | None = None) -> torch.Tensor:
    m = torch.as_tensor((mask or case.mask).mask)
    return zero_filled_recon(case.ksp, m).float()
