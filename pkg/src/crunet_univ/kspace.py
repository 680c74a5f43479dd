"""Complex image / k-space algebra.

Layouts: multi-coil data is ``[..., T, C, H, W]``, coil-combined images are
``[..., T, H, W]`` and sensitivity maps are ``[..., C, H, W]``. Every leading
``...`` dimension is treated as batch. All transforms are centered and
orthonormal, so the k-space DC sample sits at index ``(H // 2, W // 2)``.
"""

from __future__ import annotations

import numpy as np
import torch

_SPATIAL = (-2, -1)


class KSpaceError(ValueError):
    """Invalid input to a k-space operator."""


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise KSpaceError(f"{name}: input contains NaN or Inf")


def fft2c(img) -> torch.Tensor:
    """Centered orthonormal 2-D FFT over the last two axes."""
    img = _as_tensor(img)
    if img.ndim < 2:
        raise KSpaceError("fft2c: need at least 2 dims")
    _check_finite(img, "fft2c")
    x = torch.fft.ifftshift(img, dim=_SPATIAL)
    x = torch.fft.fft2(x, dim=_SPATIAL, norm="ortho")
    return torch.fft.fftshift(x, dim=_SPATIAL)


def ifft2c(ksp) -> torch.Tensor:
    """Centered orthonormal 2-D inverse FFT over the last two axes."""
    ksp = _as_tensor(ksp)
    if ksp.ndim < 2:
        raise KSpaceError("ifft2c: need at least 2 dims")
    _check_finite(ksp, "ifft2c")
    x = torch.fft.ifftshift(ksp, dim=_SPATIAL)
    x = torch.fft.ifft2(x, dim=_SPATIAL, norm="ortho")
    return torch.fft.fftshift(x, dim=_SPATIAL)


def rss(coil_imgs, coil_dim: int = -3) -> torch.Tensor:
    """Root sum of squares over the coil axis."""
    coil_imgs = _as_tensor(coil_imgs)
    if coil_imgs.ndim < 3:
        raise KSpaceError("rss: expected [..., C, H, W]")
    return torch.sqrt((coil_imgs.abs() ** 2).sum(dim=coil_dim))


def sens_expand(img, sens) -> torch.Tensor:
    """``[..., T, H, W]`` image times ``[..., C, H, W]`` maps -> ``[..., T, C, H, W]``."""
    img, sens = _as_tensor(img), _as_tensor(sens)
    if img.shape[-2:] != sens.shape[-2:]:
        raise KSpaceError(f"sens_expand: spatial dims {tuple(img.shape[-2:])} vs {tuple(sens.shape[-2:])}")
    return img.unsqueeze(-3) * sens.unsqueeze(-4)


def sens_reduce(coil_imgs, sens) -> torch.Tensor:
    """Conjugate-weighted coil combination, the adjoint of :func:`sens_expand`."""
    coil_imgs, sens = _as_tensor(coil_imgs), _as_tensor(sens)
    if coil_imgs.shape[-3:] != sens.shape[-3:]:
        raise KSpaceError(
            f"sens_reduce: coil images {tuple(coil_imgs.shape[-3:])} vs maps {tuple(sens.shape[-3:])}"
        )
    return (coil_imgs * sens.conj().unsqueeze(-4)).sum(dim=-3)


def normalize_case(ksp) -> tuple[torch.Tensor, float]:
    """Scale k-space so the largest coil-image magnitude is one.

    The scale is measured in the image domain; since the transform is linear
    the division is applied directly to k-space, which avoids a second
    round-trip. Returns ``(normalized_ksp, scale)``.
    """
    ksp = _as_tensor(ksp)
    scale = float(ifft2c(ksp).abs().max())
    if scale == 0.0:
        raise KSpaceError("normalize_case: all-zero input, scale undefined")
    return ksp / scale, scale


def zero_filled_recon(ksp, mask) -> torch.Tensor:
    """RSS of the inverse FFT of masked k-space. ``mask`` is ``[..., T, H, W]``."""
    ksp, mask = _as_tensor(ksp), _as_tensor(mask)
    return rss(ifft2c(ksp * mask.unsqueeze(-3).to(ksp.dtype)))


def center_crop(img, crop_h: int, crop_w: int):
    """Central ``crop_h x crop_w`` window; odd remainders go to the high-index side."""
    h, w = img.shape[-2:]
    if not (0 < crop_h <= h and 0 < crop_w <= w):
        raise KSpaceError(f"center_crop: crop {crop_h}x{crop_w} does not fit {h}x{w}")
    top = (h - crop_h) // 2
    left = (w - crop_w) // 2
    return img[..., top : top + crop_h, left : left + crop_w]
