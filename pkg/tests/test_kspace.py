import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from crunet_univ.kspace import (
    KSpaceError,
    center_crop,
    fft2c,
    ifft2c,
    normalize_case,
    rss,
    sens_expand,
    sens_reduce,
    zero_filled_recon,
)
from crunet_univ.network.model import normalize_maps
from crunet_univ.objectives import nmse

from conftest import tiny_case

shapes = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(2, 17), st.integers(2, 17))


def _rel(a, b):
    return float((a - b).abs().max() / b.abs().max().clamp_min(1e-30))


@given(shapes, st.integers(0, 2**31 - 1))
def test_fft_roundtrip_and_parseval(shape, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(*shape, dtype=torch.complex128, generator=g)
    k = fft2c(x)
    assert _rel(ifft2c(k), x) < 1e-6
    assert abs(float((k.abs() ** 2).sum() / (x.abs() ** 2).sum()) - 1) < 1e-6


def test_fft_matches_numpy_centered_convention():
    x = np.random.default_rng(0).standard_normal((5, 7)) + 1j * np.random.default_rng(1).standard_normal((5, 7))
    ref = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x), norm="ortho"))
    np.testing.assert_allclose(fft2c(torch.from_numpy(x)).numpy(), ref, rtol=1e-12, atol=1e-12)


def test_dc_of_constant_image_lands_at_center():
    k = fft2c(torch.ones(6, 6, dtype=torch.complex128))
    assert abs(k[3, 3] - 6.0) < 1e-12
    assert float(k.abs().sum()) == pytest.approx(6.0)


def test_fft_rejects_nonfinite():
    x = torch.zeros(4, 4, dtype=torch.complex64)
    x[1, 1] = float("nan")
    with pytest.raises(KSpaceError):
        fft2c(x)


@given(shapes, st.integers(0, 2**31 - 1))
def test_rss_nonnegative_and_abs_for_single_coil(shape, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(*shape, dtype=torch.complex128, generator=g)
    assert bool((rss(x) >= 0).all())
    one = x[:, :1]
    assert torch.allclose(rss(one), one[:, 0].abs())


def _random_maps(c, h, w, seed):
    g = torch.Generator().manual_seed(seed)
    return normalize_maps(torch.randn(c, h, w, dtype=torch.complex128, generator=g))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(2, 12), st.integers(0, 10_000))
def test_reduce_after_expand_is_identity_with_normalized_maps(t, c, h, seed):
    s = _random_maps(c, h, h, seed)
    x = torch.randn(t, h, h, dtype=torch.complex128, generator=torch.Generator().manual_seed(seed + 1))
    assert _rel(sens_reduce(sens_expand(x, s), s), x) < 1e-6


def test_single_unit_coil_is_identity_broadcast():
    x = torch.randn(2, 5, 5, dtype=torch.complex128)
    s = torch.ones(1, 5, 5, dtype=torch.complex128)
    assert torch.equal(sens_expand(x, s)[:, 0], x)
    assert torch.equal(sens_reduce(sens_expand(x, s), s), x)


def test_expand_and_reduce_match_scalar_loops(rng):
    t, c, h, w = 2, 3, 4, 5
    x = rng.standard_normal((t, h, w)) + 1j * rng.standard_normal((t, h, w))
    s = rng.standard_normal((c, h, w)) + 1j * rng.standard_normal((c, h, w))
    y = rng.standard_normal((t, c, h, w)) + 1j * rng.standard_normal((t, c, h, w))
    exp = np.zeros((t, c, h, w), complex)
    red = np.zeros((t, h, w), complex)
    for ti in range(t):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    exp[ti, ci, i, j] = x[ti, i, j] * s[ci, i, j]
                    red[ti, i, j] += np.conj(s[ci, i, j]) * y[ti, ci, i, j]
    np.testing.assert_allclose(sens_expand(torch.from_numpy(x), torch.from_numpy(s)).numpy(), exp, rtol=1e-12)
    np.testing.assert_allclose(sens_reduce(torch.from_numpy(y), torch.from_numpy(s)).numpy(), red, rtol=1e-12)


def test_sens_shape_mismatch_raises():
    with pytest.raises(KSpaceError):
        sens_expand(torch.zeros(2, 4, 4), torch.zeros(3, 5, 4))
    with pytest.raises(KSpaceError):
        sens_reduce(torch.zeros(2, 3, 4, 4), torch.zeros(2, 4, 4))


@given(shapes, st.integers(0, 10_000))
def test_normalize_unit_max_and_idempotent(shape, seed):
    x = torch.randn(*shape, dtype=torch.complex128, generator=torch.Generator().manual_seed(seed))
    k, scale = normalize_case(x)
    assert abs(float(ifft2c(k).abs().max()) - 1) < 1e-6
    k2, scale2 = normalize_case(k)
    assert _rel(k2, k) < 1e-6 and abs(scale2 - 1) < 1e-6


def test_normalize_homogeneity_and_fixed_point():
    x = torch.randn(2, 3, 8, 8, dtype=torch.complex128)
    k, s = normalize_case(x)
    k7, s7 = normalize_case(7 * x)
    assert _rel(k7, k) < 1e-12 and s7 == pytest.approx(7 * s, rel=1e-12)
    k1, s1 = normalize_case(k)
    assert _rel(k1, k) < 1e-6 and s1 == pytest.approx(1.0, abs=1e-6)


def test_normalize_zero_raises():
    with pytest.raises(KSpaceError):
        normalize_case(torch.zeros(2, 4, 4, dtype=torch.complex64))


def test_zero_filled_full_zero_and_undersampled():
    case = tiny_case(T=4, C=3, H=32, W=32, seed=3)
    full = torch.ones(4, 32, 32)
    assert torch.allclose(zero_filled_recon(case.ksp, full), rss(ifft2c(case.ksp)))
    assert torch.allclose(zero_filled_recon(case.ksp, full), case.ground_truth, atol=1e-5)
    assert float(zero_filled_recon(case.ksp, torch.zeros(4, 32, 32)).abs().max()) == 0.0
    under = zero_filled_recon(case.ksp, torch.as_tensor(case.mask.mask))
    assert nmse(under, case.ground_truth, 1.0) > nmse(zero_filled_recon(case.ksp, full), case.ground_truth, 1.0)


def test_center_crop_tie_rule():
    img = torch.arange(36).reshape(6, 6)
    assert torch.equal(center_crop(img, 6, 6), img)
    assert torch.equal(center_crop(img, 2, 2), img[2:4, 2:4])
    five = torch.arange(25).reshape(5, 5)
    # enumerate: (5 - 2) // 2 = 1 rows/cols before, 2 after
    assert torch.equal(center_crop(five, 2, 2), five[1:3, 1:3])
    with pytest.raises(KSpaceError):
        center_crop(five, 6, 2)
