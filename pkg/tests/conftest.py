import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from crunet_univ.data import ScanMeta, generate_phantom_case
from crunet_univ.data import TrainingWindow
from crunet_univ.network import CRUNetMRUniv, ModelConfig
from crunet_univ.prompts import HashTextEncoder
from crunet_univ.recon import make_input

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True)
settings.load_profile("ci")

TINY = dict(channels=8, sme_channels=4, head_hidden=8, prompt_size=4, text_dim=16)


def tiny_config(num_cascades=2, **kw) -> ModelConfig:
    return ModelConfig(num_cascades=num_cascades, **{**TINY, **kw})


def tiny_model(num_cascades=2, seed=0, dtype=torch.float32, **kw) -> CRUNetMRUniv:
    torch.manual_seed(seed)
    return CRUNetMRUniv(tiny_config(num_cascades, **kw)).to(dtype)


def cine_meta(trajectory="uniform", accel=8, contrast="cine") -> ScanMeta:
    return ScanMeta("Siemens", "Aera", "1.5T", contrast, trajectory, accel, "C004")


def tiny_case(T=3, C=2, H=16, W=16, seed=0, trajectory="uniform", accel=8, acs=None, contrast="cine"):
    return generate_phantom_case(cine_meta(trajectory, accel, contrast), T, C, H, W, seed, acs=acs)


def tiny_input(case, dtype=torch.float32, text_dim=16, window=None):
    window = window or TrainingWindow(tuple(range(case.ksp.shape[0])), None)
    return make_input(case, window, encoder=HashTextEncoder(text_dim), dtype=dtype)


def crandn(*shape, gen=None, dtype=torch.complex128):
    return torch.randn(*shape, dtype=dtype, generator=gen)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_rel_errors(loss_fn, tensors, picks, eps=1e-6):
    """Central-difference vs autograd for scalar ``loss_fn()`` at ``picks`` = [(tensor_idx, flat_idx)].

    Returns the relative errors |fd - an| / max(|fd|, |an|, 1e-10).
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    errs = []
    for ti, fi in picks:
        t = tensors[ti]
        an = float(t.grad.reshape(-1)[fi])
        flat = t.data.view(-1)
        orig = float(flat[fi])
        with torch.no_grad():
            flat[fi] = orig + eps
            up = float(loss_fn())
            flat[fi] = orig - eps
            down = float(loss_fn())
            flat[fi] = orig
        fd = (up - down) / (2 * eps)
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-10))
    return errs
