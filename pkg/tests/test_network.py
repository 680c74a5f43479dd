import numpy as np
import pytest
import torch
from torch import nn

from crunet_univ.data import TrainingWindow, coil_maps, phantom
from crunet_univ.kspace import fft2c, ifft2c, sens_expand, sens_reduce
from crunet_univ.network import (
    BCRNNTI,
    CFA,
    CRNNTI,
    CascadeFeatureStore,
    CheckpointError,
    Conv2Plus1D,
    CRUNet,
    CRUNetMRUniv,
    ModelConfig,
    PromptContext,
    SensitivityEstimator,
    cfa_merge,
    count_parameters,
    data_consistency,
    dc_kspace,
    grow_cascades,
    load_checkpoint,
    save_checkpoint,
)
from crunet_univ.network.model import normalize_maps
from crunet_univ.prompts import HashTextEncoder
from crunet_univ.recon import make_input, reconstruct_sequence
from crunet_univ.sampling import SamplingMask

from conftest import fd_rel_errors, tiny_case, tiny_config, tiny_input, tiny_model

GOLDEN_DEFAULT_PARAMS = 11_244_670


def closed_form_params(cfg: ModelConfig) -> int:
    """Hand count from the layer list; independent of the module code."""
    c, p, s, hid, d = cfg.channels, cfg.prompt_size, cfg.sme_channels, cfg.head_hidden, cfg.text_dim
    conv = lambda i, o: 9 * i * o + o  # noqa: E731
    crnn = conv(c, c) + 2 * 9 * c * c
    film = (2 * c * c + c) + (c * 2 * c + 2 * c)
    c21 = conv(c, c) + (3 * c * c + c)
    pool = (cfg.n_trajectory + cfg.n_contrast + cfg.n_accel) * c * p * p + (3 * c + 3)
    total = 0
    for i in range(cfg.num_cascades):
        cfa = conv(c * (i + 1), c)
        enc = cfa + crnn + 2 * film + c21
        dec = c21 + crnn + 2 * film + pool
        total += conv(2, c) + 2 * enc + cfa + 2 * crnn + 2 * dec + conv(c, 2)
    sme = conv(2, s) + conv(s, s) + conv(s, 2 * s) + conv(2 * s, 2 * s) + conv(3 * s, s) + conv(s, 2)
    refiners = 2 * ((d * c + c) + (c * c + c))
    n_in = cfg.num_cascades * c
    heads = 2 * sum((n_in * hid + hid) + (hid * n + n) for n in (cfg.n_contrast, cfg.n_trajectory, cfg.n_accel))
    return total + sme + refiners + heads


def _seq(t=5, c=4, h=8, w=8, seed=0, dtype=torch.float64):
    return torch.randn(1, t, c, h, w, dtype=dtype, generator=torch.Generator().manual_seed(seed))


# ---------------------------------------------------------------- recurrent units


def test_crnnti_zero_in_zero_out():
    unit = CRNNTI(4)
    nn.init.zeros_(unit.conv_x.bias)
    x = torch.zeros(1, 3, 4, 6, 6)
    assert torch.equal(unit(x, torch.zeros_like(x)), x)


def test_crnnti_step_matches_forward():
    torch.manual_seed(0)
    unit = CRNNTI(3, dilation=2).double()
    x, hi = _seq(4, 3), _seq(4, 3, seed=1)
    out = unit(x, hi)
    h = torch.zeros_like(x[:, 0])
    for t in range(4):
        h = unit.step(x[:, t], h, hi[:, t])
        assert torch.allclose(out[:, t], h, atol=1e-12)
    with pytest.raises(ValueError):
        unit.step(x[:, 0], h[..., :4], hi[:, 0])
    with pytest.raises(ValueError):
        unit(x, hi[:, :2])


@pytest.mark.parametrize("reverse", [False, True])
def test_crnnti_causality_bitwise(reverse):
    torch.manual_seed(1)
    unit = CRNNTI(4, reverse=reverse).double()
    x, hi = _seq(), _seq(seed=2)
    base = unit(x, hi)
    for t_p in range(5):
        xp = x.clone()
        xp[:, t_p] += 1e-3 * torch.randn_like(xp[:, t_p])
        out = unit(xp, hi)
        for t in range(5):
            untouched = t < t_p if not reverse else t > t_p
            if untouched:
                assert torch.equal(out[:, t], base[:, t])
        assert not torch.equal(out[:, t_p], base[:, t_p])


def test_bcrnnti_full_receptive_field():
    torch.manual_seed(2)
    unit = BCRNNTI(4).double()
    x = _seq(5, 4, 12, 12).abs() + 0.1
    base = unit(x)
    for t_p in range(5):
        xp = x.clone()
        xp[:, t_p] += 0.5
        out = unit(xp)
        for t in range(5):
            assert not torch.equal(out[:, t], base[:, t]), (t_p, t)


def test_bcrnnti_single_frame_and_zero_weights():
    torch.manual_seed(3)
    unit = BCRNNTI(3).double()
    x = _seq(1, 3)
    assert torch.allclose(unit(x), unit.fwd(x) + unit.bwd(x))
    for p in unit.parameters():
        nn.init.zeros_(p)
    assert torch.equal(unit(x), torch.zeros_like(x))


@pytest.mark.parametrize("mode,scale", [("same", 1), ("down", 0.5), ("up", 2)])
@pytest.mark.parametrize("t", [1, 4])
def test_conv2plus1d_shapes(mode, scale, t):
    y = Conv2Plus1D(4, 2, mode)(torch.randn(1, t, 4, 8, 8))
    assert y.shape == (1, t, 4, int(8 * scale), int(8 * scale))


def test_cfa_channel_arithmetic():
    c = 4
    cur = torch.randn(1, 2, c, 6, 6)
    empty = CFA(c, 0)
    assert torch.equal(cfa_merge(empty, [], cur), empty.conv(cur.flatten(0, 1)).view(1, 2, c, 6, 6))
    assert CFA(c, 2).conv.in_channels == 3 * c
    with pytest.raises(ValueError):
        CFA(c, 2)([cur], cur)


# ---------------------------------------------------------------- CRUNet


def _ctx(b, c, dtype=torch.float32):
    return PromptContext(
        torch.randn(b, c, dtype=dtype), torch.randn(b, c, dtype=dtype),
        torch.zeros(b, dtype=torch.long), torch.zeros(b, dtype=torch.long), torch.zeros(b, dtype=torch.long),
    )


@pytest.mark.parametrize("b,t,h,w", [(1, 5, 64, 64), (1, 1, 32, 32), (2, 3, 48, 48), (1, 2, 18, 22)])
def test_crunet_shape_contract(b, t, h, w):
    net = CRUNet(0, 8, prompt_size=4)
    img = torch.randn(b, t, 2, h, w)
    out, feats, hid, p_u, p_s = net(img, _ctx(b, 8), CascadeFeatureStore())
    assert out.shape == img.shape
    assert p_u.shape == (b, 8) and p_s.shape == (b, 8)
    assert set(feats) == {"enc1", "enc2", "bott"}


def test_crunet_zero_parameters_is_identity():
    net = CRUNet(0, 8, prompt_size=4)
    for p in net.parameters():
        nn.init.zeros_(p)
    img = torch.randn(1, 3, 2, 16, 16)
    out = net(img, _ctx(1, 8), CascadeFeatureStore())[0]
    assert torch.equal(out, img)


def test_crunet_requires_matching_store():
    net = CRUNet(1, 8, prompt_size=4)
    with pytest.raises(ValueError):
        net(torch.randn(1, 2, 2, 8, 8), _ctx(1, 8), CascadeFeatureStore())


def test_no_dead_branches():
    model = tiny_model(2, seed=4)
    out = model(tiny_input(tiny_case(T=3, H=16, W=16, seed=4)))
    (out.recon.sum() + sum(v.sum() for v in out.logits.values())).backward()
    dead = {n for n, p in model.named_parameters() if p.grad is None or not bool(p.grad.abs().sum() > 0)}
    # the first cascade has no previous iteration, so its iteration convolutions see zeros
    assert dead == {n for n, _ in model.named_parameters() if n.startswith("cascades.0.") and ".conv_i." in n}


# ---------------------------------------------------------------- SME and DC


def test_sme_maps_are_normalized():
    torch.manual_seed(5)
    sme = SensitivityEstimator(4).double()
    acs = torch.randn(2, 3, 15, 16, dtype=torch.complex128)
    maps = sme(acs)
    e = (maps.abs() ** 2).sum(dim=1)
    assert torch.allclose(e[e > 0], torch.ones_like(e[e > 0]), atol=1e-5)
    single = sme(acs[:, :1])
    nz = single.abs() > 0
    assert torch.allclose(single.abs()[nz], torch.ones_like(single.abs()[nz]), atol=1e-5)
    with pytest.raises(ValueError):
        sme(torch.zeros(1, 2, 8, 8, dtype=torch.complex128))


def test_untrained_sme_roundtrip_on_single_coil_phantom():
    case = tiny_case(T=1, C=1, H=32, W=32, seed=1)
    sme = SensitivityEstimator(4).double()
    maps = sme(ifft2c(case.ksp.to(torch.complex128).mean(0, keepdim=True))[:, :1])[0]
    x = torch.randn(2, 32, 32, dtype=torch.complex128)
    x = x * (maps.abs().sum(0) > 0)
    assert float((sens_reduce(sens_expand(x, maps), maps) - x).abs().max().detach()) < 1e-5


def _dc_fixture(seed=0):
    g = torch.Generator().manual_seed(seed)
    s = normalize_maps(torch.randn(3, 12, 12, dtype=torch.complex128, generator=g))
    ksp = torch.randn(4, 3, 12, 12, dtype=torch.complex128, generator=g)
    img = torch.randn(4, 12, 12, dtype=torch.complex128, generator=g)
    mask = (torch.rand(4, 12, 12, generator=g) < 0.3).double()
    return img, ksp, mask, s


def test_dc_full_and_empty_masks():
    img, ksp, _, s = _dc_fixture()
    full = data_consistency(img, ksp, torch.ones(4, 12, 12), s)
    assert torch.allclose(full, sens_reduce(ifft2c(ksp), s), atol=1e-12)
    assert torch.allclose(data_consistency(torch.zeros_like(img), ksp, torch.ones(4, 12, 12), s), full)
    assert float((data_consistency(img, ksp, torch.zeros(4, 12, 12), s) - img).abs().max()) < 1e-5


def test_dc_kspace_exact_and_idempotent():
    img, meas, mask, s = _dc_fixture(1)
    k = fft2c(sens_expand(img, s))
    once = dc_kspace(k, meas, mask)
    m = mask.unsqueeze(-3).expand_as(k).bool()
    assert torch.equal(once[m], meas[m])
    assert torch.equal(once[~m], k[~m])
    assert torch.equal(dc_kspace(once, meas, mask), once)


def _unit_single_coil(seed):
    g = torch.Generator().manual_seed(seed)
    phase = torch.rand(1, 12, 12, generator=g, dtype=torch.float64) * 6.28
    return torch.polar(torch.ones_like(phase), phase)


def test_dc_single_coil_roundtrip_and_idempotence():
    img, _, mask, _ = _dc_fixture(2)
    s = _unit_single_coil(2)
    meas = torch.randn(4, 1, 12, 12, dtype=torch.complex128) * mask.unsqueeze(-3)
    once = data_consistency(img, meas, mask, s)
    k = fft2c(sens_expand(once, s))
    m = mask.unsqueeze(-3).expand_as(k).bool()
    assert float((k[m] - meas[m]).abs().max() / meas[m].abs().max()) < 1e-4
    twice = data_consistency(once, meas, mask, s)
    assert float((twice - once).abs().max() / once.abs().max()) < 1e-5


def test_dc_multicoil_fixed_point_at_consistent_image():
    _, _, mask, s = _dc_fixture(3)
    truth = torch.randn(4, 12, 12, dtype=torch.complex128)
    meas = fft2c(sens_expand(truth, s)) * mask.unsqueeze(-3)
    assert float((data_consistency(truth, meas, mask, s) - truth).abs().max()) < 1e-12


# ---------------------------------------------------------------- whole model


def test_forward_contract_and_sanity_bounds():
    case = tiny_case(T=6, C=2, H=16, W=16, seed=2)
    model = tiny_model(2, seed=1).eval()
    with torch.no_grad():
        out = model(tiny_input(case))
        assert out.recon.shape == (1, 6, 16, 16)
        assert bool(torch.isfinite(out.recon).all())
        inp_max = float(ifft2c(case.undersampled()).abs().max())
        assert 0 <= float(out.recon.min()) and float(out.recon.max()) <= 10 * inp_max
        assert {k: v.shape[-1] for k, v in out.logits.items()} == {"contrast": 8, "trajectory": 3, "accel": 3}
        assert len(out.prompt_states) == 2
        win = make_input(case, TrainingWindow((1, 2, 3, 4, 5), 2), encoder=HashTextEncoder(16))
        assert model(win).recon.shape == (1, 1, 16, 16)


class _FixedMaps(nn.Module):
    def __init__(self, maps):
        super().__init__()
        self.maps = maps

    def forward(self, acs_img):
        return self.maps.expand(acs_img.shape[0], *self.maps.shape)


def test_full_mask_output_is_fully_sampled_reconstruction():
    seed, t, c, h = 3, 3, 3, 16
    case = tiny_case(T=t, C=c, H=h, W=h, seed=seed)
    full = SamplingMask(np.ones((t, h, h), np.uint8), "uniform", 8, 1)
    rng = np.random.default_rng(seed)
    phantom("cine", t, h, h, rng)
    true_maps = torch.from_numpy(coil_maps(c, h, h, rng)).to(torch.complex128)
    outs = []
    for init in (0, 1, 2):
        model = tiny_model(2, seed=init, dtype=torch.float64).eval()
        inp = make_input(case, TrainingWindow(tuple(range(t)), None), full, HashTextEncoder(16), torch.float64)
        with torch.no_grad():
            out = model(inp)
            norm_ksp = inp.ksp / out.scale[0]
            assert torch.allclose(out.image, sens_reduce(ifft2c(norm_ksp), out.sens[:, None]), atol=1e-12)
            model.sme = _FixedMaps(true_maps)
            outs.append(model(inp).recon[0])
    for r in outs:
        assert torch.allclose(r.float(), case.ground_truth, atol=1e-5)


def test_cfa_long_range_and_buffer_sizes():
    case = tiny_case(T=3, C=2, H=16, W=16, seed=6)
    model = tiny_model(4, seed=6, dtype=torch.float64).eval()
    inp = tiny_input(case, torch.float64)
    sizes = []

    def record(i, store):
        sizes.append((i, {k: len(v) for k, v in store.buffers.items()}))

    def perturb(i, store):
        if i == 2:  # only cascade 3 still reads the buffers after this point
            for k in store.buffers:
                store.buffers[k][0] = store.buffers[k][0] + 0.5

    with torch.no_grad():
        base = model(inp, feature_hook=record).recon
        moved = model(inp, feature_hook=perturb).recon
    assert sizes == [(i, dict.fromkeys(("enc1", "enc2", "bott"), i + 1)) for i in range(4)]
    assert not torch.allclose(base, moved)


def test_grow_preserves_parameters_and_logits():
    model = tiny_model(6, seed=7).eval()
    inp = tiny_input(tiny_case(T=3, H=16, W=16, seed=7))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    with torch.no_grad():
        logits = model(inp).logits
    grow_cascades(model, 4)
    assert model.num_cascades == 10 and model.cfg.num_cascades == 10
    after = model.state_dict()
    for k, v in before.items():
        if k.endswith("fc1.weight"):
            assert torch.equal(after[k][:, : v.shape[1]], v)
            assert not bool(after[k][:, v.shape[1] :].any())
        else:
            assert torch.equal(after[k], v), k
    with torch.no_grad():
        grown = model(inp).logits
    for k in logits:
        assert torch.allclose(grown[k], logits[k], atol=1e-6), k
    grow_cascades(model, 2)
    with torch.no_grad():
        assert model(inp).recon.shape == (1, 3, 16, 16)
    with pytest.raises(ValueError):
        grow_cascades(model, 0)


def test_classifier_inputs_standardized_per_cascade():
    model = tiny_model(3, seed=11)
    seen = {}
    model.heads_u["trajectory"].register_forward_pre_hook(lambda m, a: seen.setdefault("u", a[0]))
    p_u = [torch.randn(2, 8) * 1e-3 + 1.0 for _ in range(3)]
    p_s = [torch.randn(2, 8) * (k + 1) for k in range(3)]
    model.classify(p_u, p_s)
    chunks = seen["u"].view(2, 3, 8)
    ref = torch.stack([(p - p.mean(-1, keepdim=True)) / torch.sqrt(p.var(-1, unbiased=False, keepdim=True) + 1e-5) for p in p_u], 1)
    assert torch.allclose(chunks, ref, atol=1e-4)


def test_parameter_count_is_pure_function_of_config():
    a = count_parameters(CRUNetMRUniv(tiny_config(3)))
    b = count_parameters(CRUNetMRUniv(tiny_config(3)))
    assert a == b
    assert a == closed_form_params(tiny_config(3))
    assert closed_form_params(ModelConfig()) == GOLDEN_DEFAULT_PARAMS
    assert count_parameters(CRUNetMRUniv(ModelConfig())) == GOLDEN_DEFAULT_PARAMS


def test_whole_model_finite_difference():
    case = tiny_case(T=3, C=2, H=16, W=16, seed=8)
    model = tiny_model(2, seed=8, dtype=torch.float64)
    inp = tiny_input(case, torch.float64)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    weights = torch.linspace(0.5, 1.5, 3 * 16 * 16, dtype=torch.float64).view(1, 3, 16, 16)

    def loss():
        out = model(inp)
        return (out.recon * weights).mean() + sum(v.square().mean() for v in out.logits.values())

    loss().backward()
    # Central differences on an O(1) loss resolve gradients down to ~1e-10;
    # sample among entries well above that floor.
    candidates = [
        (i, j) for i, p in enumerate(params) if p.grad is not None for j in torch.nonzero(p.grad.view(-1).abs() > 1e-6).view(-1).tolist()
    ]
    gen = np.random.default_rng(0)
    picks = [candidates[k] for k in gen.choice(len(candidates), size=20, replace=False)]
    errs = fd_rel_errors(loss, params, picks, eps=1e-6)
    assert max(errs) < 1e-3, [(named[t][0], e) for (t, _), e in zip(picks, errs)]


# ---------------------------------------------------------------- checkpoint and inference


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model(2, seed=9)
    path = save_checkpoint(model, tmp_path / "m.pt", step=2)
    back, info = load_checkpoint(path)
    assert info["step"] == 2 and back.cfg == model.cfg
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)


def test_checkpoint_shape_validation(tmp_path):
    path = save_checkpoint(tiny_model(2), tmp_path / "m.pt")
    blob = torch.load(path, weights_only=False)
    blob["state_dict"]["cascades.0.lift.weight"] = torch.zeros(1)
    torch.save(blob, path)
    with pytest.raises(CheckpointError, match="cascades.0.lift.weight"):
        load_checkpoint(path)
    (tmp_path / "junk.pt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")


def test_sliding_window_order_invariance_and_short_path():
    enc = HashTextEncoder(16)
    model = tiny_model(2, seed=10)
    case = tiny_case(T=7, H=16, W=16, seed=10)
    fwd = reconstruct_sequence(model, case, enc)
    rev = reconstruct_sequence(model, case, enc, order=range(6, -1, -1))
    assert fwd.shape == (7, 16, 16) and torch.equal(fwd, rev)
    short = tiny_case(T=3, H=16, W=16, seed=10)
    out = reconstruct_sequence(model, short, enc)
    with torch.no_grad():
        ref = model(tiny_input(short)).recon[0]
    assert torch.equal(out, ref)
