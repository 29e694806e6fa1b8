import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bicubic_up_1d
from ssrde.autodiff import Tensor, finite_diff_check, ops, parameter
from ssrde.backbone import (BackboneConfig, FeatureExtractor, ImageHead, Reconstructor, ResidualFusion,
                            TransitionBlock, compose_sr)
from ssrde.resize import bicubic_upsample

SMALL = BackboneConfig(base_channels=4, rdb_growth=4, rdb_layers=2, num_rdbs=2)


def zero_module(m):
    for p in m.parameters():
        p.data[...] = 0.0


def test_extractor_keeps_spatial_shape(rng):
    ext = FeatureExtractor(SMALL, rng)
    out = ext(Tensor(rng.uniform(size=(2, 3, 8, 12))))
    assert out.shape == (2, 4, 8, 12)


def test_extractor_zero_input_zero_biases(rng):
    ext = FeatureExtractor(SMALL, rng)
    for name, p in ext.named_parameters():
        if name.endswith("bias"):
            p.data[...] = 0.0
    out = ext(Tensor(np.zeros((1, 3, 8, 8))))
    assert not out.data.any()


def test_extractor_pixel_gradient(rng):
    ext = FeatureExtractor(SMALL, rng)
    x = parameter(rng.uniform(size=(1, 3, 8, 8)))
    w = Tensor(rng.normal(size=(1, 4, 8, 8)))
    rep = finite_diff_check(lambda: ops.sum(ext(x) * w), [x], tol=1e-4, max_entries=12, floor=1e-6)
    assert rep.passed, rep.summary()


def test_transition_constant_pyramid(rng):
    tb = TransitionBlock(SMALL, rng)
    L = Tensor(np.full((1, 4, 8, 12), 0.7))
    for level in tb.pyramid(L):
        np.testing.assert_allclose(level.data, 0.7, atol=1e-14)
    assert tb(L).shape == L.shape


def test_transition_without_spp_is_plain_conv(rng):
    full = TransitionBlock(SMALL, rng)
    plain = TransitionBlock(BackboneConfig(base_channels=4, rdb_growth=4, spp_levels=()), rng)
    C = 4
    # weight surgery: keep only the input slice of the fusion conv and zero the pyramid slices
    plain.fuse.weight.data = full.fuse.weight.data[:, :C].copy()
    plain.fuse.bias.data = full.fuse.bias.data.copy()
    full.fuse.weight.data[:, C:] = 0.0
    L = Tensor(rng.normal(size=(1, C, 8, 12)))
    np.testing.assert_allclose(full(L).data, plain(L).data, atol=1e-14)


def test_ffm_zero_residual(rng):
    ffm = ResidualFusion(SMALL, rng)
    L = Tensor(rng.normal(size=(2, 4, 6, 6)))
    expected = ffm.ca(ffm.rdb(Tensor(np.zeros(L.shape))) + L)
    assert np.array_equal(ffm(L, L).data, expected.data)


def test_ffm_gates_in_unit_interval(rng):
    ffm = ResidualFusion(SMALL, rng)
    g = ffm.ca.gates(Tensor(rng.normal(size=(2, 4, 6, 6)) * 10)).data
    assert np.all((g > 0) & (g < 1))


def test_ffm_gradient_reaches_both_inputs(rng):
    ffm = ResidualFusion(SMALL, rng)
    a = parameter(rng.normal(size=(1, 4, 6, 6)))
    b = parameter(rng.normal(size=(1, 4, 6, 6)))
    ops.sum(ffm(a, b) * Tensor(rng.normal(size=(1, 4, 6, 6)))).backward()
    assert np.abs(a.grad).sum() > 0 and np.abs(b.grad).sum() > 0


@pytest.mark.parametrize("s", [2, 4])
def test_reconstructor_scales(rng, s):
    cfg = BackboneConfig(base_channels=4, rdb_growth=4, rdb_layers=2, num_rdbs=2, scale=s)
    out = Reconstructor(cfg, rng)(Tensor(rng.normal(size=(1, 4, 8, 12))))
    assert out.shape == (1, 4, 8 * s, 12 * s)


def test_reconstructor_gradient(rng):
    rec = Reconstructor(SMALL, rng)
    x = parameter(rng.normal(size=(1, 4, 8, 8)))
    w = Tensor(rng.normal(size=(1, 4, 16, 16)))
    rep = finite_diff_check(lambda: ops.sum(rec(x) * w), [x], tol=1e-4, max_entries=12, floor=1e-6)
    assert rep.passed, rep.summary()


def test_compose_zero_residual_is_bicubic(rng):
    head = ImageHead(SMALL, rng)
    zero_module(head)
    lr = Tensor(rng.uniform(size=(1, 3, 8, 12)))
    H = Tensor(rng.normal(size=(1, 4, 16, 24)))
    assert np.array_equal(compose_sr(lr, H, head).data, bicubic_upsample(lr, 2).data)


def test_compose_independent_of_H_with_zero_head(rng):
    head = ImageHead(SMALL, rng)
    zero_module(head)
    lr = Tensor(rng.uniform(size=(1, 3, 8, 12)))
    a = compose_sr(lr, Tensor(rng.normal(size=(1, 4, 16, 24))), head)
    b = compose_sr(lr, Tensor(rng.normal(size=(1, 4, 16, 24))), head)
    assert np.array_equal(a.data, b.data)


def test_compose_is_linear_in_H(rng):
    head = ImageHead(SMALL, rng)
    lr = Tensor(rng.uniform(size=(1, 3, 8, 12)))
    H = rng.normal(size=(1, 4, 16, 24))
    d = rng.normal(size=H.shape) * 1e-3
    delta = compose_sr(lr, Tensor(H + d), head).data - compose_sr(lr, Tensor(H), head).data
    lin = ops.conv2d(Tensor(d), head.conv.weight, None, padding=1).data
    np.testing.assert_allclose(delta, lin, atol=1e-12)


def test_bicubic_constant():
    out = bicubic_upsample(Tensor(np.full((1, 3, 5, 7), 0.3)), 2)
    np.testing.assert_allclose(out.data, 0.3, atol=1e-14)


def test_bicubic_matches_kernel_oracle():
    ramp = np.tile(np.arange(9.0) * 0.1, (6, 1))
    ramp = ramp + np.arange(6.0)[:, None] * 0.05
    out = bicubic_upsample(Tensor(ramp[None, None]), 2).data[0, 0]
    ref = np.array([bicubic_up_1d(r, 2) for r in ramp])
    ref = np.array([bicubic_up_1d(c, 2) for c in ref.T]).T
    assert np.max(np.abs(out - ref)) < 1e-10


@given(st.integers(8, 14), st.integers(8, 14), st.sampled_from([2, 4]), st.integers(0, 999))
def test_shape_contracts(H, W, s, seed):
    r = np.random.default_rng(seed)
    cfg = BackboneConfig(base_channels=2, rdb_growth=2, rdb_layers=1, num_rdbs=1, scale=s)
    L = FeatureExtractor(cfg, r)(Tensor(r.uniform(size=(1, 3, H, W))))
    Ls = TransitionBlock(cfg, r)(L)
    F = ResidualFusion(cfg, r)(L, Ls)
    Hf = Reconstructor(cfg, r)(F)
    assert L.shape == Ls.shape == F.shape == (1, 2, H, W)
    assert Hf.shape == (1, 2, H * s, W * s)


def test_backbone_end_to_end_gradient(rng):
    ext = FeatureExtractor(SMALL, rng)
    tb = TransitionBlock(SMALL, rng)
    ffm = ResidualFusion(SMALL, rng)
    rec = Reconstructor(SMALL, rng)
    head = ImageHead(SMALL, rng)
    lr = parameter(rng.uniform(size=(1, 3, 8, 12)))
    proj = Tensor(rng.normal(size=(1, 3, 16, 24)))

    def f():
        L = ext(lr)
        Ls = tb(L)
        fused = ffm(L, Ls)  # identity warp: the own-view features stand in for the warped ones
        return ops.sum(compose_sr(lr, rec(fused), head) * proj)

    params = dict(ext.named_parameters(prefix="ext."))
    params.update(rec.named_parameters(prefix="rec."))
    params["lr"] = lr
    rep = finite_diff_check(f, params, tol=1e-4, max_entries=2, floor=1e-5, kink_retries=2)
    assert rep.passed, rep.summary()


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(scale=3)
    with pytest.raises(ValueError):
        BackboneConfig(base_channels=0)
