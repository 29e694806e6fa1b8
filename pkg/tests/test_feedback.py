import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssrde.autodiff import Tensor, ops, parameter
from ssrde.disparity import warp_by_disparity
from ssrde.feedback import AHFF, HRDIF, LRE, FeedbackFusion, disparity_cube
from ssrde.network import NetworkConfig, SSRDEFNet
from ssrde.backbone import BackboneConfig

TINY = BackboneConfig(base_channels=4, rdb_growth=4, rdb_layers=1, num_rdbs=1)


def tiny_net(iterations=2, feedback=True, seed=0):
    return SSRDEFNet(NetworkConfig(TINY, cascade_depth=1, P=6, delta_d=6.0, iterations=iterations,
                                   feedback=feedback), seed=seed)


def test_ahff_perfect_reconstruction_leaves_lb(rng):
    ahff = AHFF(3, 2, rng)
    # stand-in deconvolution that exactly undoes 2x2 average pooling of block-constant maps
    ahff.deconv = lambda x: Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))
    blocks = rng.normal(size=(1, 3, 3, 4))
    LB = Tensor(np.repeat(np.repeat(blocks, 2, axis=2), 2, axis=3))
    W = ahff.attention(LB)
    assert not W.data.any()
    ahff.project = lambda H: LB
    out, _ = ahff(None)
    assert np.array_equal(out.data, LB.data)


def test_ahff_lambda_zero_is_plain_projection(rng):
    ahff = AHFF(4, 2, rng, lam=0.0)
    H = Tensor(rng.normal(size=(1, 4, 8, 12)))
    out, _ = ahff(H)
    assert np.array_equal(out.data, ahff.project(H).data)


@pytest.mark.parametrize("s", [2, 4])
def test_ahff_output_at_lr_size(rng, s):
    ahff = AHFF(4, s, rng)
    out, W = ahff(Tensor(rng.normal(size=(1, 4, 8 * s, 12 * s))))
    assert out.shape == W.shape == (1, 4, 8, 12)


@given(st.integers(0, 10_000))
def test_ahff_attention_non_negative(seed):
    r = np.random.default_rng(seed)
    ahff = AHFF(3, 2, r)
    _, W = ahff(Tensor(r.normal(size=(1, 3, 12, 16)) * 3))
    assert np.all(W.data >= 0)


def test_disparity_cube_slices(rng):
    for s in (2, 4):
        cube = disparity_cube(Tensor(rng.uniform(0, 8, size=(1, 8 * s, 4 * s))), s)
        assert cube.shape == (1, s * s, 8, 4)


def test_lre_zero_disparity_sums_identical_slices(rng):
    s = 2
    lre = LRE(4, s, rng)
    Lo, Lt = rng.normal(size=(1, 4, 6, 8)), rng.normal(size=(1, 4, 6, 8))
    out = lre(Tensor(Lo), Tensor(Lt), Tensor(np.zeros((1, 12, 16))), sign="left").data
    single = lre.fusion(lre.resblock(ops.concat([Tensor(Lo), Tensor(Lt)], axis=1))).data
    np.testing.assert_allclose(out, s * s * single, atol=1e-12)


@pytest.mark.parametrize("s", [2, 4])
def test_lre_constant_disparity_matches_single_warp(rng, s):
    d = 2
    lre = LRE(4, s, rng)
    Lo, Lt = Tensor(rng.normal(size=(1, 4, 5, 12))), Tensor(rng.normal(size=(1, 4, 5, 12)))
    hr = Tensor(np.full((1, 5 * s, 12 * s), float(s * d)))
    slices = lre.slice_outputs(Lo, Lt, hr, sign="left").data
    assert slices.shape[1] == s * s
    warped = warp_by_disparity(Lt, Tensor(np.full((1, 5, 12), float(d))), "left")
    ref = lre.fusion(lre.resblock(ops.concat([Lo, warped], axis=1))).data
    for k in range(s * s):
        np.testing.assert_allclose(slices[0, k], ref[0], atol=1e-12)


def test_fusion_shape_zero_and_gradients(rng):
    fuse = FeedbackFusion(4, rng)
    a, b = parameter(rng.normal(size=(1, 4, 5, 6))), parameter(rng.normal(size=(1, 4, 5, 6)))
    out = fuse(a, b)
    assert out.shape[1] == 4
    ops.sum(out * Tensor(rng.normal(size=out.shape))).backward()
    assert np.abs(a.grad).sum() > 0 and np.abs(b.grad).sum() > 0
    for p in fuse.parameters():
        p.data[...] = 0.0
    assert not fuse(a, b).data.any()


def test_hrdif_state_at_lr_resolution(rng):
    hrdif = HRDIF(4, 2, rng)
    L = Tensor(rng.normal(size=(2, 4, 6, 8)))
    H_hat = Tensor(rng.normal(size=(2, 4, 12, 16)))
    disp = Tensor(rng.uniform(0, 3, size=(2, 12, 16)))
    nxt, state = hrdif(2, L, H_hat, disp)
    assert nxt.shape == L.shape
    for t in (state.LB, state.W_att, state.L_hat):
        assert t.shape == L.shape


# --- unrolling ---------------------------------------------------------------

def test_t1_equals_feedforward(rng):
    net = tiny_net(iterations=1)
    ll, lr = rng.uniform(size=(1, 3, 6, 12)), rng.uniform(size=(1, 3, 6, 12))
    tr = net(Tensor(ll), Tensor(lr))
    ff = net.feedforward(Tensor(ll), Tensor(lr))
    assert len(tr) == 1 and tr.records[0].feedback is None
    for name in ("sr0", "sr1", "disp_init", "disp_hr"):
        assert np.array_equal(getattr(tr.records[0], name).data, getattr(ff, name).data)


def test_feedback_off_equals_feedforward_every_iteration(rng):
    net = tiny_net(iterations=2, feedback=False)
    ll, lr = rng.uniform(size=(1, 3, 6, 12)), rng.uniform(size=(1, 3, 6, 12))
    tr = net(Tensor(ll), Tensor(lr))
    ff = net.feedforward(Tensor(ll), Tensor(lr))
    for rec in tr.records:
        assert rec.feedback is None
        assert np.array_equal(rec.sr1.data, ff.sr1.data)


def test_parameter_count_independent_of_T():
    assert tiny_net(1).num_parameters() == tiny_net(3).num_parameters()


def test_iterations_share_parameters(rng):
    net = tiny_net(2)
    ll, lr = Tensor(rng.uniform(size=(1, 3, 6, 12))), Tensor(rng.uniform(size=(1, 3, 6, 12)))
    tr = net(ll, lr)
    ops.sum(tr.records[1].sr1).backward()
    # the reconstructor receives gradient from both iterations through a single set of weights
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    assert tr.records[1].feedback is not None
