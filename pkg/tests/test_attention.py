import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from oracles import attention_warp_loops
from ssrde.attention import (BiPAMCascade, attention_from_cost, expected_coordinate, regress_lr_disparity,
                             swap_views, warp_by_attention)
from ssrde.autodiff import Tensor


def identity_attention(B, H, W):
    return np.broadcast_to(np.eye(W), (B, H, W, W)).copy()


def shifted_delta(B, H, W, d):
    """M(y, x, k) = 1 at k = x - d (left view), own column where x < d."""
    M = np.zeros((B, H, W, W))
    for x in range(W):
        M[:, :, x, x - d if x >= d else x] = 1.0
    return M


def test_single_stage_zero_query_gives_uniform(rng):
    cas = BiPAMCascade(4, 1, rng)
    cas.stages[0].query.weight.data[...] = 0.0
    cas.stages[0].query.bias.data[...] = 0.0
    state, _ = cas(Tensor(rng.normal(size=(2, 4, 3, 6))))
    assert not state.cost.data.any()
    np.testing.assert_allclose(state.attention.data, 1 / 6, atol=1e-15)


def test_cost_accumulates_over_stages(rng):
    cas = BiPAMCascade(4, 2, rng)
    x = Tensor(rng.normal(size=(2, 4, 3, 6)))
    s1, s2 = cas.stages
    f1, c1 = s1(x, None)
    _, c2_only = s2(f1, None)
    state, _ = cas(x)
    np.testing.assert_allclose(state.cost.data, c1.data + c2_only.data, atol=1e-12)


def test_zero_refinement_keeps_features(rng):
    cas = BiPAMCascade(4, 2, rng)
    for st_ in cas.stages:
        st_.conv2.weight.data[...] = 0.0
        st_.conv2.bias.data[...] = 0.0
    x = Tensor(rng.normal(size=(2, 4, 3, 6)))
    _, feats = cas(x)
    assert np.array_equal(feats.data, x.data)


def test_frozen_second_stage_equals_single_stage(rng):
    two = BiPAMCascade(4, 2, rng)
    one = BiPAMCascade(4, 1, rng)
    one.load_state_dict({k: v for k, v in two.state_dict().items() if k.startswith("stages.0.")})
    for p in two.stages[1].parameters():
        p.data[...] = 0.0
    x = Tensor(rng.normal(size=(2, 4, 3, 6)))
    a, _ = two(x)
    b, _ = one(x)
    np.testing.assert_array_equal(a.attention.data, b.attention.data)


def test_identity_attention_warp(rng):
    F = rng.normal(size=(2, 3, 4, 7))
    out, _ = warp_by_attention(Tensor(identity_attention(2, 4, 7)), Tensor(F))
    assert np.max(np.abs(out.data - F)) <= 1e-12


def test_uniform_attention_is_row_mean(rng):
    F = rng.normal(size=(1, 2, 3, 5))
    out, _ = warp_by_attention(Tensor(np.full((1, 3, 5, 5), 0.2)), Tensor(F))
    np.testing.assert_allclose(out.data, np.broadcast_to(F.mean(-1, keepdims=True), F.shape), atol=1e-14)


def test_attention_warp_matches_loops(rng):
    M = attention_from_cost(Tensor(rng.normal(size=(2, 4, 6, 6)) * 3)).data
    F = rng.normal(size=(2, 3, 4, 6))
    out, _ = warp_by_attention(Tensor(M), Tensor(F))
    assert np.max(np.abs(out.data - attention_warp_loops(M, F))) < 1e-12


def test_low_peak_pixels_keep_own_feature(rng):
    W = 8
    M = np.full((1, 2, W, W), 1 / W)
    M[0, 0] = np.eye(W)
    F, own = rng.normal(size=(1, 1, 2, W)), rng.normal(size=(1, 1, 2, W))
    out, mask = warp_by_attention(Tensor(M), Tensor(F), own=Tensor(own), valid_threshold=0.5)
    assert mask[0, 0, 0].all() and not mask[0, 0, 1].any()
    np.testing.assert_array_equal(out.data[0, 0, 1], own[0, 0, 1])


def test_identity_attention_zero_disparity():
    reg = regress_lr_disparity(Tensor(identity_attention(1, 3, 6)), "left")
    np.testing.assert_array_equal(reg.expected_coord.data, np.broadcast_to(np.arange(6.0), (1, 3, 6)))
    assert not reg.disparity.data.any()


def test_shifted_delta_recovers_shift():
    reg = regress_lr_disparity(Tensor(shifted_delta(1, 3, 10, 2)), "left")
    assert np.array_equal(reg.disparity.data[..., 2:], np.full((1, 3, 8), 2.0))


def test_uniform_map_expected_coordinate():
    ec = expected_coordinate(Tensor(np.full((1, 2, 4, 4), 0.25))).data
    np.testing.assert_allclose(ec, 1.5, atol=1e-15)


def test_stacked_direction_signs():
    W, d = 9, 3
    left = shifted_delta(1, 2, W, d)
    right = np.zeros((1, 2, W, W))  # right pixel x matches the left view at x + d
    for x in range(W):
        right[:, :, x, x + d if x + d < W else x] = 1.0
    reg = regress_lr_disparity(Tensor(np.concatenate([left, right])), "stacked")
    assert np.all(reg.disparity.data[0, :, d:] == d)
    assert np.all(reg.disparity.data[1, :, : W - d] == d)


@given(st.integers(0, 10_000), st.integers(2, 9))
def test_expected_coordinate_is_convex_combination(seed, W):
    r = np.random.default_rng(seed)
    M = attention_from_cost(Tensor(r.normal(size=(2, 3, W, W)) * 10)).data
    ec = expected_coordinate(Tensor(M)).data
    assert np.all(ec >= -1e-12) and np.all(ec <= W - 1 + 1e-12)


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_constant_shift_pair_regresses_shift(seed, d):
    """A rigidly shifted stereo pair with its hand-built delta attention gives d on visible pixels."""
    r = np.random.default_rng(seed)
    W = 16
    strip = r.normal(size=(1, 2, 4, W + d))
    left, right = strip[..., :W], strip[..., d:d + W]
    M = shifted_delta(1, 4, W, d)
    warped, _ = warp_by_attention(Tensor(M), Tensor(right))
    np.testing.assert_allclose(warped.data[..., d:], left[..., d:], atol=1e-12)
    disp = regress_lr_disparity(Tensor(M), "left").disparity.data
    assert np.array_equal(disp[..., d:], np.full((1, 4, W - d), float(d)))


def test_swap_views_round_trip(rng):
    x = rng.normal(size=(4, 2, 3, 3))
    s = swap_views(Tensor(x)).data
    assert np.array_equal(s[:2], x[2:]) and np.array_equal(swap_views(Tensor(s)).data, x)
