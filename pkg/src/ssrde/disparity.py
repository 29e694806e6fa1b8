"""Coarse-to-fine HR disparity: partial cost volumes around the upsampled LR
estimate, hourglass aggregation, soft-argmax, cross-check masks, and
attention-gated aggregation of disparity-aligned HR features.

Tensors are stacked [left; right] on the batch axis as in ``attention``. A
left-view pixel at column x matches the right view at x - d; a right-view
pixel matches the left view at x + d. ``sign`` arrays (+1 left, -1 right)
carry that convention per batch entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import swap_views, view_signs
from .autodiff import Conv2d, ConvTranspose2d, Module, Tensor, ops
from .autodiff.tensor import make_result
from .backbone import BackboneConfig, ResidualFusion
from .resize import bilinear_resize


@dataclass
class CostVolume:
    cost: Tensor  # (B, P, sH, sW)
    hypotheses: Tensor  # (B, P, sH, sW), HR pixels
    P: int
    delta_d: float


@dataclass
class HRDisparity:
    disp: Tensor  # (B, sH, sW)
    direction: str


def _signs(sign, batch: int, dtype) -> np.ndarray:
    if sign is None or (isinstance(sign, str) and sign == "stacked"):
        return view_signs(batch, dtype)
    if isinstance(sign, str):
        if sign not in ("left", "right"):
            raise ValueError(f"unknown direction {sign!r}")
        return np.full(batch, 1.0 if sign == "left" else -1.0, dtype=dtype)
    return np.broadcast_to(np.asarray(sign, dtype=dtype), (batch,)).copy()


def match_positions(disp: Tensor, sign=None) -> Tensor:
    """Column each pixel samples in the other view: x - sign * disp.

    ``disp`` is (B, H, W) or (B, P, H, W).
    """
    W = disp.shape[-1]
    B = disp.shape[0]
    s = _signs(sign, B, disp.data.dtype).reshape((B,) + (1,) * (disp.ndim - 1))
    x = np.arange(W, dtype=disp.data.dtype)
    return Tensor(x) - disp * Tensor(s)


def upsample_disparity(lr_disp: Tensor, s: int) -> Tensor:
    """Bilinear upsampling to sH x sW with values rescaled to HR pixels."""
    B, H, W = lr_disp.shape
    up = bilinear_resize(ops.reshape(lr_disp, (B, 1, H, W)), (H * s, W * s))
    return ops.reshape(up, (B, H * s, W * s)) * float(s)


def disparity_hypotheses(init: Tensor, P: int, delta_d: float) -> Tensor:
    """P samples spread uniformly over [max(init - dD/2, 0), min(init + dD/2, sW)).

    With no clamping the grid is init - dD/2 + j * dD/P for j = 0..P-1.
    """
    if P < 2:
        raise ValueError(f"need at least 2 disparity hypotheses, got P={P}")
    B, H, W = init.shape
    lo = ops.maximum(init - delta_d / 2.0, 0.0)
    hi = ops.minimum(init + delta_d / 2.0, float(W))
    frac = Tensor((np.arange(P, dtype=init.data.dtype) / P).reshape(1, P, 1, 1))
    lo4 = ops.reshape(lo, (B, 1, H, W))
    hi4 = ops.reshape(hi, (B, 1, H, W))
    return lo4 + (hi4 - lo4) * frac


def _gather_rows(F: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """F (B, C, H, W), cols (B, P, H, W') int -> (B, C, P, H, W')."""
    B, C, H, W = F.shape
    _, P, _, Wq = cols.shape
    idx = ((np.arange(H) * W)[None, None, :, None] + cols).reshape(B, 1, -1)
    return np.take_along_axis(F.reshape(B, C, H * W), idx, axis=2).reshape(B, C, P, H, Wq)


def correlation_volume(own: Tensor, other: Tensor, xpos: Tensor) -> Tensor:
    """cost[b, j, y, x] = mean_c own[b, c, y, x] * other[b, c, y, xpos[b, j, y, x]].

    ``other`` is sampled bilinearly along its rows with zeros outside the
    image. Fused so that the (B, C, P, H, W) sample tensor is never kept.
    """
    if own.shape != other.shape:
        raise ValueError(f"feature shape mismatch: {own.shape} vs {other.shape}")
    B, C, H, W = own.shape
    if xpos.shape[0] != B or xpos.shape[2:] != (H, W):
        raise ValueError(f"positions {xpos.shape} do not match features {own.shape}")
    A = own.data
    F = other.data
    pos = xpos.data
    x0f = np.floor(pos)
    frac = pos - x0f
    x0 = x0f.astype(np.int64)
    x1 = x0 + 1
    v0 = (x0 >= 0) & (x0 <= W - 1)
    v1 = (x1 >= 0) & (x1 <= W - 1)
    c0 = np.clip(x0, 0, W - 1)
    c1 = np.clip(x1, 0, W - 1)
    w0 = np.where(v0, 1.0 - frac, 0.0).astype(A.dtype)
    w1 = np.where(v1, frac, 0.0).astype(A.dtype)

    def corr(cols):
        return np.einsum("bchw,bcphw->bphw", A, _gather_rows(F, cols), optimize=True) / C

    G0 = corr(c0)
    G1 = corr(c1)
    out = w0 * G0 + w1 * G1

    def bw(g):
        g_own = g_other = g_pos = None
        if own.requires_grad:
            S = _gather_rows(F, c0) * w0[:, None] + _gather_rows(F, c1) * w1[:, None]
            g_own = np.einsum("bphw,bcphw->bchw", g, S, optimize=True) / C
            del S
        if other.requires_grad:
            P = pos.shape[1]
            base = (np.arange(B * C) * (H * W)).reshape(B, C, 1, 1, 1)
            row = (np.arange(H) * W)[None, None, None, :, None]
            contrib = A[:, :, None] * (g / C)[:, None]  # (B, C, P, H, W)
            size = B * C * H * W
            idx0 = (base + row + c0[:, None]).ravel()
            idx1 = (base + row + c1[:, None]).ravel()
            g_other = np.bincount(idx0, (contrib * w0[:, None]).ravel(), size)
            g_other += np.bincount(idx1, (contrib * w1[:, None]).ravel(), size)
            g_other = g_other.reshape(B, C, H, W).astype(A.dtype, copy=False)
            del contrib, P
        if xpos.requires_grad:
            g_pos = g * (G1 * v1 - G0 * v0)
        return g_own, g_other, g_pos

    return make_result(out, (own, other, xpos), bw, "correlation_volume")


def build_partial_cost_volume(
    H_own: Tensor,
    H_other: Tensor,
    init_disp: Tensor,
    P: int = 24,
    delta_d: float = 24.0,
    sign=None,
) -> CostVolume:
    hyps = disparity_hypotheses(init_disp, P, delta_d)
    cost = correlation_volume(H_own, H_other, match_positions(hyps, sign))
    return CostVolume(cost, hyps, P, delta_d)


class Hourglass(Module):
    """Two stride-2 convs down, two transposed convs up, additive skips; P channels throughout."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.down1 = Conv2d(channels, channels, 3, rng, stride=2, padding=1)
        self.down2 = Conv2d(channels, channels, 3, rng, stride=2, padding=1)
        self.up1 = ConvTranspose2d(channels, channels, 4, rng, stride=2, padding=1)
        self.up2 = ConvTranspose2d(channels, channels, 4, rng, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[-2:]
        ph, pw = (-H) % 4, (-W) % 4
        xp = ops.pad2d(x, (0, ph, 0, pw)) if (ph or pw) else x
        d1 = ops.relu(self.down1(xp))
        d2 = ops.relu(self.down2(d1))
        u1 = ops.relu(self.up1(d2) + d1)
        out = self.up2(u1) + xp
        if ph or pw:
            out = out[:, :, :H, :W]
        return out


def aggregate_hourglass(hourglass: Hourglass, cv: CostVolume) -> CostVolume:
    return CostVolume(hourglass(cv.cost), cv.hypotheses, cv.P, cv.delta_d)


def soft_argmax(cv: CostVolume) -> Tensor:
    """sum_j softmax_j(cost) * d_j, per pixel; returns (B, sH, sW)."""
    prob = ops.softmax(cv.cost, axis=1)
    return ops.sum(prob * cv.hypotheses, axis=1)


def warp_by_disparity(feature: Tensor, disp: Tensor, sign=None) -> Tensor:
    """Bilinear sample of ``feature`` at (y, x - sign * disp); zeros out of view."""
    B, C, H, W = feature.shape
    if disp.shape != (B, H, W):
        raise ValueError(f"disparity {disp.shape} does not match feature {feature.shape}")
    pos = ops.reshape(match_positions(disp, sign), (B, 1, H, W))
    return ops.reshape(ops.sample_rows(feature, pos), (B, C, H, W))


def out_of_view_mask(disp: Tensor | np.ndarray, sign=None) -> np.ndarray:
    """1.0 where the matched column lies inside the other image, else 0.0; (B, H, W)."""
    d = disp.data if isinstance(disp, Tensor) else np.asarray(disp)
    B, H, W = d.shape
    s = _signs(sign, B, d.dtype).reshape(B, 1, 1)
    pos = np.arange(W, dtype=d.dtype) - s * d
    return ((pos >= 0) & (pos <= W - 1)).astype(d.dtype)


def compute_valid_masks(disp: Tensor, sign=None) -> Tensor:
    """V = 1 - tanh(0.2 |D - Warp(D_other, D)|) for a stacked [left; right] disparity."""
    B, H, W = disp.shape
    other = ops.reshape(swap_views(ops.reshape(disp, (B, 1, H, W))), (B, 1, H, W))
    back = ops.reshape(warp_by_disparity(other, disp, sign), (B, H, W))
    return 1.0 - ops.tanh(ops.abs(disp - back) * 0.2)


class HRFeatureAggregation(Module):
    """Att = sigmoid(5 conv1(H_own) * conv2(H_warped)); H_hat = CA(RDB((H_warped - H_own) Att) + H_own)."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        C = cfg.base_channels
        self.conv1 = Conv2d(C, C, 3, rng)
        self.conv2 = Conv2d(C, C, 3, rng)
        self.fusion = ResidualFusion(cfg, rng)

    def attention(self, H_own: Tensor, H_warped: Tensor) -> Tensor:
        return ops.sigmoid(self.conv1(H_own) * self.conv2(H_warped) * 5.0)

    def forward(self, H_own: Tensor, H_warped: Tensor) -> tuple[Tensor, Tensor]:
        if H_own.shape != H_warped.shape:
            raise ValueError(f"shape mismatch: {H_own.shape} vs {H_warped.shape}")
        att = self.attention(H_own, H_warped)
        res = (H_warped - H_own) * att
        return self.fusion.fuse_residual(res, H_own), att


class HRDisparityEstimator(Module):
    """Partial cost volume -> hourglass -> soft-argmax, for a stacked pair."""

    def __init__(self, P: int, delta_d: float, rng: np.random.Generator):
        if P < 2:
            raise ValueError(f"P must be >= 2, got {P}")
        self.P = P
        self.delta_d = float(delta_d)
        self.hourglass = Hourglass(P, rng)

    def forward(self, H: Tensor, init_disp: Tensor, sign=None) -> tuple[CostVolume, Tensor]:
        cv = build_partial_cost_volume(H, swap_views(H), init_disp, self.P, self.delta_d, sign)
        agg = aggregate_hourglass(self.hourglass, cv)
        return agg, soft_argmax(agg)
