"""HR disparity information feedback: down-projected HR features with a
high-frequency attention (AHFF), low-level enrichment from the HR disparity
cube (LRE), and the fusion that seeds the next iteration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import swap_views
from .autodiff import Conv2d, ConvTranspose2d, Module, PReLU, Tensor, ops
from .disparity import match_positions


@dataclass
class FeedbackState:
    iteration: int
    LB: Tensor
    W_att: Tensor
    L_hat: Tensor
    lam: float


class AHFF(Module):
    """LB = down(H_hat); W = PReLU(deconv(avgpool(LB)) - LB); LB + lam * LB * W."""

    def __init__(
        self,
        channels: int,
        scale: int,
        rng: np.random.Generator,
        lam: float = 1.0,
        pool: int = 2,
        learnable_alpha: bool = False,
    ):
        n_down = {2: 1, 4: 2}.get(scale)
        if n_down is None:
            raise ValueError(f"unsupported scale {scale}")
        self.down = [Conv2d(channels, channels, 3, rng, stride=2, padding=1) for _ in range(n_down)]
        self.pool = pool
        self.deconv = ConvTranspose2d(channels, channels, 2 * pool, rng, stride=pool, padding=pool // 2)
        # alpha fixed at 0 keeps the attention non-negative
        self.act = PReLU(channels, init=0.25 if learnable_alpha else 0.0, learnable=learnable_alpha)
        self.lam = float(lam)

    def project(self, H_hat: Tensor) -> Tensor:
        x = H_hat
        for i, conv in enumerate(self.down):
            x = conv(x)
            if i + 1 < len(self.down):
                x = ops.relu(x)
        return x

    def attention(self, LB: Tensor) -> Tensor:
        h, w = LB.shape[-2:]
        window = min(self.pool, h, w)
        LP = ops.avg_pool(LB, window)
        up = self.deconv(LP)
        up = up[:, :, :h, :w]
        if up.shape != LB.shape:
            raise ValueError(f"deconvolved map {up.shape} cannot cover {LB.shape}")
        return self.act(up - LB)

    def forward(self, H_hat: Tensor) -> tuple[Tensor, Tensor]:
        LB = self.project(H_hat)
        if self.lam == 0.0:
            return LB, Tensor(np.zeros(LB.shape, dtype=LB.data.dtype))
        W_att = self.attention(LB)
        return LB + (LB * W_att) * self.lam, W_att


class ResBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(ops.relu(self.conv1(x)))


def disparity_cube(hr_disp: Tensor, s: int) -> Tensor:
    """(B, sH, sW) HR disparity -> (B, s*s, H, W) slices in LR pixel units."""
    B, Hs, Ws = hr_disp.shape
    if Hs % s or Ws % s:
        raise ValueError(f"HR disparity {Hs}x{Ws} not divisible by {s}")
    cube = ops.space_to_depth(ops.reshape(hr_disp, (B, 1, Hs, Ws)), s)
    return cube * (1.0 / s)


class LRE(Module):
    """Sum over the s^2 disparity slices of fusion(ResB(concat(L_own, warp(L_other, slice))))."""

    def __init__(self, channels: int, scale: int, rng: np.random.Generator):
        self.scale = scale
        self.resblock = ResBlock(2 * channels, rng)
        self.fusion = Conv2d(2 * channels, channels, 1, rng)

    def slice_outputs(self, L_own: Tensor, L_other: Tensor, hr_disp: Tensor, sign=None) -> Tensor:
        """Per-slice fused maps, shape (B, s*s, C, H, W)."""
        B, C, H, W = L_own.shape
        s = self.scale
        if hr_disp.shape != (B, H * s, W * s):
            raise ValueError(f"HR disparity {hr_disp.shape} does not match LR features {L_own.shape} at x{s}")
        cube = disparity_cube(hr_disp, s)
        k = s * s
        warped = ops.sample_rows(L_other, match_positions(cube, sign))  # (B, C, k, H, W)
        warped = ops.transpose(warped, (0, 2, 1, 3, 4))
        own = ops.reshape(L_own, (B, 1, C, H, W)) + Tensor(np.zeros((1, k, 1, 1, 1), dtype=L_own.data.dtype))
        pair = ops.concat([own, warped], axis=2)
        pair = ops.reshape(pair, (B * k, 2 * C, H, W))
        fused = self.fusion(self.resblock(pair))
        return ops.reshape(fused, (B, k, C, H, W))

    def forward(self, L_own: Tensor, L_other: Tensor, hr_disp: Tensor, sign=None) -> Tensor:
        return ops.sum(self.slice_outputs(L_own, L_other, hr_disp, sign), axis=1)


class FeedbackFusion(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv2d(2 * channels, channels, 1, rng)

    def forward(self, L_hat: Tensor, LB: Tensor) -> Tensor:
        if L_hat.shape != LB.shape:
            raise ValueError(f"feedback shape mismatch: {L_hat.shape} vs {LB.shape}")
        return self.conv(ops.concat([L_hat, LB], axis=1))


class HRDIF(Module):
    """Bundles AHFF, LRE and the fusion for a stacked [left; right] batch."""

    def __init__(self, channels: int, scale: int, rng: np.random.Generator, lam: float = 1.0,
                 learnable_alpha: bool = False):
        self.ahff = AHFF(channels, scale, rng, lam=lam, learnable_alpha=learnable_alpha)
        self.lre = LRE(channels, scale, rng)
        self.fuse = FeedbackFusion(channels, rng)

    def forward(self, iteration: int, L_prev: Tensor, H_hat_prev: Tensor, hr_disp_prev: Tensor,
                sign=None) -> tuple[Tensor, FeedbackState]:
        LB, W_att = self.ahff(H_hat_prev)
        L_hat = self.lre(L_prev, swap_views(L_prev), hr_disp_prev, sign)
        state = FeedbackState(iteration, LB, W_att, L_hat, self.ahff.lam)
        return self.fuse(L_hat, LB), state

