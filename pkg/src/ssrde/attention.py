"""Cascaded bi-directional parallax attention and LR disparity regression.

Both views travel through the network stacked along the batch axis as
``[left; right]``. An attention tensor of shape (2N, H, W, W) therefore holds,
for every batch element, a row-stochastic map from its own pixels (axis 2) to
columns of the *other* view (axis 3): the first N entries are M_{r->l} (used to
bring right-view content to the left view), the last N are M_{l->r}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Conv2d, Module, Tensor, ops


def swap_views(x: Tensor) -> Tensor:
    """[left; right] -> [right; left] along the batch axis."""
    n = x.shape[0] // 2
    return ops.concat([x[n:], x[:n]], axis=0)


def view_signs(batch: int, dtype=np.float64) -> np.ndarray:
    """+1 for left-view entries, -1 for right-view entries of a stacked batch."""
    n = batch // 2
    return np.concatenate([np.ones(n), -np.ones(batch - n)]).astype(dtype)


@dataclass
class AttentionState:
    """Costs and attention maps; stacked as [own=left; own=right]."""

    cost: Tensor
    attention: Tensor
    depth: int

    @property
    def C_lr(self) -> Tensor:
        return self.cost[: self.cost.shape[0] // 2]

    @property
    def C_rl(self) -> Tensor:
        return self.cost[self.cost.shape[0] // 2:]

    @property
    def M_rl(self) -> Tensor:
        """Left pixels attending over right-view columns (softmax of C_lr)."""
        return self.attention[: self.attention.shape[0] // 2]

    @property
    def M_lr(self) -> Tensor:
        return self.attention[self.attention.shape[0] // 2:]


@dataclass
class LRDisparity:
    expected_coord: Tensor
    disparity: Tensor
    direction: str  # "left", "right" or "stacked"


class BiPAMStage(Module):
    """One biPAM: two 3x3 convs, 1x1 query/key convs, additive cost update."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)
        self.query = Conv2d(channels, channels, 1, rng)
        self.key = Conv2d(channels, channels, 1, rng)

    def refine(self, L_star: Tensor) -> Tensor:
        return self.conv2(ops.relu(self.conv1(L_star)))

    def stage_cost(self, L_prime: Tensor) -> Tensor:
        Q = ops.transpose(self.query(L_prime), (0, 2, 3, 1))
        K = ops.transpose(self.key(L_prime), (0, 2, 1, 3))
        return ops.epipolar_matmul(Q, swap_views(K))

    def forward(self, L_star: Tensor, cost: Optional[Tensor]) -> tuple[Tensor, Tensor]:
        L_prime = self.refine(L_star)
        stage = self.stage_cost(L_prime)
        cost = stage if cost is None else cost + stage
        return L_star + L_prime, cost


class BiPAMCascade(Module):
    def __init__(self, channels: int, depth: int, rng: np.random.Generator):
        if depth < 1:
            raise ValueError("cascade depth must be >= 1")
        self.stages = [BiPAMStage(channels, rng) for _ in range(depth)]

    def forward(self, L_star: Tensor) -> tuple[AttentionState, Tensor]:
        """L_star is the stacked [left; right] transition output."""
        if L_star.shape[0] % 2:
            raise ValueError(f"expected a stacked [left; right] batch, got {L_star.shape}")
        cost = None
        feats = L_star
        for stage in self.stages:
            feats, cost = stage(feats, cost)
        return AttentionState(cost, attention_from_cost(cost), len(self.stages)), feats


def bipam_cascade(cascade: BiPAMCascade, L_star_l: Tensor, L_star_r: Tensor) -> tuple[AttentionState, Tensor, Tensor]:
    if L_star_l.shape != L_star_r.shape:
        raise ValueError(f"view shape mismatch: {L_star_l.shape} vs {L_star_r.shape}")
    state, feats = cascade(ops.concat([L_star_l, L_star_r], axis=0))
    n = L_star_l.shape[0]
    return state, feats[:n], feats[n:]


def attention_from_cost(cost: Tensor) -> Tensor:
    return ops.softmax(cost, axis=-1)


def default_valid_threshold(width: int) -> float:
    return 2.0 / width


def attention_valid_mask(M: np.ndarray, threshold: float) -> np.ndarray:
    """1 where a pixel's attention peak reaches ``threshold``; shape (B, 1, H, W)."""
    return (M.max(axis=-1) >= threshold).astype(M.dtype)[:, None]


def warp_by_attention(
    M: Tensor,
    feature: Tensor,
    own: Optional[Tensor] = None,
    valid_threshold: Optional[float] = None,
) -> tuple[Tensor, np.ndarray]:
    """warped(y, x) = sum_k M(y, x, k) * feature(y, k).

    ``feature`` belongs to the view the attention points into. With ``own``
    given, pixels whose attention peak stays below ``valid_threshold`` (default
    2/W) take the own-view feature instead.
    """
    B, C, H, W = feature.shape
    if M.shape != (B, H, W, W):
        raise ValueError(f"attention {M.shape} does not match feature {feature.shape}")
    F = ops.transpose(feature, (0, 2, 3, 1))
    warped = ops.transpose(ops.matmul(M, F), (0, 3, 1, 2))
    thr = default_valid_threshold(W) if valid_threshold is None else valid_threshold
    mask = attention_valid_mask(M.data, thr)
    if own is not None:
        warped = warped * mask + own * (1.0 - mask)
    return warped, mask


def expected_coordinate(M: Tensor) -> Tensor:
    """sum_k k * M(..., k)."""
    W = M.shape[-1]
    cols = Tensor(np.arange(W, dtype=M.data.dtype).reshape(W, 1))
    return ops.reshape(ops.matmul(M, cols), M.shape[:-1])


def regress_lr_disparity(M: Tensor, direction: str | np.ndarray = "left") -> LRDisparity:
    """Disparity from an attention map.

    ``direction`` "left": disparity = x - E[k]; "right": E[k] - x. Pass
    "stacked" for a [left; right] batch. Result clamped to [0, W-1].
    """
    B, H, W, _ = M.shape
    coord = expected_coordinate(M)
    x = np.arange(W, dtype=M.data.dtype)[None, None, :]
    if isinstance(direction, str):
        if direction == "left":
            sign = np.ones((B, 1, 1), dtype=M.data.dtype)
        elif direction == "right":
            sign = -np.ones((B, 1, 1), dtype=M.data.dtype)
        elif direction == "stacked":
            sign = view_signs(B, M.data.dtype)[:, None, None]
        else:
            raise ValueError(f"unknown direction {direction!r}")
    else:
        sign = np.asarray(direction, dtype=M.data.dtype).reshape(B, 1, 1)
        direction = "custom"
    disp = ops.clamp((Tensor(x) - coord) * Tensor(sign), 0.0, W - 1.0)
    return LRDisparity(coord, disp, direction)
