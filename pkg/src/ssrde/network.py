"""The recurrent stereo SR + disparity network, unrolled for T iterations with
two SR reconstructions per iteration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .attention import (
    AttentionState,
    BiPAMCascade,
    LRDisparity,
    regress_lr_disparity,
    swap_views,
    warp_by_attention,
)
from .autodiff import Module, Tensor, ops
from .backbone import (
    BackboneConfig,
    FeatureExtractor,
    ImageHead,
    Reconstructor,
    ResidualFusion,
    TransitionBlock,
)
from .disparity import (
    CostVolume,
    HRDisparityEstimator,
    HRFeatureAggregation,
    compute_valid_masks,
    upsample_disparity,
    warp_by_disparity,
)
from .feedback import HRDIF, FeedbackState
from .resize import bicubic_upsample


@dataclass(frozen=True)
class NetworkConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cascade_depth: int = 2
    P: int = 24
    delta_d: float = 24.0
    lam: float = 1.0
    iterations: int = 2
    valid_threshold: Optional[float] = None
    learnable_alpha: bool = False
    feedback: bool = True

    @property
    def scale(self) -> int:
        return self.backbone.scale

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        bb = dict(d.pop("backbone", {}))
        if "spp_levels" in bb:
            bb["spp_levels"] = tuple(bb["spp_levels"])
        return cls(backbone=BackboneConfig(**bb), **d)


@dataclass
class IterationRecord:
    """Everything produced by one iteration; view tensors stacked [left; right]."""

    t: int
    L: Tensor
    L_star: Tensor
    L_fused: Tensor
    H: Tensor
    H_hat: Tensor
    attention: AttentionState
    lr_valid: np.ndarray
    sr0: Tensor
    sr1: Tensor
    disp_lr: LRDisparity
    disp_init: Tensor
    cost_volume: CostVolume
    disp_hr: Tensor
    valid: Tensor
    hr_att: Tensor
    feedback: Optional[FeedbackState] = None

    @staticmethod
    def split(x):
        n = x.shape[0] // 2
        return x[:n], x[n:]


@dataclass
class IterationTrace:
    records: list[IterationRecord]
    upsampled: Tensor  # bicubic-upsampled LR pair, stacked
    losses: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final_sr(self) -> Tensor:
        return self.records[-1].sr1

    @property
    def batch(self) -> int:
        return self.upsampled.shape[0] // 2


class SSRDEFNet(Module):
    def __init__(self, cfg: NetworkConfig = NetworkConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bb = cfg.backbone
        C = bb.base_channels
        self.extractor = FeatureExtractor(bb, rng)
        self.transition = TransitionBlock(bb, rng)
        self.cascade = BiPAMCascade(C, cfg.cascade_depth, rng)
        self.ffm = ResidualFusion(bb, rng)
        self.reconstructor = Reconstructor(bb, rng)
        self.head = ImageHead(bb, rng)
        self.hr_disparity = HRDisparityEstimator(cfg.P, cfg.delta_d, rng)
        self.hr_aggregation = HRFeatureAggregation(bb, rng)
        self.hrdif = HRDIF(C, bb.scale, rng, lam=cfg.lam, learnable_alpha=cfg.learnable_alpha)

    def iterate(self, t: int, L: Tensor, upsampled: Tensor, feedback: Optional[FeedbackState] = None) -> IterationRecord:
        """One pass from LR features to both SR steps and the HR disparity."""
        s = self.cfg.scale
        L_star = self.transition(L)
        att, _ = self.cascade(L_star)
        warped, lr_valid = warp_by_attention(att.attention, swap_views(L), own=L,
                                             valid_threshold=self.cfg.valid_threshold)
        L_fused = self.ffm(L, warped)
        H = self.reconstructor(L_fused)
        sr0 = upsampled + self.head(H)

        disp_lr = regress_lr_disparity(att.attention, "stacked")
        init = upsample_disparity(disp_lr.disparity, s)
        cv, disp_hr = self.hr_disparity(H, init)
        valid = compute_valid_masks(disp_hr)
        H_warped = warp_by_disparity(swap_views(H), disp_hr)
        H_hat, hr_att = self.hr_aggregation(H, H_warped)
        sr1 = upsampled + self.head(H_hat)
        return IterationRecord(t, L, L_star, L_fused, H, H_hat, att, lr_valid, sr0, sr1,
                               disp_lr, init, cv, disp_hr, valid, hr_att, feedback)

    def forward(self, lr_l: Tensor, lr_r: Tensor, iterations: Optional[int] = None) -> IterationTrace:
        lr_l, lr_r = _as_image(lr_l), _as_image(lr_r)
        if lr_l.shape != lr_r.shape:
            raise ValueError(f"left/right shape mismatch: {lr_l.shape} vs {lr_r.shape}")
        T = self.cfg.iterations if iterations is None else iterations
        if T < 1:
            raise ValueError("need at least one iteration")
        lr = ops.concat([lr_l, lr_r], axis=0)
        upsampled = bicubic_upsample(lr, self.cfg.scale)
        L0 = self.extractor(lr)
        records: list[IterationRecord] = []
        L = L0
        state = None
        for t in range(1, T + 1):
            if t > 1 and self.cfg.feedback:
                prev = records[-1]
                L, state = self.hrdif(t, prev.L, prev.H_hat, prev.disp_hr)
            records.append(self.iterate(t, L, upsampled, state))
        return IterationTrace(records, upsampled)

    def feedforward(self, lr_l: Tensor, lr_r: Tensor) -> IterationRecord:
        """Single pass without any feedback machinery."""
        lr = ops.concat([_as_image(lr_l), _as_image(lr_r)], axis=0)
        upsampled = bicubic_upsample(lr, self.cfg.scale)
        return self.iterate(1, self.extractor(lr), upsampled)


def _as_image(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim == 3:
        t = ops.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[1] != 3:
        raise ValueError(f"expected N x 3 x H x W images, got {t.shape}")
    return t
