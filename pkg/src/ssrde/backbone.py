"""Per-view SR backbone: hierarchical RDB features, the SPP transition block,
residual cross-view fusion, and HR reconstruction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Conv2d, Module, Tensor, ops
from .resize import adaptive_avg_pool, bicubic_upsample, nearest_resize


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 16
    rdb_layers: int = 4
    rdb_growth: int = 16
    num_rdbs: int = 4
    scale: int = 2
    spp_levels: tuple[int, ...] = (1, 2, 4)
    ca_reduction: int = 4

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        for name in ("base_channels", "rdb_layers", "rdb_growth", "num_rdbs", "ca_reduction"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class ViewFeatures:
    L: Tensor
    L_star: Tensor
    L_fused: Tensor
    H: Tensor


class RDB(Module):
    """Residual dense block: densely connected 3x3 convs, 1x1 local fusion, local residual."""

    def __init__(self, channels: int, growth: int, layers: int, rng: np.random.Generator):
        self.convs = [Conv2d(channels + i * growth, growth, 3, rng) for i in range(layers)]
        self.fuse = Conv2d(channels + layers * growth, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            inp = feats[0] if len(feats) == 1 else ops.concat(feats, axis=1)
            feats.append(ops.relu(conv(inp)))
        return x + self.fuse(ops.concat(feats, axis=1))


class CALayer(Module):
    """Channel attention: global average pool, 1x1 squeeze/excite, sigmoid gate."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        hidden = max(1, channels // reduction)
        self.squeeze = Conv2d(channels, hidden, 1, rng)
        self.excite = Conv2d(hidden, channels, 1, rng)

    def gates(self, x: Tensor) -> Tensor:
        pooled = ops.mean(x, axis=(2, 3), keepdims=True)
        return ops.sigmoid(self.excite(ops.relu(self.squeeze(pooled))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gates(x)


class HierarchicalFeatures(Module):
    """Shallow conv, a stack of RDBs, and 1x1 fusion of all RDB outputs."""

    def __init__(self, in_ch: int, cfg: BackboneConfig, rng: np.random.Generator):
        C = cfg.base_channels
        self.shallow = Conv2d(in_ch, C, 3, rng)
        self.rdbs = [RDB(C, cfg.rdb_growth, cfg.rdb_layers, rng) for _ in range(cfg.num_rdbs)]
        self.fuse = Conv2d(C * cfg.num_rdbs, C, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.shallow(x)
        outs = []
        for rdb in self.rdbs:
            h = rdb(h)
            outs.append(h)
        return self.fuse(ops.concat(outs, axis=1))


class FeatureExtractor(HierarchicalFeatures):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__(3, cfg, rng)

    def forward(self, lr_image: Tensor) -> Tensor:
        if lr_image.ndim != 4 or lr_image.shape[1] != 3:
            raise ValueError(f"expected an N x 3 x H x W image, got {lr_image.shape}")
        return super().forward(lr_image)


class TransitionBlock(Module):
    """Spatial pyramid pooling: pooled grids restored by nearest upsampling,
    concatenated with the input and fused by a 1x1 conv."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        C = cfg.base_channels
        self.levels = tuple(cfg.spp_levels)
        self.fuse = Conv2d(C * (1 + len(self.levels)), C, 1, rng)

    def pyramid(self, L: Tensor) -> list[Tensor]:
        H, W = L.shape[-2:]
        return [nearest_resize(adaptive_avg_pool(L, (lv, lv)), (H, W)) for lv in self.levels]

    def forward(self, L: Tensor) -> Tensor:
        if not self.levels:
            return self.fuse(L)
        return self.fuse(ops.concat([L] + self.pyramid(L), axis=1))


class ResidualFusion(Module):
    """out = CALayer(RDB(residual) + own), the residual-based cross-view aggregation."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        C = cfg.base_channels
        self.rdb = RDB(C, cfg.rdb_growth, cfg.rdb_layers, rng)
        self.ca = CALayer(C, cfg.ca_reduction, rng)

    def fuse_residual(self, residual: Tensor, own: Tensor) -> Tensor:
        return self.ca(self.rdb(residual) + own)

    def forward(self, own: Tensor, warped: Tensor) -> Tensor:
        if own.shape != warped.shape:
            raise ValueError(f"fusion shape mismatch: own {own.shape} vs warped {warped.shape}")
        return self.fuse_residual(warped - own, own)


class Reconstructor(Module):
    """Same layout as the feature extractor, then conv to C*s^2 and pixel shuffle."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        C = cfg.base_channels
        self.scale = cfg.scale
        self.body = HierarchicalFeatures(C, cfg, rng)
        self.expand = Conv2d(C, C * cfg.scale ** 2, 3, rng)

    def forward(self, L_fused: Tensor) -> Tensor:
        return ops.pixel_shuffle(self.expand(self.body(L_fused)), self.scale)


class ImageHead(Module):
    """3x3 conv from HR features to an RGB residual; shared by both SR steps."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.conv = Conv2d(cfg.base_channels, 3, 3, rng)

    def forward(self, H: Tensor) -> Tensor:
        return self.conv(H)


def compose_sr(lr_image: Tensor, H: Tensor, head: ImageHead, upsampled: Optional[Tensor] = None) -> Tensor:
    """SR = bicubic(lr) + head(H). Pass ``upsampled`` to reuse a cached bicubic image."""
    s = H.shape[-1] // lr_image.shape[-1]
    up = upsampled if upsampled is not None else bicubic_upsample(lr_image, s)
    return up + head(H)

