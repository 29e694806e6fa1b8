"""Stereo data: synthetic constant-disparity scenes and folders of PNG pairs,
cut into LR/HR training patches."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor, no_grad
from .resize import bicubic_downsample

TEXTURES = ("noise", "gradients")


@dataclass
class SyntheticScene:
    hr_left: np.ndarray  # (3, H, W)
    hr_right: np.ndarray
    lr_left: np.ndarray  # (3, H/s, W/s)
    lr_right: np.ndarray
    gt_disparity: np.ndarray  # (H, W), HR pixels, left view
    gt_disparity_right: np.ndarray
    occlusion: np.ndarray  # (H, W) bool, left pixels with no match in the right view
    scale: int
    d: int


@dataclass
class StereoBatch:
    lr_left: np.ndarray  # (N, 3, h, w)
    lr_right: np.ndarray
    hr_left: np.ndarray  # (N, 3, s*h, s*w)
    hr_right: np.ndarray
    gt_disparity: Optional[np.ndarray] = None  # (N, s*h, s*w)
    noc: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.lr_left.shape[0]

    def tensors(self, dtype=np.float64) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return tuple(Tensor(np.ascontiguousarray(a, dtype=dtype))
                     for a in (self.lr_left, self.lr_right, self.hr_left, self.hr_right))


def _blur_1d(x: np.ndarray, sigma: float, axis: int) -> np.ndarray:
    if sigma <= 0:
        return x
    r = int(np.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="wrap")
    return np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), axis, xp)


def make_texture(rng: np.random.Generator, H: int, W: int, kind: str = "noise", sigma: float = 1.5) -> np.ndarray:
    """(3, H, W) texture in [0.1, 0.9]: blurred noise or a sum of oriented gradients."""
    if kind == "noise":
        t = rng.normal(size=(3, H, W))
        t = _blur_1d(_blur_1d(t, sigma, 1), sigma, 2)
    elif kind == "gradients":
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        t = np.zeros((3, H, W))
        for c in range(3):
            for _ in range(4):
                theta = rng.uniform(0, np.pi)
                freq = rng.uniform(0.05, 0.35)
                phase = rng.uniform(0, 2 * np.pi)
                t[c] += np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    else:
        raise ValueError(f"unknown texture {kind!r}; choose from {TEXTURES}")
    lo = t.min(axis=(1, 2), keepdims=True)
    hi = t.max(axis=(1, 2), keepdims=True)
    return 0.1 + 0.8 * (t - lo) / np.maximum(hi - lo, 1e-12)


def generate_synthetic(seed: int, H: int, W: int, d: int, texture: str = "noise", scale: int = 2) -> SyntheticScene:
    """Rectified pair of one fronto-parallel textured plane at integer HR disparity ``d``.

    left(x) = S(x), right(x) = S(x + d) on a scene strip of width W + d, so a
    left pixel at x matches the right view at x - d. Left pixels with x < d
    are occluded.
    """
    if not (0 <= d < W / 4):
        raise ValueError(f"disparity {d} outside [0, W/4) for W={W}")
    if int(d) != d:
        raise ValueError("synthetic disparity must be an integer number of HR pixels")
    d = int(d)
    if H % scale or W % scale:
        raise ValueError(f"{H}x{W} not divisible by scale {scale}")
    rng = np.random.default_rng(seed)
    strip = make_texture(rng, H, W + d, texture)
    left = strip[:, :, :W].copy()
    right = strip[:, :, d:d + W].copy()
    occ = np.zeros((H, W), dtype=bool)
    occ[:, :d] = True
    with no_grad():
        pair = Tensor(np.stack([left, right]))
        lr = bicubic_downsample(pair, scale).data
    return SyntheticScene(
        left, right, lr[0], lr[1],
        np.full((H, W), float(d)), np.full((H, W), float(d)), occ, scale, d,
    )


def scenes_to_batch(scenes: list[SyntheticScene]) -> StereoBatch:
    return StereoBatch(
        np.stack([s.lr_left for s in scenes]),
        np.stack([s.lr_right for s in scenes]),
        np.stack([s.hr_left for s in scenes]),
        np.stack([s.hr_right for s in scenes]),
        np.stack([s.gt_disparity for s in scenes]),
        np.stack([~s.occlusion for s in scenes]),
    )


class StereoPatches:
    """Indexable set of equally sized stereo patches held in memory."""

    def __init__(self, batch: StereoBatch):
        self.data = batch

    def __len__(self) -> int:
        return len(self.data)

    def take(self, idx) -> StereoBatch:
        idx = np.asarray(idx)
        d = self.data
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return StereoBatch(pick(d.lr_left), pick(d.lr_right), pick(d.hr_left), pick(d.hr_right),
                           pick(d.gt_disparity), pick(d.noc))


def synthetic_patches(n: int, hr_hw: tuple[int, int], scale: int, seed: int,
                      d_range: tuple[int, int] = (2, 8), texture: str = "noise") -> StereoPatches:
    """``n`` scenes with integer disparities drawn from ``d_range`` (inclusive)."""
    H, W = hr_hw
    rng = np.random.default_rng(seed)
    hi = min(d_range[1], int(np.ceil(W / 4)) - 1)
    ds = rng.integers(d_range[0], hi + 1, size=n)
    seeds = rng.integers(0, 2 ** 31, size=n)
    return StereoPatches(scenes_to_batch(
        [generate_synthetic(int(s), H, W, int(d), texture, scale) for s, d in zip(seeds, ds)]
    ))


def find_pairs(root) -> tuple[list[tuple[Path, Path]], list[str]]:
    """``<name>_L.png`` / ``<name>_R.png`` pairs under ``root``; also returns skip notes."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    pairs, skipped = [], []
    for left in sorted(root.glob("*_L.png")):
        right = left.with_name(left.name[:-6] + "_R.png")
        if right.exists():
            pairs.append((left, right))
        else:
            skipped.append(f"{left.name}: missing right view {right.name}")
    for right in sorted(root.glob("*_R.png")):
        if not right.with_name(right.name[:-6] + "_L.png").exists():
            skipped.append(f"{right.name}: missing left view")
    return pairs, skipped


def folder_patches(root, scale: int, lr_patch: tuple[int, int], stride: int) -> StereoPatches:
    """HR PNG pairs -> bicubic LR, then LR patches of ``lr_patch`` with ``stride`` (LR pixels)."""
    from .metrics import read_png

    pairs, _ = find_pairs(root)
    if not pairs:
        raise FileNotFoundError(f"no *_L.png / *_R.png pairs in {root}")
    ph, pw = lr_patch
    out = {k: [] for k in ("ll", "lr", "hl", "hr")}
    for lp, rp in pairs:
        hl, hr = read_png(lp), read_png(rp)
        if hl.shape != hr.shape:
            continue
        Hh = hl.shape[1] // scale * scale
        Wh = hl.shape[2] // scale * scale
        hl, hr = hl[:, :Hh, :Wh], hr[:, :Hh, :Wh]
        with no_grad():
            lo = bicubic_downsample(Tensor(np.stack([hl, hr])), scale).data
        for y in range(0, lo.shape[2] - ph + 1, stride):
            for x in range(0, lo.shape[3] - pw + 1, stride):
                out["ll"].append(lo[0, :, y:y + ph, x:x + pw])
                out["lr"].append(lo[1, :, y:y + ph, x:x + pw])
                ys, xs = y * scale, x * scale
                out["hl"].append(hl[:, ys:ys + ph * scale, xs:xs + pw * scale])
                out["hr"].append(hr[:, ys:ys + ph * scale, xs:xs + pw * scale])
    if not out["ll"]:
        raise ValueError(f"images in {root} are smaller than one {ph}x{pw} LR patch")
    return StereoPatches(StereoBatch(*(np.stack(out[k]) for k in ("ll", "lr", "hl", "hr"))))
