"""Separable resampling expressed as fixed matrices applied along H and W.

Each ``*_matrix(n_in, n_out)`` returns an (n_out, n_in) array R so that a 1-D
signal v resamples to R @ v. Applying one matrix per axis through
``ops.resample`` keeps every resize differentiable for free.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .autodiff import Tensor, ops


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the edge sample."""
    i = np.asarray(i)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i >= n, period - i, i)


@lru_cache(maxsize=None)
def bicubic_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    scale = n_out / n_in
    R = np.zeros((n_out, n_in))
    # shrinking widens the kernel (antialiasing), growing uses it as is
    width = 1.0 if scale >= 1 else 1.0 / scale
    support = 2.0 * width
    for o in range(n_out):
        src = (o + 0.5) / scale - 0.5
        first = int(np.floor(src - support)) + 1
        taps = np.arange(first, int(np.floor(src + support)) + 1)
        w = cubic_kernel((src - taps) / width, a)
        if scale < 1:
            w = w / w.sum()
        np.add.at(R[o], reflect_index(taps, n_in), w)
    R.setflags(write=False)
    return R


@lru_cache(maxsize=None)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    scale = n_out / n_in
    R = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = min(max((o + 0.5) / scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        R[o, i0] += 1.0 - frac
        R[o, i1] += frac
    R.setflags(write=False)
    return R


@lru_cache(maxsize=None)
def nearest_matrix(n_in: int, n_out: int) -> np.ndarray:
    R = np.zeros((n_out, n_in))
    src = (np.arange(n_out) * n_in) // n_out
    R[np.arange(n_out), src] = 1.0
    R.setflags(write=False)
    return R


@lru_cache(maxsize=None)
def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averages over bins [floor(i*n/k), ceil((i+1)*n/k))."""
    R = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        R[i, lo:hi] = 1.0 / (hi - lo)
    R.setflags(write=False)
    return R


def _apply(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    return ops.resample(x, rows, cols)


def bicubic_resize(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    H, W = x.shape[-2:]
    return _apply(x, bicubic_matrix(H, out_hw[0]), bicubic_matrix(W, out_hw[1]))


def bicubic_upsample(x: Tensor, s: int) -> Tensor:
    H, W = x.shape[-2:]
    return bicubic_resize(x, (H * s, W * s))


def bicubic_downsample(x: Tensor, s: int) -> Tensor:
    H, W = x.shape[-2:]
    if H % s or W % s:
        raise ValueError(f"{H}x{W} not divisible by {s}")
    return bicubic_resize(x, (H // s, W // s))


def bilinear_resize(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    H, W = x.shape[-2:]
    return _apply(x, bilinear_matrix(H, out_hw[0]), bilinear_matrix(W, out_hw[1]))


def nearest_resize(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    H, W = x.shape[-2:]
    return _apply(x, nearest_matrix(H, out_hw[0]), nearest_matrix(W, out_hw[1]))


def adaptive_avg_pool(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    H, W = x.shape[-2:]
    return _apply(x, adaptive_pool_matrix(H, out_hw[0]), adaptive_pool_matrix(W, out_hw[1]))
