"""Image and disparity metrics (PSNR, SSIM, EPE), evaluation protocols, and
PNG / PFM file I/O.

The Gaussian SSIM here is the single implementation; the training loss calls
``ssim_map`` with reflect padding, the metric with valid windows.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .resize import reflect_index

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class EvalProtocol:
    name: str = "pair"
    crop_left_boundary: int = 0
    average_views: bool = True
    psnr_cap: float = 100.0

    @classmethod
    def left(cls, crop: int = 64) -> "EvalProtocol":
        return cls("left", crop, False)

    @classmethod
    def pair(cls) -> "EvalProtocol":
        return cls("pair", 0, True)

    def crop(self, img: np.ndarray) -> np.ndarray:
        c = self.crop_left_boundary
        if c < 0 or c >= img.shape[-1]:
            raise ValueError(f"crop {c} must lie in [0, width={img.shape[-1]})")
        return img[..., c:]


@dataclass
class DisparityEval:
    epe_noc: float
    epe_all: float
    noc_mask: np.ndarray = field(repr=False)
    n_noc: int = 0
    n_all: int = 0


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


@lru_cache(maxsize=64)
def _filter_matrix(n: int, mode: str, size: int, sigma: float) -> np.ndarray:
    g = gaussian_window(size, sigma)
    if mode == "valid":
        if n < size:
            raise ValueError(f"image side {n} smaller than the {size}x{size} SSIM window")
        m = np.zeros((n - size + 1, n))
        for i in range(n - size + 1):
            m[i, i:i + size] = g
    elif mode == "reflect":
        half = size // 2
        m = np.zeros((n, n))
        for i in range(n):
            idx = reflect_index(np.arange(i - half, i - half + size), n)
            np.add.at(m[i], idx, g)
    else:
        raise ValueError(f"unknown SSIM padding {mode!r}")
    m.setflags(write=False)
    return m


def gaussian_filter(x: Tensor, mode: str = "valid", size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    H, W = x.shape[-2:]
    return ops.resample(x, _filter_matrix(H, mode, size, sigma), _filter_matrix(W, mode, size, sigma))


def ssim_map(a, b, mode: str = "valid", data_range: float = 1.0) -> Tensor:
    """Per-pixel, per-channel SSIM of two N x C x H x W tensors."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"SSIM shape mismatch: {a.shape} vs {b.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = gaussian_filter(a, mode)
    mu_b = gaussian_filter(b, mode)
    var_a = gaussian_filter(a * a, mode) - mu_a * mu_a
    var_b = gaussian_filter(b * b, mode) - mu_b * mu_b
    cov = gaussian_filter(a * b, mode) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + c1) * (cov * 2.0 + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def _as_nchw(img) -> np.ndarray:
    x = img.data if isinstance(img, Tensor) else np.asarray(img)
    x = x.astype(np.float64, copy=False)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected an image array, got shape {x.shape}")
    return x


def ssim(a, b, protocol: EvalProtocol = EvalProtocol.pair()) -> float:
    """Mean SSIM over RGB channels after protocol cropping."""
    a, b = _as_nchw(a), _as_nchw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a, b = protocol.crop(a), protocol.crop(b)
    if np.array_equal(a, b):
        return 1.0
    with no_grad():
        return float(ssim_map(Tensor(a), Tensor(b), "valid").data.mean())


# ---------------------------------------------------------------------------
# PSNR / EPE
# ---------------------------------------------------------------------------

def psnr(a, b, protocol: EvalProtocol = EvalProtocol.pair()) -> float:
    """10 log10(1 / MSE) on RGB values in [0, 1]; capped for identical inputs."""
    a, b = _as_nchw(a), _as_nchw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a, b = protocol.crop(a), protocol.crop(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return protocol.psnr_cap
    return min(protocol.psnr_cap, 10.0 * np.log10(1.0 / mse))


def pair_metrics(sr_l, sr_r, hr_l, hr_r, protocol: EvalProtocol) -> tuple[float, float]:
    """(PSNR, SSIM) under a protocol: left view only, or the (left + right) / 2 average."""
    p = psnr(sr_l, hr_l, protocol)
    s = ssim(sr_l, hr_l, protocol)
    if protocol.average_views:
        p = (p + psnr(sr_r, hr_r, protocol)) / 2
        s = (s + ssim(sr_r, hr_r, protocol)) / 2
    return p, s


def epe(pred, gt, noc_mask=None, valid=None) -> DisparityEval:
    """Mean |pred - gt| over valid pixels (ALL) and over valid non-occluded ones (NOC).

    Non-finite ground truth counts as invalid.
    """
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"disparity shape mismatch: {pred.shape} vs {gt.shape}")
    ok = np.isfinite(gt)
    if valid is not None:
        ok &= np.asarray(valid).astype(bool)
    noc = ok if noc_mask is None else ok & np.asarray(noc_mask).astype(bool)
    if not ok.any():
        raise ValueError("no valid ground-truth pixels")
    err = np.abs(pred - np.where(ok, gt, 0.0))
    e_all = float(err[ok].mean())
    e_noc = float(err[noc].mean()) if noc.any() else float("nan")
    return DisparityEval(e_noc, e_all, noc, int(noc.sum()), int(ok.sum()))


def cross_check_noc(disp_l: np.ndarray, disp_r: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """Left pixels whose disparity agrees with the right map at x - d within ``threshold``."""
    disp_l = np.asarray(disp_l, dtype=np.float64)
    disp_r = np.asarray(disp_r, dtype=np.float64)
    H, W = disp_l.shape[-2:]
    x = np.arange(W)
    xr = np.rint(x - disp_l).astype(np.int64)
    inside = (xr >= 0) & (xr < W)
    back = np.take_along_axis(disp_r, np.clip(xr, 0, W - 1), axis=-1)
    return inside & (np.abs(disp_l - back) <= threshold)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """8-bit RGB PNG -> float64 (3, H, W) in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_png(path, img) -> None:
    """(3, H, W) floats in [0, 1] or uint8 (H, W, 3) -> 8-bit RGB PNG."""
    from PIL import Image

    arr = np.asarray(img.data if isinstance(img, Tensor) else img)
    if arr.dtype != np.uint8:
        if arr.ndim == 4:
            arr = arr[0]
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path)


_PFM_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def read_pfm(path) -> np.ndarray:
    """Read a PFM file; returns (H, W) or (H, W, 3) float32, top row first."""
    path = Path(path)
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: line 1: expected 'Pf' or 'PF', got {header[:16]!r}")
        dims = f.readline()
        m = _PFM_DIMS.match(dims)
        if not m:
            raise ValueError(f"{path}: line 2: expected '<width> <height>', got {dims[:32]!r}")
        width, height = int(m.group(1)), int(m.group(2))
        scale_line = f.readline()
        try:
            scale = float(scale_line)
        except ValueError:
            raise ValueError(f"{path}: line 3: bad scale {scale_line[:32]!r}") from None
        if scale == 0.0:
            raise ValueError(f"{path}: line 3: scale must be non-zero")
        endian = "<" if scale < 0 else ">"
        chans = 3 if header == b"PF" else 1
        count = width * height * chans
        raw = f.read()
    if len(raw) < 4 * count:
        raise ValueError(f"{path}: data section holds {len(raw)} bytes, expected {4 * count}")
    data = np.frombuffer(raw[: 4 * count], dtype=endian + "f4")
    shape = (height, width, 3) if chans == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pfm(path, arr, little_endian: bool = True) -> None:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    if arr.ndim == 3 and arr.shape[-1] == 3:
        header = b"PF"
    elif arr.ndim == 2:
        header = b"Pf"
    else:
        raise ValueError(f"PFM stores (H, W) or (H, W, 3) arrays, got {arr.shape}")
    H, W = arr.shape[:2]
    endian = "<" if little_endian else ">"
    scale = -1.0 if little_endian else 1.0
    body = np.flipud(arr).astype(endian + "f4").tobytes()
    with open(path, "wb") as f:
        f.write(header + b"\n" + f"{W} {H}\n".encode() + f"{scale}\n".encode() + body)
