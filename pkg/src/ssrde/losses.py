"""Training objective: SR L1, the biPAM terms, and the unsupervised disparity
losses, combined as sr + lambda1 * bipam + lambda2 * disp."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import attention_valid_mask, default_valid_threshold, warp_by_attention
from .autodiff import Tensor, ops
from .disparity import out_of_view_mask, warp_by_disparity
from .metrics import ssim_map

log = logging.getLogger(__name__)


# which LR pixels the biPAM terms see: "peak" keeps pixels whose attention peak reaches 2/W,
# "visibility" keeps pixels the other view's map attends to (column sums above valid_attention),
# "mixed" uses visibility for photo/cons and the peak mask for cycle rows
ATTENTION_MASKS = ("peak", "visibility", "mixed")


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    alpha: float = 0.85
    smooth_weight: float = 0.1
    residual: bool = True
    valid_attention: float = 0.1
    attention_mask: str = "peak"
    detach_valid: bool = False
    T: Optional[int] = None

    def __post_init__(self):
        if self.attention_mask not in ATTENTION_MASKS:
            raise ValueError(f"attention_mask must be one of {ATTENTION_MASKS}, got {self.attention_mask!r}")
        for name in ("lambda1", "lambda2", "alpha", "smooth_weight", "valid_attention"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.alpha > 1:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class LossReport:
    total: float
    sr: float
    bipam: float
    photo: float
    cycle: float
    smooth: float
    cons: float
    disp: float
    rc: float
    cycle_hr: float
    cons_hr: float
    smooth_hr: float
    value: Optional[Tensor] = None  # the differentiable total

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("value")
        return d


def _zero(ref: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=ref.data.dtype))


def _mask_array(mask, shape, dtype):
    """Mask as a broadcast ndarray, or the Tensor itself when it is on the tape."""
    if mask is None:
        return np.ones(shape, dtype=dtype)
    if isinstance(mask, Tensor):
        if mask.requires_grad:
            return mask
        mask = mask.data
    return np.broadcast_to(np.asarray(mask).astype(dtype, copy=False), shape)


def masked_mean(x: Tensor, mask, what: str = "loss") -> Tensor:
    """sum(x * m) / sum(m) with m broadcast to x; an all-zero mask gives 0 and a warning."""
    m = _mask_array(mask, x.shape, x.data.dtype)
    if isinstance(m, Tensor):
        reps = x.data.size / m.data.size
        total = float(m.data.sum()) * reps
        if total <= 0.0:
            log.warning("%s: mask has no valid pixels, contributing 0", what)
            return _zero(x)
        return ops.sum(x * m) / (ops.sum(m) * reps)
    total = float(m.sum())
    if total <= 0.0:
        log.warning("%s: mask has no valid pixels, contributing 0", what)
        return _zero(x)
    return ops.sum(x * Tensor(np.ascontiguousarray(m))) * (1.0 / total)


def high_pass(img: Tensor) -> Tensor:
    """img - 3x3 box blur (reflect padded), per channel."""
    N, C, H, W = img.shape
    flat = ops.reshape(img, (N * C, 1, H, W))
    box = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0, dtype=img.data.dtype))
    mode = "reflect" if min(H, W) > 1 else "edge"
    blur = ops.conv2d(flat, box, padding=1, padding_mode=mode)
    return img - ops.reshape(blur, (N, C, H, W))


# ---------------------------------------------------------------------------
# SR
# ---------------------------------------------------------------------------

def sr_loss(trace, hr_l: Tensor, hr_r: Tensor) -> Tensor:
    """Sum over iterations and both steps of mean |SR - HR| for each view."""
    total = None
    n = hr_l.shape[0]
    for rec in trace.records:
        for name in ("sr0", "sr1"):
            sr = getattr(rec, name, None)
            if sr is None:
                raise ValueError(f"iteration {rec.t} has no {name} output")
            if sr.shape[0] != 2 * n or sr.shape[1:] != hr_l.shape[1:]:
                raise ValueError(f"{name} {sr.shape} does not match HR pair {hr_l.shape}")
            term = ops.mean(ops.abs(sr[:n] - hr_l)) + ops.mean(ops.abs(sr[n:] - hr_r))
            total = term if total is None else total + term
    if total is None:
        raise ValueError("empty trace")
    return total


# ---------------------------------------------------------------------------
# biPAM
# ---------------------------------------------------------------------------

def attention_visibility(M_other: Tensor | np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """Own-view pixels that the other view attends to: column sums of its map above ``threshold``.

    ``M_other`` is the other view's (N, H, W, W) map over own columns;
    returns (N, 1, H, W).
    """
    m = M_other.data if isinstance(M_other, Tensor) else np.asarray(M_other)
    return (m.sum(axis=-2) > threshold).astype(m.dtype)[:, None]


def attention_smoothness(M: Tensor) -> Tensor:
    """Mean |difference| between vertically adjacent rows and diagonally adjacent entries."""
    terms = []
    if M.shape[1] > 1:
        terms.append(ops.mean(ops.abs(M[:, :-1] - M[:, 1:])))
    if M.shape[2] > 1:
        terms.append(ops.mean(ops.abs(M[:, :, :-1, :-1] - M[:, :, 1:, 1:])))
    if not terms:
        return _zero(M)
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def attention_cycle(M_ab: Tensor, M_ba: Tensor, valid: np.ndarray) -> Tensor:
    """Mean of |M_ab @ M_ba - I| over the entries of valid rows."""
    N, H, W, _ = M_ab.shape
    eye = Tensor(np.eye(W, dtype=M_ab.data.dtype))
    err = ops.abs(ops.matmul(M_ab, M_ba) - eye)  # (N, H, W, W)
    rows = np.broadcast_to(valid.reshape(N, H, W, 1), err.shape)
    return masked_mean(err, rows, "attention cycle")


def bipam_terms(M_lr: Tensor, M_rl: Tensor, lr_l: Tensor, lr_r: Tensor, cfg: LossConfig = LossConfig()) -> dict:
    """photo / smooth / cycle / cons for one iteration.

    ``M_rl`` holds left pixels over right columns (warps right content to the
    left view); ``M_lr`` the reverse.
    """
    B, C, H, W = lr_l.shape
    if M_rl.shape != (B, H, W, W) or M_lr.shape != (B, H, W, W):
        raise ValueError(f"attention {M_rl.shape}/{M_lr.shape} does not match images {lr_l.shape}")
    vis_l = attention_visibility(M_lr, cfg.valid_attention)
    vis_r = attention_visibility(M_rl, cfg.valid_attention)
    peak_l = attention_valid_mask(M_rl.data, default_valid_threshold(W))
    peak_r = attention_valid_mask(M_lr.data, default_valid_threshold(W))
    if cfg.attention_mask == "visibility":
        V_l, V_r, C_l, C_r = vis_l, vis_r, vis_l, vis_r
    elif cfg.attention_mask == "peak":
        V_l, V_r, C_l, C_r = peak_l, peak_r, peak_l, peak_r
    else:
        V_l, V_r, C_l, C_r = vis_l, vis_r, peak_l, peak_r

    def pair_l1(a_l, a_r, what):
        warped_l, _ = warp_by_attention(M_rl, a_r)
        warped_r, _ = warp_by_attention(M_lr, a_l)
        return (masked_mean(ops.abs(a_l - warped_l), V_l, what)
                + masked_mean(ops.abs(a_r - warped_r), V_r, what))

    photo = pair_l1(lr_l, lr_r, "photo")
    if cfg.residual:
        cons = pair_l1(high_pass(lr_l), high_pass(lr_r), "cons")
    else:
        cons = photo
    smooth = attention_smoothness(M_rl) + attention_smoothness(M_lr)
    cycle = attention_cycle(M_rl, M_lr, C_l) + attention_cycle(M_lr, M_rl, C_r)
    return {"photo": photo, "smooth": smooth, "cycle": cycle, "cons": cons}


def bipam_loss(M_lr: Tensor, M_rl: Tensor, lr_l: Tensor, lr_r: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    t = bipam_terms(M_lr, M_rl, lr_l, lr_r, cfg)
    return t["photo"] + t["cycle"] + t["smooth"] + t["cons"]


# ---------------------------------------------------------------------------
# disparity
# ---------------------------------------------------------------------------

def reconstruction_map(hr_own: Tensor, warped: Tensor, alpha: float = 0.85) -> Tensor:
    """alpha (1 - SSIM) / 2 + (1 - alpha) |a - b|, channel-averaged; (B, H, W)."""
    l1 = ops.mean(ops.abs(hr_own - warped), axis=1)
    if alpha == 0.0:
        return l1
    s = ops.mean(ssim_map(hr_own, warped, "reflect"), axis=1)
    return (1.0 - s) * (alpha / 2.0) + l1 * (1.0 - alpha)


def disparity_reconstruction_loss(
    hr_own: Tensor,
    hr_other: Tensor,
    disps: Sequence[Tensor],
    masks: Sequence,
    sign="left",
    alpha: float = 0.85,
) -> Tensor:
    """Sum over the given disparities of the masked reconstruction error.

    Each disparity (B, H, W) warps ``hr_other`` onto the own view; pixels are
    weighted by the matching valid mask times the in-view indicator.
    """
    if isinstance(disps, Tensor):
        disps, masks = [disps], [masks]
    if len(disps) != len(masks):
        raise ValueError(f"{len(disps)} disparities but {len(masks)} masks")
    total = _zero(hr_own)
    for d, m in zip(disps, masks):
        warped = warp_by_disparity(hr_other, d, sign)
        weight = _mask_array(m, d.shape, d.data.dtype) * out_of_view_mask(d, sign)
        total = total + masked_mean(reconstruction_map(hr_own, warped, alpha), weight, "reconstruction")
    return total


def disparity_smoothness_loss(disp: Tensor, hr_image: Tensor, mask=None) -> Tensor:
    """Edge-aware first-order smoothness; x and y terms each averaged over valid pixels."""
    B, H, W = disp.shape
    if hr_image.shape[0] != B or hr_image.shape[2:] != (H, W):
        raise ValueError(f"image {hr_image.shape} does not match disparity {disp.shape}")
    m = _mask_array(mask, (B, H, W), disp.data.dtype)
    if isinstance(m, Tensor) and m.shape != (B, H, W):
        raise ValueError(f"mask {m.shape} does not match disparity {disp.shape}")
    img = hr_image.data
    total = _zero(disp)
    if W > 1:
        wx = np.exp(-np.abs(np.diff(img, axis=3)).mean(axis=1))
        gx = ops.abs(disp[:, :, 1:] - disp[:, :, :-1])
        total = total + masked_mean(gx * Tensor(wx), m[:, :, :-1], "smoothness")
    if H > 1:
        wy = np.exp(-np.abs(np.diff(img, axis=2)).mean(axis=1))
        gy = ops.abs(disp[:, 1:, :] - disp[:, :-1, :])
        total = total + masked_mean(gy * Tensor(wy), m[:, :-1, :], "smoothness")
    return total


def _warp_map(field: Tensor, disp: Tensor, sign) -> Tensor:
    B, H, W = field.shape
    return ops.reshape(warp_by_disparity(ops.reshape(field, (B, 1, H, W)), disp, sign), (B, H, W))


def hr_cycle_consistency_loss(disp_l: Tensor, disp_r: Tensor, masks=(None, None)) -> tuple[Tensor, Tensor]:
    """(cycle, consistency) on HR disparities, each averaged over the two views."""
    if disp_l.shape != disp_r.shape:
        raise ValueError(f"disparity shape mismatch: {disp_l.shape} vs {disp_r.shape}")
    shape, dt = disp_l.shape, disp_l.data.dtype
    cycle = _zero(disp_l)
    cons = _zero(disp_l)
    for own, other, s_own, s_other, m in (
        (disp_l, disp_r, "left", "right", masks[0]),
        (disp_r, disp_l, "right", "left", masks[1]),
    ):
        inview = out_of_view_mask(own, s_own)
        base = _mask_array(m, shape, dt) * inview
        cons = cons + masked_mean(ops.abs(own - _warp_map(other, own, s_own)), base, "hr consistency")
        round_trip = _warp_map(_warp_map(own, other, s_other), own, s_own)
        inner = _warp_map(Tensor(out_of_view_mask(other, s_other)), Tensor(own.data), s_own).data
        cycle = cycle + masked_mean(ops.abs(own - round_trip), base * inner, "hr cycle")
    return cycle * 0.5, cons * 0.5


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

def combine(sr: Tensor, bipam: Tensor, disp: Tensor, cfg: LossConfig) -> Tensor:
    return sr + bipam * cfg.lambda1 + disp * cfg.lambda2


def total_loss(trace, hr_l: Tensor, hr_r: Tensor, lr_l: Tensor, lr_r: Tensor,
               cfg: LossConfig = LossConfig()) -> LossReport:
    if cfg.T is not None and len(trace) != cfg.T:
        raise ValueError(f"trace has {len(trace)} iterations, config expects {cfg.T}")
    n = hr_l.shape[0]
    sr = sr_loss(trace, hr_l, hr_r)
    z = _zero(sr)
    parts = {k: z for k in ("photo", "cycle", "smooth", "cons", "rc", "cycle_hr", "cons_hr", "smooth_hr")}
    for rec in trace.records:
        M = rec.attention.attention
        for k, v in bipam_terms(M[n:], M[:n], lr_l, lr_r, cfg).items():
            parts[k] = parts[k] + v
        V = Tensor(rec.valid.data) if cfg.detach_valid else rec.valid
        V_l, V_r = V[:n], V[n:]
        for d in (rec.disp_init, rec.disp_hr):
            parts["rc"] = parts["rc"] + disparity_reconstruction_loss(hr_l, hr_r, d[:n], V_l, "left", cfg.alpha)
            parts["rc"] = parts["rc"] + disparity_reconstruction_loss(hr_r, hr_l, d[n:], V_r, "right", cfg.alpha)
        D = rec.disp_hr
        parts["smooth_hr"] = (parts["smooth_hr"] + disparity_smoothness_loss(D[:n], hr_l, V_l)
                              + disparity_smoothness_loss(D[n:], hr_r, V_r))
        cyc, cons = hr_cycle_consistency_loss(D[:n], D[n:], (V_l, V_r))
        parts["cycle_hr"] = parts["cycle_hr"] + cyc
        parts["cons_hr"] = parts["cons_hr"] + cons
    bipam = parts["photo"] + parts["cycle"] + parts["smooth"] + parts["cons"]
    disp = parts["rc"] + parts["cycle_hr"] + parts["cons_hr"] + parts["smooth_hr"] * cfg.smooth_weight
    value = combine(sr, bipam, disp, cfg)
    f = {k: float(v.data) for k, v in parts.items()}
    return LossReport(
        total=float(value.data), sr=float(sr.data), bipam=float(bipam.data), disp=float(disp.data),
        value=value, **f,
    )
