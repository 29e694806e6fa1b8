"""Adam training loop with a step-halving schedule, deterministic batching,
versioned checkpoints and a JSON-lines log."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor, backward, default_dtype, no_grad
from .backbone import BackboneConfig
from .data import StereoPatches, synthetic_patches
from .losses import LossConfig, total_loss
from .metrics import psnr
from .network import NetworkConfig, SSRDEFNet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class RunConfig:
    scale: int = 2
    iterations: int = 2
    cascade_depth: int = 2
    channels: int = 16
    P: int = 24
    delta_d: float = 24.0
    lam: float = 1.0
    lambda1: float = 0.1
    lambda2: float = 0.1
    alpha: float = 0.85
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr: float = 2e-4
    halve_every: int = 30  # epochs
    batch_size: int = 4
    patch: tuple[int, int] = (8, 24)  # LR patch; HR is scale times larger
    patch_stride: int = 20
    seed: int = 0
    steps: int = 2000
    dtype: str = "float64"
    num_patches: int = 4
    d_range: tuple[int, int] = (2, 8)
    texture: str = "noise"
    data_dir: Optional[str] = None
    checkpoint_every: int = 100
    feedback: bool = True
    attention_mask: str = "peak"

    def __post_init__(self):
        positive = ("scale", "iterations", "cascade_depth", "channels", "P", "delta_d", "lr",
                    "halve_every", "batch_size", "patch_stride", "num_patches")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        h, w = self.patch
        if h <= 0 or w <= 0:
            raise ValueError(f"bad patch size {self.patch}")
        if w < 2 * self.delta_d / self.scale:
            raise ValueError(f"patch width {w} < 2*delta_d/scale = {2 * self.delta_d / self.scale:g}")

    @classmethod
    def paper_profile(cls, **kw) -> "RunConfig":
        """Paper-scale batch and patch settings; far too slow for CPU training."""
        return cls(batch_size=16, patch=(30, 90), **kw)

    def network(self) -> NetworkConfig:
        bb = BackboneConfig(base_channels=self.channels, rdb_growth=self.channels, scale=self.scale)
        return NetworkConfig(bb, self.cascade_depth, self.P, self.delta_d, self.lam, self.iterations,
                             feedback=self.feedback)

    def losses(self) -> LossConfig:
        return LossConfig(self.lambda1, self.lambda2, self.alpha, attention_mask=self.attention_mask)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        for k in ("patch", "d_range"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def learning_rate(cfg: RunConfig, epoch: int) -> float:
    """lr0 * 0.5 ** floor((epoch - 1) / halve_every), epochs counted from 1."""
    return cfg.lr * 0.5 ** ((max(epoch, 1) - 1) // cfg.halve_every)


def steps_per_epoch(cfg: RunConfig, n: int) -> int:
    return max(1, math.ceil(n / cfg.batch_size))


def batch_indices(cfg: RunConfig, n: int, step: int) -> np.ndarray:
    """Indices for 0-based ``step``; a fresh permutation per epoch seeded by (seed, epoch)."""
    spe = steps_per_epoch(cfg, n)
    epoch, k = divmod(step, spe)
    perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    idx = perm[k * cfg.batch_size:(k + 1) * cfg.batch_size]
    if len(idx) < min(cfg.batch_size, n):  # wrap short final batch
        idx = np.concatenate([idx, perm[: min(cfg.batch_size, n) - len(idx)]])
    return idx


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _write_npz(path: Path, arrays: dict) -> None:
    """npz with fixed member timestamps so equal contents give equal bytes."""
    tmp = path.with_suffix(".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_DATE)
            zf.writestr(info, buf.getvalue())
    tmp.replace(path)


def save_checkpoint(path, net: SSRDEFNet, opt: Adam, cfg: RunConfig, step: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"version": np.array(CHECKPOINT_VERSION), "step": np.array(step), "adam_t": np.array(opt.t)}
    for k, p in net.named_parameters():
        arrays[f"param/{k}"] = p.data
        arrays[f"adam_m/{k}"] = opt.m[k]
        arrays[f"adam_v/{k}"] = opt.v[k]
    _write_npz(path, arrays)
    meta = {"version": CHECKPOINT_VERSION, "step": step, "fingerprint": cfg.fingerprint(), "config": cfg.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, net: Optional[SSRDEFNet] = None, opt: Optional[Adam] = None):
    """Returns (net, opt, cfg, step); builds the network from the sidecar config when not given."""
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"checkpoint {path} or its sidecar {meta_path.name} is missing")
    meta = json.loads(meta_path.read_text())
    cfg = RunConfig.from_dict(meta["config"])
    if meta.get("fingerprint") != cfg.fingerprint():
        raise ValueError(f"{meta_path}: config fingerprint mismatch")
    with np.load(path, allow_pickle=False) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        arrays = {k: z[k] for k in z.files}
    if net is None:
        with default_dtype(cfg.np_dtype()):
            net = SSRDEFNet(cfg.network(), seed=cfg.seed)
    net.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    if opt is not None:
        opt.t = int(arrays["adam_t"])
        for k in opt.params:
            opt.m[k] = arrays[f"adam_m/{k}"].copy()
            opt.v[k] = arrays[f"adam_v/{k}"].copy()
    return net, opt, cfg, int(arrays["step"])


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    step: int
    history: list = field(default_factory=list)
    checkpoint: Optional[Path] = None
    net: Optional[SSRDEFNet] = None


def load_dataset(cfg: RunConfig) -> StereoPatches:
    if cfg.data_dir:
        from .data import folder_patches

        return folder_patches(cfg.data_dir, cfg.scale, cfg.patch, cfg.patch_stride)
    hr = (cfg.patch[0] * cfg.scale, cfg.patch[1] * cfg.scale)
    return synthetic_patches(cfg.num_patches, hr, cfg.scale, cfg.seed, cfg.d_range, cfg.texture)


def batch_psnr(sr: np.ndarray, hr_l: np.ndarray, hr_r: np.ndarray) -> float:
    """Mean PSNR over every image of a stacked [left; right] SR batch."""
    n = hr_l.shape[0]
    hr = np.concatenate([hr_l, hr_r])
    return float(np.mean([psnr(np.clip(sr[i], 0, 1), hr[i]) for i in range(2 * n)]))


def step_psnrs(trace, batch) -> dict:
    """Batch PSNR of every intermediate output, keyed ``t<iteration>_step<1|2>``."""
    out = {}
    for rec in trace.records:
        for k, sr in ((1, rec.sr0), (2, rec.sr1)):
            out[f"t{rec.t}_step{k}"] = batch_psnr(sr.data, batch.hr_left, batch.hr_right)
    return out


def train(cfg: RunConfig, out_dir, dataset: Optional[StereoPatches] = None, resume=None,
          max_steps: Optional[int] = None, log_every: int = 1) -> TrainResult:
    """Run ``cfg.steps`` Adam steps (or up to ``max_steps``), writing checkpoints and train.jsonl."""
    out = Path(out_dir)
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    data = dataset if dataset is not None else load_dataset(cfg)
    n = len(data)
    dt = cfg.np_dtype()
    lcfg = cfg.losses()
    last = min(cfg.steps, max_steps) if max_steps is not None else cfg.steps
    with default_dtype(dt):
        net = SSRDEFNet(cfg.network(), seed=cfg.seed)
        opt = Adam(dict(net.named_parameters()), cfg.beta1, cfg.beta2, cfg.adam_eps)
        step = 0
        if resume is not None:
            _, _, rcfg, step = load_checkpoint(resume, net, opt)
            if rcfg.fingerprint() != cfg.fingerprint():
                log.warning("resuming from a checkpoint with a different config fingerprint")
        result = TrainResult(step, net=net)
        ckpt = Path(resume) if resume is not None else None
        mode = "a" if resume is not None else "w"
        spe = steps_per_epoch(cfg, n)
        with open(out / "train.jsonl", mode) as logf:
            while step < last:
                epoch = step // spe + 1
                lr = learning_rate(cfg, epoch)
                batch = data.take(batch_indices(cfg, n, step))
                ll, lr_r, hl, hr = batch.tensors(dt)
                t0 = time.perf_counter()
                trace = net(ll, lr_r)
                rep = total_loss(trace, hl, hr, ll, lr_r, lcfg)
                if not np.isfinite(rep.total):
                    msg = f"non-finite loss at step {step + 1}; last good checkpoint: {ckpt}"
                    logf.write(json.dumps({"step": step + 1, "error": msg}) + "\n")
                    raise TrainingAborted(msg)
                net.zero_grad()
                backward(rep.value)
                if not all(np.isfinite(p.grad).all() for p in opt.params.values()):
                    raise TrainingAborted(f"non-finite gradient at step {step + 1}; last good checkpoint: {ckpt}")
                opt.step(lr)
                step += 1
                rec = {"step": step, "epoch": epoch, "lr": lr, "loss": rep.as_dict(),
                       "psnr": batch_psnr(trace.final_sr.data, batch.hr_left, batch.hr_right),
                       "psnr_steps": step_psnrs(trace, batch),
                       "seconds": round(time.perf_counter() - t0, 4)}
                result.history.append(rec)
                if step % log_every == 0 or step == last:
                    logf.write(json.dumps(rec, sort_keys=True) + "\n")
                    logf.flush()
                if step % cfg.checkpoint_every == 0 or step == last:
                    ckpt = save_checkpoint(ckdir / f"step{step:06d}.npz", net, opt, cfg, step)
                    (out / "latest").write_text(ckpt.name + "\n")
        result.step = step
        result.checkpoint = ckpt
    return result


def evaluate_batch(net: SSRDEFNet, batch, dtype=np.float64):
    """No-grad forward on a StereoBatch; returns the trace."""
    with default_dtype(dtype), no_grad():
        ll, lr_r = Tensor(batch.lr_left.astype(dtype)), Tensor(batch.lr_right.astype(dtype))
        return net(ll, lr_r)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
