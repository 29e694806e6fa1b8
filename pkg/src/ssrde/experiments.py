"""Desk-scale experiments: the overfit run, the coarse-to-fine disparity check
and the step-progression check. Shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import evaluate, synthetic_eval_set
from .training import RunConfig, batch_psnr, evaluate_batch, load_checkpoint, load_dataset, train


def overfit_config(**kw) -> RunConfig:
    """16 channels, T=2, x2 on 4 fixed noise patches.

    One epoch is a single step here, so the learning rate halves every 500
    steps rather than every 30 epochs, and float32 keeps 2000 steps inside the
    CPU budget.
    """
    base = dict(channels=16, iterations=2, scale=2, num_patches=4, batch_size=4, steps=2000,
                lr=1e-3, halve_every=500, dtype="float32", texture="noise", checkpoint_every=10 ** 6)
    base.update(kw)
    return RunConfig(**base)


@dataclass
class OverfitRun:
    out: Path
    cfg: RunConfig
    history: list
    seconds: float
    checkpoint: Path

    @property
    def losses(self) -> list:
        return [h["loss"]["total"] for h in self.history]

    @property
    def psnrs(self) -> list:
        return [h["psnr"] for h in self.history]

    def net(self):
        return load_checkpoint(self.checkpoint)[0]


def _read_history(out: Path) -> list:
    rows = {}
    for line in (out / "train.jsonl").read_text().splitlines():
        rec = json.loads(line)
        if "error" not in rec:
            rows[rec["step"]] = rec
    return [rows[k] for k in sorted(rows)]


def load_overfit(out, cfg: RunConfig):
    """A finished run under ``out`` with a matching config fingerprint, else None."""
    out = Path(out)
    meta = out / "overfit.json"
    if not meta.exists():
        return None
    info = json.loads(meta.read_text())
    ck = out / "checkpoints" / f"step{cfg.steps:06d}.npz"
    if info.get("fingerprint") != cfg.fingerprint() or not ck.exists():
        return None
    return OverfitRun(out, cfg, _read_history(out), info["seconds"], ck)


def run_overfit(out, cfg: RunConfig | None = None, reuse: bool = True) -> OverfitRun:
    cfg = cfg or overfit_config()
    out = Path(out)
    if reuse:
        done = load_overfit(out, cfg)
        if done is not None:
            return done
    t0 = time.perf_counter()
    res = train(cfg, out, log_every=1)
    seconds = time.perf_counter() - t0
    (out / "overfit.json").write_text(json.dumps({"fingerprint": cfg.fingerprint(), "seconds": seconds,
                                                  "steps": res.step}, indent=2) + "\n")
    return OverfitRun(out, cfg, _read_history(out), seconds, res.checkpoint)


def train_set_psnr(net, cfg: RunConfig) -> dict:
    """PSNR of every (iteration, step) output on the full training set, no-grad."""
    data = load_dataset(cfg)
    batch = data.take(np.arange(len(data)))
    trace = evaluate_batch(net, batch, cfg.np_dtype())
    out = {}
    for rec in trace.records:
        for k, sr in ((1, rec.sr0), (2, rec.sr1)):
            out[f"t{rec.t}_step{k}"] = batch_psnr(sr.data, batch.hr_left, batch.hr_right)
    return out


def coarse_to_fine(net, cfg: RunConfig, n: int = 8, seed: int = 1) -> dict:
    """Mean EPE of the upsampled LR disparity and of the HR estimate in the last iteration,
    on held-out constant-disparity scenes."""
    H, W = cfg.patch[0] * cfg.scale, cfg.patch[1] * cfg.scale
    samples = synthetic_eval_set(n, (H, W), cfg.scale, seed, d_range=(2, 8), texture=cfg.texture)
    rep = evaluate(net, samples, cfg.np_dtype())
    T = cfg.iterations
    lr, hr = rep.summary[f"t{T}_step1"], rep.summary[f"t{T}_step2"]
    return {"epe_all_upsampled": lr["epe_all"], "epe_all_hr": hr["epe_all"],
            "epe_noc_upsampled": lr["epe_noc"], "epe_noc_hr": hr["epe_noc"],
            "images": [s.name for s in samples]}
