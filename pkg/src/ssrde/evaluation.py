"""Evaluation runs: PSNR/SSIM under both protocols and EPE Noc/All for every
(iteration, step) output, written as CSV, JSON and plot-ready series."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor, default_dtype, no_grad
from .data import generate_synthetic
from .metrics import EvalProtocol, cross_check_noc, epe, pair_metrics

FIELDS = ("image", "iteration", "step", "psnr_left", "ssim_left", "psnr_pair", "ssim_pair",
          "epe_noc", "epe_all", "step2_ge_step1")


@dataclass
class EvalSample:
    name: str
    lr_left: np.ndarray  # (3, h, w)
    lr_right: np.ndarray
    hr_left: np.ndarray  # (3, H, W)
    hr_right: np.ndarray
    gt_disparity: Optional[np.ndarray] = None  # (H, W), left view
    noc: Optional[np.ndarray] = None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    series: dict = field(default_factory=dict)


def left_protocol(width: int, crop: int = 64) -> EvalProtocol:
    """Left-view protocol; narrow desk-scale images crop a quarter of the width instead."""
    return EvalProtocol.left(crop if crop < width // 2 else width // 4)


def synthetic_eval_set(n: int, hr_hw: tuple[int, int], scale: int, seed: int,
                       d_range: tuple[int, int] = (2, 8), texture: str = "noise") -> list[EvalSample]:
    rng = np.random.default_rng([seed, 7919])
    H, W = hr_hw
    hi = min(d_range[1], int(np.ceil(W / 4)) - 1)
    out = []
    for i in range(n):
        d = int(rng.integers(d_range[0], hi + 1))
        sc = generate_synthetic(int(rng.integers(0, 2 ** 31)), H, W, d, texture, scale)
        noc = cross_check_noc(sc.gt_disparity, sc.gt_disparity_right)
        out.append(EvalSample(f"synth{i:03d}_d{d}", sc.lr_left, sc.lr_right, sc.hr_left, sc.hr_right,
                              sc.gt_disparity, noc))
    return out


def folder_eval_set(root, scale: int) -> tuple[list[EvalSample], list[str]]:
    """``<name>_L.png`` / ``<name>_R.png`` HR pairs, optional ``<name>_disp.pfm`` and ``<name>_noc.png``."""
    from .data import find_pairs
    from .metrics import read_pfm, read_png
    from .resize import bicubic_downsample

    pairs, skipped = find_pairs(root)
    samples = []
    for lp, rp in pairs:
        name = lp.name[:-6]
        try:
            hl, hr = read_png(lp), read_png(rp)
        except OSError as e:
            skipped.append(f"{name}: unreadable image ({e})")
            continue
        if hl.shape != hr.shape:
            skipped.append(f"{name}: view shapes differ {hl.shape} vs {hr.shape}")
            continue
        H = hl.shape[1] // scale * scale
        W = hl.shape[2] // scale * scale
        hl, hr = hl[:, :H, :W], hr[:, :H, :W]
        with no_grad():
            lo = bicubic_downsample(Tensor(np.stack([hl, hr])), scale).data
        gt = noc = None
        dp = lp.with_name(name + "_disp.pfm")
        if dp.exists():
            gt = read_pfm(dp).astype(np.float64)[:H, :W]
            npth = lp.with_name(name + "_noc.png")
            noc = read_png(npth)[0][:H, :W] > 0.5 if npth.exists() else None
        else:
            skipped.append(f"{name}: no {dp.name}, EPE not reported")
        samples.append(EvalSample(name, lo[0], lo[1], hl, hr, gt, noc))
    return samples, skipped


def score_outputs(sample: EvalSample, outputs: dict, left_crop: int = 64) -> list[dict]:
    """Rows for one image. ``outputs[(t, step)] = (sr_l, sr_r, disp_l or None)``."""
    W = sample.hr_left.shape[-1]
    left = left_protocol(W, left_crop)
    pair = EvalProtocol.pair()
    rows = []
    for t, step in sorted(outputs):
        sr_l, sr_r, disp = outputs[(t, step)]
        pl, sl = pair_metrics(sr_l, sr_r, sample.hr_left, sample.hr_right, left)
        pp, sp = pair_metrics(sr_l, sr_r, sample.hr_left, sample.hr_right, pair)
        row = {"image": sample.name, "iteration": t, "step": step, "psnr_left": pl, "ssim_left": sl,
               "psnr_pair": pp, "ssim_pair": sp, "epe_noc": "", "epe_all": "", "step2_ge_step1": ""}
        if disp is not None and sample.gt_disparity is not None:
            e = epe(disp, sample.gt_disparity, sample.noc)
            row["epe_noc"], row["epe_all"] = e.epe_noc, e.epe_all
        rows.append(row)
    by_key = {(r["iteration"], r["step"]): r for r in rows}
    for (t, step), r in by_key.items():
        if step == 2 and (t, 1) in by_key:
            r["step2_ge_step1"] = bool(r["psnr_pair"] >= by_key[(t, 1)]["psnr_pair"])
    return rows


def trace_outputs(trace) -> dict:
    """(t, step) -> (SR_l, SR_r, left disparity); step 1 pairs with the upsampled LR disparity."""
    out = {}
    for rec in trace.records:
        n = rec.sr0.shape[0] // 2
        for step, sr, d in ((1, rec.sr0, rec.disp_init), (2, rec.sr1, rec.disp_hr)):
            out[(rec.t, step)] = (np.clip(sr.data[0], 0, 1), np.clip(sr.data[n], 0, 1), d.data[0])
    return out


def run_network(net, sample: EvalSample, dtype=np.float64):
    with default_dtype(dtype), no_grad():
        ll = Tensor(sample.lr_left[None].astype(dtype))
        lr = Tensor(sample.lr_right[None].astype(dtype))
        return net(ll, lr)


def summarize(rows: list[dict]) -> tuple[dict, dict]:
    keys = sorted({(r["iteration"], r["step"]) for r in rows})
    summary = {}
    for t, step in keys:
        sel = [r for r in rows if r["iteration"] == t and r["step"] == step]
        entry = {}
        for k in ("psnr_left", "ssim_left", "psnr_pair", "ssim_pair", "epe_noc", "epe_all"):
            vals = [r[k] for r in sel if r[k] != ""]
            entry[k] = float(np.mean(vals)) if vals else None
        flags = [r["step2_ge_step1"] for r in sel if r["step2_ge_step1"] != ""]
        if flags:
            entry["step2_ge_step1"] = bool(all(flags))
        summary[f"t{t}_step{step}"] = entry
    labels = [f"t{t}_step{s}" for t, s in keys]
    series = {
        "x": list(range(1, len(labels) + 1)),
        "labels": labels,
        "psnr_pair": [summary[k]["psnr_pair"] for k in labels],
        "ssim_pair": [summary[k]["ssim_pair"] for k in labels],
        "epe_all": [summary[k]["epe_all"] for k in labels],
    }
    return summary, series


def evaluate(net, samples: list[EvalSample], dtype=np.float64, left_crop: int = 64,
             skipped: Optional[list] = None) -> EvalReport:
    rows = []
    for s in samples:
        rows.extend(score_outputs(s, trace_outputs(run_network(net, s, dtype)), left_crop))
    summary, series = summarize(rows)
    return EvalReport(rows, summary, list(skipped or []), series)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def write_report(report: EvalReport, out_dir) -> dict:
    """eval.csv, eval.json, plot_psnr.dat, skipped.txt; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "eval.csv", "json": out / "eval.json",
             "plot": out / "plot_psnr.dat", "skipped": out / "skipped.txt"}
    with open(paths["csv"], "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=FIELDS, lineterminator="\n")
        w.writeheader()
        for r in report.rows:
            w.writerow({k: _fmt(r[k]) for k in FIELDS})
    blob = {"summary": report.summary, "series": report.series, "skipped": report.skipped,
            "rows": report.rows}
    paths["json"].write_text(json.dumps(blob, indent=2, sort_keys=True, default=_json_default) + "\n")
    with open(paths["plot"], "w") as f:
        f.write("# x label psnr_pair ssim_pair epe_all\n")
        s = report.series
        for x, lab, p, q, e in zip(s["x"], s["labels"], s["psnr_pair"], s["ssim_pair"], s["epe_all"]):
            f.write(f"{x} {lab} {_fmt(p)} {_fmt(q)} {_fmt(e) if e is not None else 'nan'}\n")
    paths["skipped"].write_text("".join(f"{line}\n" for line in report.skipped))
    return paths


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))
