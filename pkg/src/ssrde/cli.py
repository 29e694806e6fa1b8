"""Command line entry point: gradcheck | synth | train | eval | infer | report.

Artifacts go under ``--out``; when omitted, under ``$SSRDE_OUT/<command>``
(``runs/<command>`` if the variable is unset). Exit status is 0 on success,
1 when a check fails or training aborts, 2 on usage or validation errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger("ssrde")

OUT_ENV = "SSRDE_OUT"


class UsageError(ValueError):
    pass


def out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two integers like 8,24, got {text!r}")
    return a, b


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradsuite import run_network_check, run_op_suite

    if args.tol <= 0:
        raise UsageError("--tol must be positive")
    results = run_op_suite(tol=args.tol, seed=args.seed)
    if not args.ops_only:
        results.append(run_network_check(tol=args.tol, seed=args.seed, per_param=args.per_param))
        if args.with_loss:
            results.append(run_network_check(tol=args.tol, seed=args.seed, per_param=1, with_loss=True))
    rows = []
    for r in results:
        status = "ok" if r.report.passed else "FAIL"
        print(f"{status:4s} {r.name:32s} max_rel_err={r.report.max_rel_err:.3e} ({r.seconds:.1f}s)")
        rows.append({"name": r.name, "passed": r.report.passed, "max_rel_err": r.report.max_rel_err,
                     "seconds": round(r.seconds, 3)})
    ok = all(r["passed"] for r in rows)
    out = out_dir(args, "gradcheck")
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(json.dumps({"tol": args.tol, "passed": ok, "cases": rows}, indent=2) + "\n")
    print(f"{'PASS' if ok else 'FAIL'}: {sum(r['passed'] for r in rows)}/{len(rows)} cases under tol {args.tol:g}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import TEXTURES, generate_synthetic
    from .metrics import cross_check_noc, write_pfm, write_png

    H, W = args.size
    if args.n <= 0:
        raise UsageError("--n must be positive")
    if args.texture not in TEXTURES:
        raise UsageError(f"--texture must be one of {TEXTURES}")
    lo, hi = args.d_range
    hi = min(hi, int(np.ceil(W / 4)) - 1)
    if lo < 0 or hi < lo:
        raise UsageError(f"disparity range {args.d_range} is empty for width {W}")
    out = out_dir(args, "synth")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.n):
        d = int(rng.integers(lo, hi + 1))
        sc = generate_synthetic(int(rng.integers(0, 2 ** 31)), H, W, d, args.texture, args.scale)
        name = f"scene{i:03d}"
        write_png(out / f"{name}_L.png", sc.hr_left)
        write_png(out / f"{name}_R.png", sc.hr_right)
        write_pfm(out / f"{name}_disp.pfm", sc.gt_disparity.astype(np.float32))
        noc = cross_check_noc(sc.gt_disparity, sc.gt_disparity_right)
        write_png(out / f"{name}_noc.png", np.repeat(noc[None].astype(np.float64), 3, axis=0))
    print(f"wrote {args.n} scenes to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_FIELDS = ("scale", "iterations", "channels", "lr", "halve_every", "batch_size", "patch", "seed",
                 "steps", "dtype", "num_patches", "d_range", "texture", "data_dir", "checkpoint_every")


def _run_config(args):
    from .training import RunConfig

    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    if args.paper_profile:
        base.update(batch_size=16, patch=(30, 90))
    for k in _TRAIN_FIELDS:
        v = getattr(args, k, None)
        if v is not None:
            base[k] = v
    if args.no_feedback:
        base["feedback"] = False
    return RunConfig.from_dict(base)


def cmd_train(args) -> int:
    from .training import TrainingAborted, train

    cfg = _run_config(args)
    out = out_dir(args, "train")
    try:
        res = train(cfg, out, resume=args.resume, max_steps=args.max_steps, log_every=args.log_every)
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    last = res.history[-1] if res.history else None
    if last:
        print(f"step {res.step}: loss {last['loss']['total']:.5f}  train PSNR {last['psnr']:.2f} dB")
    print(f"checkpoint: {res.checkpoint}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def resolve_checkpoint(path) -> Path:
    """A checkpoint file, or a run directory whose ``latest`` names one."""
    p = Path(path)
    if p.is_dir():
        latest = p / "latest"
        if not latest.exists():
            raise UsageError(f"{p} has no 'latest' checkpoint pointer")
        p = p / "checkpoints" / latest.read_text().strip()
    if not p.exists():
        raise UsageError(f"checkpoint {p} not found")
    return p


def cmd_eval(args) -> int:
    from .evaluation import evaluate, folder_eval_set, synthetic_eval_set, write_report
    from .training import load_checkpoint

    net, _, cfg, step = load_checkpoint(resolve_checkpoint(args.checkpoint))
    skipped = []
    if args.data:
        samples, skipped = folder_eval_set(args.data, cfg.scale)
    else:
        H, W = args.size
        samples = synthetic_eval_set(args.n, (H, W), cfg.scale, args.seed, tuple(args.d_range), args.texture)
    if not samples:
        print("no evaluable images", file=sys.stderr)
        for s in skipped:
            print(f"  skipped: {s}", file=sys.stderr)
        return 1
    report = evaluate(net, samples, cfg.np_dtype(), args.left_crop, skipped)
    paths = write_report(report, out_dir(args, "eval"))
    for key, entry in report.summary.items():
        epe_all = entry["epe_all"]
        print(f"{key}: PSNR pair {entry['psnr_pair']:.3f} dB  SSIM {entry['ssim_pair']:.4f}"
              + (f"  EPE all {epe_all:.3f}" if epe_all is not None else ""))
    print(f"report: {paths['csv']} (checkpoint step {step}, {len(skipped)} skipped)")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def cmd_infer(args) -> int:
    from .autodiff import Tensor, default_dtype, no_grad
    from .metrics import read_png, write_pfm, write_png
    from .network import SSRDEFNet
    from .training import RunConfig, load_checkpoint

    if args.checkpoint:
        net, _, cfg, _ = load_checkpoint(resolve_checkpoint(args.checkpoint))
        if args.scale is not None and args.scale != cfg.scale:
            raise UsageError(f"--scale {args.scale} does not match the checkpoint scale {cfg.scale}")
    else:
        cfg = RunConfig(scale=args.scale or 2, seed=args.seed)
        log.warning("no --checkpoint given: running an untrained network")
        with default_dtype(cfg.np_dtype()):
            net = SSRDEFNet(cfg.network(), seed=cfg.seed)
    left, right = read_png(args.left), read_png(args.right)
    if left.shape != right.shape:
        raise UsageError(f"left {left.shape[1:]} and right {right.shape[1:]} differ in size")
    dt = cfg.np_dtype()
    with default_dtype(dt), no_grad():
        trace = net(Tensor(left[None].astype(dt)), Tensor(right[None].astype(dt)))
    out = out_dir(args, "infer")
    out.mkdir(parents=True, exist_ok=True)
    last = trace.records[-1]
    write_png(out / "sr_left.png", np.clip(last.sr1.data[0], 0, 1))
    write_png(out / "sr_right.png", np.clip(last.sr1.data[1], 0, 1))
    write_pfm(out / "disp_left.pfm", last.disp_hr.data[0].astype(np.float32))
    write_pfm(out / "disp_right.pfm", last.disp_hr.data[1].astype(np.float32))
    if args.dump_intermediates:
        for rec in trace.records:
            for step, sr in ((1, rec.sr0), (2, rec.sr1)):
                for v, side in ((0, "left"), (1, "right")):
                    write_png(out / f"t{rec.t}_step{step}_sr_{side}.png", np.clip(sr.data[v], 0, 1))
            for v, side in ((0, "left"), (1, "right")):
                write_pfm(out / f"t{rec.t}_disp_init_{side}.pfm", rec.disp_init.data[v].astype(np.float32))
                write_pfm(out / f"t{rec.t}_disp_hr_{side}.pfm", rec.disp_hr.data[v].astype(np.float32))
    print(f"wrote SR pair and HR disparities to {out}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REPORT_FIELDS = ("step", "epoch", "lr", "loss", "sr", "bipam", "disp", "psnr")


def training_rows(run: Path) -> list[dict]:
    path = run / "train.jsonl"
    if not path.exists():
        raise UsageError(f"{run} has no train.jsonl")
    rows = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}:{n}: {e}")
        if "error" in rec:
            continue
        loss = rec["loss"]
        row = {"step": rec["step"], "epoch": rec["epoch"], "lr": rec["lr"], "loss": loss["total"],
               "sr": loss["sr"], "bipam": loss["bipam"], "disp": loss["disp"], "psnr": rec["psnr"]}
        row.update({f"psnr_{k}": v for k, v in sorted(rec.get("psnr_steps", {}).items())})
        rows[rec["step"]] = row  # a resumed run may repeat steps; keep the latest
    return [rows[k] for k in sorted(rows)]


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"--run {run} is not a directory")
    rows = training_rows(run)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    fields = list(REPORT_FIELDS) + sorted({k for r in rows for k in r if k.startswith("psnr_")})
    with open(out / "train_report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n", restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})
    with open(out / "plot_loss.dat", "w") as f:
        f.write("# step loss psnr\n")
        for r in rows:
            f.write(f"{r['step']} {r['loss']:.8g} {r['psnr']:.8g}\n")
    summary = {"steps": len(rows)}
    if rows:
        summary.update(final_step=rows[-1]["step"], final_loss=rows[-1]["loss"], final_psnr=rows[-1]["psnr"],
                       best_psnr=max(r["psnr"] for r in rows))
        first = [r["loss"] for r in rows[:50]]
        summary["loss_strictly_decreasing_first_50"] = bool(len(first) == 50 and all(
            b < a for a, b in zip(first, first[1:])))
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{len(rows)} steps -> {out / 'train_report.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssrde", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every op and the full network")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--per-param", type=int, default=2, help="coordinates probed per network parameter")
    g.add_argument("--ops-only", action="store_true")
    g.add_argument("--with-loss", action="store_true", help="also check the full training loss")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write synthetic stereo scenes as PNG pairs with PFM disparity")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--size", type=_pair, default=(32, 96), help="HR height,width")
    s.add_argument("--scale", type=int, default=2)
    s.add_argument("--d-range", type=_pair, default=(2, 8))
    s.add_argument("--texture", default="noise")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on synthetic patches or a folder of PNG pairs")
    t.add_argument("--config", help="JSON RunConfig; flags override its fields")
    t.add_argument("--paper-profile", action="store_true", help="batch 16, 30x90 patches")
    t.add_argument("--scale", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--channels", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--halve-every", dest="halve_every", type=int, help="epochs between lr halvings")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--patch", type=_pair, help="LR patch height,width")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--num-patches", dest="num_patches", type=int)
    t.add_argument("--d-range", dest="d_range", type=_pair)
    t.add_argument("--texture")
    t.add_argument("--data-dir", dest="data_dir")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--no-feedback", action="store_true")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--log-every", type=int, default=1)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM/EPE for every iteration and step")
    e.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    e.add_argument("--data", help="folder of <name>_L.png/_R.png HR pairs; synthetic scenes if omitted")
    e.add_argument("--n", type=int, default=8)
    e.add_argument("--size", type=_pair, default=(32, 96))
    e.add_argument("--d-range", type=_pair, default=(2, 8))
    e.add_argument("--texture", default="noise")
    e.add_argument("--seed", type=int, default=1)
    e.add_argument("--left-crop", type=int, default=64)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="super-resolve one LR pair and estimate HR disparity")
    i.add_argument("--left", required=True)
    i.add_argument("--right", required=True)
    i.add_argument("--scale", type=int)
    i.add_argument("--checkpoint")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--dump-intermediates", action="store_true")
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("report", help="CSV and plot data from a training run log")
    r.add_argument("--run", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as e:
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
