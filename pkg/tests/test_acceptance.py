"""Acceptance criteria 1-10, one reported line each.

Criteria 6-8 share one overfit run. A finished run under runs/overfit with a
matching config fingerprint (written by scripts/overfit.py) is reused;
otherwise the run is trained here, which takes about 25 minutes.
"""

import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from oracles import avg_pool_loops, conv2d_loops, correlation_loops, warp_loops
from ssrde.attention import regress_lr_disparity, warp_by_attention
from ssrde.autodiff import Tensor, no_grad, ops
from ssrde.disparity import build_partial_cost_volume, compute_valid_masks, match_positions, warp_by_disparity
from ssrde.experiments import coarse_to_fine, overfit_config, run_overfit, train_set_psnr
from ssrde.gradsuite import run_network_check, run_op_suite
from ssrde.metrics import epe, psnr, ssim, ssim_map
from ssrde.network import NetworkConfig, SSRDEFNet
from ssrde.training import train

RUN_DIR = Path(__file__).resolve().parents[1] / "runs" / "overfit"
RESULTS = []


def report(cid, ok, text, level=None):
    level = level or ("PASS" if ok else "FAIL")
    line = f"[{level}] criterion {cid}: {text}"
    RESULTS.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def overfit():
    cfg = overfit_config()
    run = run_overfit(RUN_DIR, cfg)
    return run, run.net()


def test_c1_gradient_suite():
    t0 = time.perf_counter()
    results = run_op_suite(tol=1e-4)
    results.append(run_network_check(tol=1e-4, per_param=2))
    results.append(run_network_check(tol=1e-4, per_param=1, with_loss=True))
    seconds = time.perf_counter() - t0
    worst = max(r.report.max_rel_err for r in results)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and seconds < 300
    report(1, ok, f"{len(results)} cases incl. full T=2 net on 8x12, max rel err {worst:.2e} < 1e-4, "
                  f"{seconds:.0f}s < 300s" + (f"; failed: {failed}" if failed else ""))
    assert ok


def test_c2_attention_invariants(rng):
    net = SSRDEFNet(NetworkConfig(iterations=2), seed=3)
    with no_grad():
        tr = net(Tensor(rng.uniform(size=(1, 3, 8, 24))), Tensor(rng.uniform(size=(1, 3, 8, 24))))
    row_err = max(np.max(np.abs(r.attention.attention.data.sum(-1) - 1)) for r in tr.records)
    soft = ops.softmax(Tensor(rng.normal(size=(3, 5, 7)) * 30), axis=-1).data
    row_err = max(row_err, np.max(np.abs(soft.sum(-1) - 1)))

    F = rng.normal(size=(2, 4, 8, 12))
    eye = np.broadcast_to(np.eye(12), (2, 8, 12, 12)).copy()
    warped, _ = warp_by_attention(Tensor(eye), Tensor(F))
    warp_err = np.max(np.abs(warped.data - F))

    W, d = 12, 3
    M = np.zeros((1, 8, W, W))
    for x in range(W):
        M[:, :, x, x - d if x >= d else x] = 1.0
    disp = regress_lr_disparity(Tensor(M), "left").disparity.data
    exact = bool(np.all(disp[..., d:] == d))
    ok = row_err <= 1e-6 and warp_err <= 1e-12 and exact
    report(2, ok, f"softmax row-sum err {row_err:.1e} <= 1e-6; identity warp err {warp_err:.1e} <= 1e-12; "
                  f"shifted delta recovers d={d} exactly: {exact}")
    assert ok


def test_c3_valid_mask():
    W = 24
    consistent = compute_valid_masks(Tensor(np.full((2, 4, W), 4.0))).data
    ones = bool(np.all(consistent[0, :, 4:] == 1) and np.all(consistent[1, :, :W - 4] == 1))
    V = compute_valid_masks(Tensor(np.concatenate([np.full((1, 4, W), 4.0), np.full((1, 4, W), 9.0)]))).data
    v = float(V[0, 0, 12])
    direct = 1 - np.tanh(0.2 * 5)
    ok_direct = abs(v - direct) <= 1e-6
    ok_pinned = abs(v - 0.23841) <= 1e-6
    report(3, ones and ok_direct and ok_pinned,
           f"consistent => V==1: {ones}; 5-px mismatch V={v:.10f}, direct 1-tanh(1) diff {abs(v - direct):.1e}; "
           f"vs pinned 0.23841 diff {abs(v - 0.23841):.2e} (tol 1e-6; the pinned value is 1-tanh(1) rounded "
           f"to 5 places)")
    assert ones and ok_direct and ok_pinned


def test_c4_loop_oracles(rng):
    H, W, C = 8, 12, 4
    own, other = rng.normal(size=(2, C, H, W)), rng.normal(size=(2, C, H, W))
    init = Tensor(rng.uniform(0, 6, size=(2, H, W)))
    cv = build_partial_cost_volume(Tensor(own), Tensor(other), init, P=6, delta_d=6.0, sign="stacked")
    e_cv = np.max(np.abs(cv.cost.data - correlation_loops(own, other, match_positions(cv.hypotheses, "stacked").data)))
    d = rng.uniform(0, 5, size=(2, H, W))
    e_warp = np.max(np.abs(warp_by_disparity(Tensor(own), Tensor(d), "stacked").data - warp_loops(own, d, [1, -1])))
    e_pool = np.max(np.abs(ops.avg_pool(Tensor(own), 2).data - avg_pool_loops(own, 2)))
    w, b = rng.normal(size=(5, C, 3, 3)), rng.normal(size=5)
    e_conv = np.max(np.abs(ops.conv2d(Tensor(own), Tensor(w), Tensor(b), padding=1).data
                           - conv2d_loops(own, w, b, pad=1)))
    worst = max(e_cv, e_warp, e_pool, e_conv)
    ok = worst <= 1e-10
    report(4, ok, f"cost volume {e_cv:.1e}, warp {e_warp:.1e}, pooling {e_pool:.1e}, conv {e_conv:.1e} (tol 1e-10)")
    assert ok


def test_c5_metric_oracles(rng):
    a = np.full((3, 16, 16), 0.25)
    p = psnr(a + 16 / 255, a)
    closed = 20 * np.log10(255 / 16)
    ok_closed = abs(p - closed) <= 1e-4
    ok_pinned = abs(p - 24.0345) <= 1e-4
    img = rng.uniform(size=(3, 16, 16))
    ok_ssim = ssim(img, img) == 1.0
    pred, gt = rng.uniform(0, 8, size=(6, 9)), rng.uniform(0, 8, size=(6, 9))
    ok_epe = epe(pred, gt).epe_all == np.abs(pred - gt).sum() / pred.size
    x, y = rng.uniform(size=(1, 3, 24, 24)), rng.uniform(size=(1, 3, 24, 24))
    loss_side = ssim_map(Tensor(x), Tensor(y), "reflect").data[..., 5:-5, 5:-5].mean()
    e_side = abs(loss_side - ssim(x[0], y[0]))
    ok_side = e_side <= 1e-12
    ok = ok_closed and ok_pinned and ok_ssim and ok_epe and ok_side
    report(5, ok, f"PSNR(16/255 offset)={p:.5f} vs closed form 20log10(255/16)={closed:.5f}: {ok_closed}; "
                  f"vs pinned 24.0345 diff {abs(p - 24.0345):.4f} (tol 1e-4): {ok_pinned}; SSIM(a,a)==1: {ok_ssim}; "
                  f"EPE oracle exact: {ok_epe}; loss/metric SSIM diff {e_side:.1e}")
    assert ok


def test_c6_overfit(overfit):
    run, net = overfit
    best = max(run.psnrs)
    eval_psnr = train_set_psnr(net, run.cfg)[f"t{run.cfg.iterations}_step2"]
    first = run.losses[:50]
    rises = [i + 2 for i, (a, b) in enumerate(zip(first, first[1:])) if b >= a]
    ok_psnr = max(best, eval_psnr) >= 40.0
    ok_time = run.seconds < 1800
    ok_mono = not rises
    ok = ok_psnr and ok_time and ok_mono
    report(6, ok, f"best train PSNR {best:.2f} dB, final no-grad {eval_psnr:.2f} dB (need >= 40) in "
                  f"{len(run.history)} steps, {run.seconds / 60:.1f} min (< 30); loss strictly decreasing over "
                  f"first 50 steps: {ok_mono}" + (f" (rises at steps {rises})" if rises else ""))
    assert ok


def test_c7_coarse_to_fine(overfit):
    run, net = overfit
    r = coarse_to_fine(net, run.cfg)
    ok = r["epe_all_hr"] <= r["epe_all_upsampled"] and r["epe_noc_hr"] <= r["epe_noc_upsampled"]
    report(7, ok, f"held-out EPE all {r['epe_all_hr']:.3f} (HR) vs {r['epe_all_upsampled']:.3f} (upsampled LR); "
                  f"noc {r['epe_noc_hr']:.3f} vs {r['epe_noc_upsampled']:.3f}")
    assert ok


def test_c8_step_progression(overfit):
    run, net = overfit
    T = run.cfg.iterations
    ps = train_set_psnr(net, run.cfg)
    sr0, sr1 = ps[f"t{T}_step1"], ps[f"t{T}_step2"]
    ok = sr1 >= sr0
    trained = max(run.psnrs) >= 40.0
    text = f"final-iteration PSNR SR1 {sr1:.3f} dB vs SR0 {sr0:.3f} dB on the overfit set"
    if ok or trained:
        report(8, ok, text)
        assert ok
    else:
        report(8, ok, text + " (run under-trained, criterion 6 not met: soft warning)", level="WARN")
        warnings.warn("step progression SR1 < SR0 on an under-trained run")


def test_c9_determinism(tmp_path):
    cfg = overfit_config(steps=100, checkpoint_every=100)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    a = (tmp_path / "a/checkpoints/step000100.npz").read_bytes()
    b = (tmp_path / "b/checkpoints/step000100.npz").read_bytes()
    ok = a == b
    report(9, ok, f"two seeded desk runs give {'bit-identical' if ok else 'different'} step-100 checkpoints "
                  f"({len(a)} bytes)")
    assert ok


def test_c10_feedback_off_equals_feedforward(rng):
    on = SSRDEFNet(NetworkConfig(iterations=2), seed=5)
    off = SSRDEFNet(NetworkConfig(iterations=2, feedback=False), seed=5)
    off.load_state_dict(on.state_dict())
    ll, lr = Tensor(rng.uniform(size=(1, 3, 8, 24))), Tensor(rng.uniform(size=(1, 3, 8, 24)))
    with no_grad():
        tr = off(ll, lr)
        ff = off.feedforward(ll, lr)
        t1 = on(ll, lr, iterations=1)
    names = ("sr0", "sr1", "disp_init", "disp_hr")
    ok = all(np.array_equal(getattr(rec, n).data, getattr(ff, n).data) for rec in tr.records for n in names)
    ok = ok and all(np.array_equal(getattr(t1.records[0], n).data, getattr(ff, n).data) for n in names)
    report(10, ok, "feedback disabled (and T=1) outputs equal the feed-forward pass bit-exactly"
           if ok else "outputs differ from the feed-forward pass")
    assert ok
