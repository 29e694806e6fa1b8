"""Finite-difference checks for every differentiable operation and for the full
network, shared by the CLI ``gradcheck`` command and the test-suite."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import GradCheckReport, Tensor, default_dtype, finite_diff_check, ops, parameter


@dataclass
class CaseResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _p(rng, *shape, lo=-1.0, hi=1.0):
    return parameter(rng.uniform(lo, hi, size=shape))


def _proj(rng, shape):
    return Tensor(rng.normal(size=shape))


def _scalar(out: Tensor, w: Tensor) -> Tensor:
    return ops.sum(out * w)


def op_cases(seed: int = 0) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list]]]:
    """name -> builder returning (objective, parameters)."""
    from .attention import expected_coordinate, warp_by_attention
    from .disparity import (
        correlation_volume, disparity_hypotheses, soft_argmax, CostVolume, warp_by_disparity,
        compute_valid_masks,
    )
    from .metrics import ssim_map
    from .resize import bicubic_upsample, bilinear_resize, adaptive_avg_pool

    def unary(fn, lo=-1.0, hi=1.0, shape=(2, 3, 4, 5)):
        def build():
            rng = np.random.default_rng(seed)
            a = _p(rng, *shape, lo=lo, hi=hi)
            out = fn(a)
            w = _proj(rng, out.shape)
            return (lambda: _scalar(fn(a), w)), [a]
        return build

    def binary(fn, shape_a=(2, 3, 4, 5), shape_b=(1, 3, 1, 5), lo=-1.0, hi=1.0):
        def build():
            rng = np.random.default_rng(seed)
            a = _p(rng, *shape_a, lo=lo, hi=hi)
            b = _p(rng, *shape_b, lo=lo, hi=hi)
            w = _proj(rng, fn(a, b).shape)
            return (lambda: _scalar(fn(a, b), w)), [a, b]
        return build

    def custom(fn_maker):
        def build():
            return fn_maker(np.random.default_rng(seed))
        return build

    def conv_case(stride, padding, mode, k=3):
        def make(rng):
            x = _p(rng, 2, 3, 6, 7)
            wt = _p(rng, 4, 3, k, k)
            b = _p(rng, 4)
            f = lambda: ops.conv2d(x, wt, b, stride, padding, mode)  # noqa: E731
            w = _proj(rng, f().shape)
            return (lambda: _scalar(f(), w)), [x, wt, b]
        return make

    def conv_t(rng):
        x = _p(rng, 2, 3, 4, 5)
        wt = _p(rng, 3, 2, 4, 4)
        b = _p(rng, 2)
        f = lambda: ops.conv_transpose2d(x, wt, b, 2, 1)  # noqa: E731
        w = _proj(rng, f().shape)
        return (lambda: _scalar(f(), w)), [x, wt, b]

    def prelu_case(rng):
        a = _p(rng, 2, 3, 4, 5)
        al = parameter(rng.uniform(0.1, 0.4, size=3))
        w = _proj(rng, a.shape)
        return (lambda: _scalar(ops.prelu(a, al), w)), [a, al]

    def sample_rows_case(rng):
        F = _p(rng, 2, 3, 4, 6)
        pos = parameter(rng.uniform(-1.5, 6.5, size=(2, 2, 4, 6)))
        w = _proj(rng, (2, 3, 2, 4, 6))
        return (lambda: _scalar(ops.sample_rows(F, pos), w)), [F, pos]

    def corr_case(rng):
        A = _p(rng, 2, 4, 3, 6)
        B = _p(rng, 2, 4, 3, 6)
        pos = parameter(rng.uniform(-1.5, 6.5, size=(2, 5, 3, 6)))
        w = _proj(rng, (2, 5, 3, 6))
        return (lambda: _scalar(correlation_volume(A, B, pos), w)), [A, B, pos]

    def epipolar_case(rng):
        Q = _p(rng, 2, 3, 5, 4)
        K = _p(rng, 2, 3, 4, 5)
        w = _proj(rng, (2, 3, 5, 5))
        return (lambda: _scalar(ops.epipolar_matmul(Q, K), w)), [Q, K]

    def resample_case(rng):
        x = _p(rng, 2, 3, 4, 5)
        w = _proj(rng, (2, 3, 8, 10))
        return (lambda: _scalar(bicubic_upsample(x, 2), w)), [x]

    def resize_mix(rng):
        x = _p(rng, 2, 3, 4, 6)
        w1 = _proj(rng, (2, 3, 7, 9))
        w2 = _proj(rng, (2, 3, 2, 2))
        return (lambda: _scalar(bilinear_resize(x, (7, 9)), w1) + _scalar(adaptive_avg_pool(x, (2, 2)), w2)), [x]

    def shuffle_case(rng):
        x = _p(rng, 2, 8, 3, 4)
        w1 = _proj(rng, (2, 2, 6, 8))
        w2 = _proj(rng, (2, 32, 3, 4))
        return (lambda: _scalar(ops.pixel_shuffle(x, 2), w1)
                + _scalar(ops.space_to_depth(ops.pixel_shuffle(x, 2), 2) * ops.reshape(x, (2, 8, 3, 4))[:, :1], w2[:, :8])), [x]

    def attention_warp(rng):
        cost = _p(rng, 2, 3, 5, 5, lo=-2, hi=2)
        F = _p(rng, 2, 4, 3, 5)
        own = _p(rng, 2, 4, 3, 5)
        w = _proj(rng, (2, 4, 3, 5))
        wc = _proj(rng, (2, 3, 5))

        def f():
            M = ops.softmax(cost, axis=-1)
            warped, _ = warp_by_attention(M, F, own=own, valid_threshold=0.0)
            return _scalar(warped, w) + _scalar(expected_coordinate(M), wc)
        return f, [cost, F, own]

    def hyp_softargmax(rng):
        init = parameter(rng.uniform(3.3, 9.7, size=(2, 3, 12)))
        cost = _p(rng, 2, 6, 3, 12)
        w = _proj(rng, (2, 3, 12))

        def f():
            hyps = disparity_hypotheses(init, 6, 6.0)
            return _scalar(soft_argmax(CostVolume(cost, hyps, 6, 6.0)), w)
        return f, [init, cost]

    def warp_disp(rng):
        F = _p(rng, 2, 3, 4, 9)
        d = parameter(rng.uniform(0.2, 2.8, size=(2, 4, 9)))
        w = _proj(rng, (2, 3, 4, 9))
        wv = _proj(rng, (2, 4, 9))
        return (lambda: _scalar(warp_by_disparity(F, d), w) + _scalar(compute_valid_masks(d), wv)), [F, d]

    def ssim_case(rng):
        a = _p(rng, 1, 2, 12, 13, lo=0, hi=1)
        b = _p(rng, 1, 2, 12, 13, lo=0, hi=1)
        w = _proj(rng, (1, 2, 12, 13))
        return (lambda: _scalar(ssim_map(a, b, "reflect"), w)), [a, b]

    def getitem_case(rng):
        a = _p(rng, 4, 3, 5)
        idx = np.array([0, 2, 2, 1])
        w = _proj(rng, (4, 2, 5))
        return (lambda: _scalar(a[idx, 1:], w)), [a]

    def concat_stack(rng):
        a = _p(rng, 2, 3, 4)
        b = _p(rng, 2, 2, 4)
        w1 = _proj(rng, (2, 5, 4))
        w2 = _proj(rng, (2, 2, 3, 4))
        return (lambda: _scalar(ops.concat([a, b], axis=1), w1) + _scalar(ops.stack([a, a * 2.0]), w2)), [a, b]

    def pad_case(mode):
        def make(rng):
            a = _p(rng, 2, 2, 4, 5)
            w = _proj(rng, (2, 2, 7, 9))
            return (lambda: _scalar(ops.pad2d(a, (1, 2, 3, 1), mode), w)), [a]
        return make

    def avg_pool_case(rng):
        a = _p(rng, 2, 2, 5, 7)
        w = _proj(rng, (2, 2, 3, 4))
        return (lambda: _scalar(ops.avg_pool(a, 2), w)), [a]

    def reductions(rng):
        a = _p(rng, 2, 3, 4, 5)
        return (lambda: ops.sum(ops.mean(a * a, axis=(2, 3)) * 3.0) + ops.sum(ops.transpose(a, (0, 2, 1, 3))[:, 1] ** 3)
                + ops.sum(ops.reshape(a, (6, 20))[2])), [a]

    return {
        "add": binary(ops.add), "sub": binary(ops.sub), "mul": binary(ops.mul),
        "div": binary(ops.div, lo=0.5, hi=2.0), "power": unary(lambda a: ops.power(a, 3.0), lo=0.3, hi=1.5),
        "abs": unary(ops.abs, lo=0.1, hi=1.0), "neg": unary(ops.neg), "exp": unary(ops.exp),
        "log": unary(ops.log, lo=0.5, hi=2.0), "sqrt": unary(ops.sqrt, lo=0.5, hi=2.0),
        "clamp": unary(lambda a: ops.clamp(a, -0.5, 0.5)),
        "maximum": binary(ops.maximum), "minimum": binary(ops.minimum),
        "relu": unary(ops.relu), "prelu": custom(prelu_case), "sigmoid": unary(ops.sigmoid),
        "tanh": unary(ops.tanh), "softmax": unary(lambda a: ops.softmax(a, axis=-1)),
        "reductions": custom(reductions), "getitem": custom(getitem_case), "concat_stack": custom(concat_stack),
        "pad_zeros": custom(pad_case("zeros")), "pad_reflect": custom(pad_case("reflect")),
        "pad_edge": custom(pad_case("edge")),
        "matmul": binary(ops.matmul, (2, 3, 4, 5), (1, 3, 5, 2)), "epipolar_matmul": custom(epipolar_case),
        "resample_bicubic": custom(resample_case), "resample_bilinear_pool": custom(resize_mix),
        "conv2d_zero": custom(conv_case(1, 1, "zeros")), "conv2d_reflect": custom(conv_case(1, 1, "reflect")),
        "conv2d_stride2": custom(conv_case(2, 1, "zeros")), "conv2d_1x1": custom(conv_case(1, 0, "zeros", k=1)),
        "conv_transpose2d": custom(conv_t), "avg_pool": custom(avg_pool_case),
        "pixel_shuffle_space_to_depth": custom(shuffle_case), "sample_rows": custom(sample_rows_case),
        "correlation_volume": custom(corr_case), "attention_warp": custom(attention_warp),
        "hypotheses_soft_argmax": custom(hyp_softargmax), "warp_valid_mask": custom(warp_disp),
        "ssim_map": custom(ssim_case),
    }


def network_objective(seed: int = 0, height: int = 8, width: int = 12, iterations: int = 2,
                      channels: int = 16, with_loss: bool = False, tiny: bool = False):
    """(objective, named params) for the full T-iteration network on one LR pair.

    Without ``with_loss`` the objective is a fixed random projection of every
    SR image and disparity map; with it, the full training loss.
    """
    from .backbone import BackboneConfig
    from .losses import total_loss
    from .network import NetworkConfig, SSRDEFNet
    from .resize import bicubic_upsample

    rng = np.random.default_rng(seed + 1)
    if tiny:
        bb = BackboneConfig(base_channels=channels, rdb_growth=channels, rdb_layers=2, num_rdbs=2)
    else:
        bb = BackboneConfig(base_channels=channels, rdb_growth=channels)
    cfg = NetworkConfig(bb, iterations=iterations)
    with default_dtype(np.float64):
        net = SSRDEFNet(cfg, seed=seed)
    ll = parameter(rng.uniform(0.1, 0.9, size=(1, 3, height, width)))
    lr = parameter(rng.uniform(0.1, 0.9, size=(1, 3, height, width)))
    s = cfg.scale
    if with_loss:
        hl = Tensor(bicubic_upsample(Tensor(ll.data), s).data + rng.normal(0, 0.02, (1, 3, s * height, s * width)))
        hr = Tensor(bicubic_upsample(Tensor(lr.data), s).data + rng.normal(0, 0.02, (1, 3, s * height, s * width)))

        def f():
            return total_loss(net(ll, lr), hl, hr, ll, lr).value
    else:
        probe = net(ll, lr)
        weights = []
        for rec in probe.records:
            for t in (rec.sr0, rec.sr1, rec.disp_init, rec.disp_hr):
                weights.append(Tensor(rng.normal(size=t.shape) / np.sqrt(t.data.size)))

        def f():
            tr = net(ll, lr)
            out = None
            i = 0
            for rec in tr.records:
                for t in (rec.sr0, rec.sr1, rec.disp_init, rec.disp_hr):
                    term = ops.sum(t * weights[i])
                    out = term if out is None else out + term
                    i += 1
            return out

    named = dict(net.named_parameters())
    named["input.left"] = ll
    named["input.right"] = lr
    return f, named


def run_op_suite(tol: float = 1e-4, seed: int = 0, names: Optional[list[str]] = None,
                 eps: float = 1e-6, floor: float = 1e-7) -> list[CaseResult]:
    cases = op_cases(seed)
    results = []
    for name, build in cases.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        with default_dtype(np.float64):
            f, params = build()
            rep = finite_diff_check(f, params, tol=tol, eps=eps, floor=floor, max_entries=60, seed=seed)
        results.append(CaseResult(name, rep, time.perf_counter() - t0))
    return results


def run_network_check(tol: float = 1e-4, seed: int = 0, per_param: int = 2, eps: float = 1e-5,
                      floor: float = 1e-5, with_loss: bool = False, iterations: int = 2,
                      tiny: bool = False) -> CaseResult:
    """Finite differences on the full network in double precision.

    ``floor`` bounds the denominator of the relative error: gradients smaller
    than it are compared on an absolute scale, since central differences
    of the deep objective carry round-off noise of a few 1e-9.
    """
    t0 = time.perf_counter()
    f, named = network_objective(seed, with_loss=with_loss, iterations=iterations, tiny=tiny)
    rep = finite_diff_check(f, named, tol=tol, eps=eps, floor=floor, max_entries=per_param, seed=seed,
                            kink_retries=2)
    name = "network_T%d%s" % (iterations, "_loss" if with_loss else "")
    return CaseResult(name, rep, time.perf_counter() - t0)
