"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


class NondeterministicError(RuntimeError):
    pass


@dataclass
class ParamReport:
    name: str
    max_rel_err: float
    checked: int
    max_abs_grad: float
    refined: int = 0  # coordinates re-probed with a smaller step after a kink was detected


@dataclass
class GradCheckReport:
    tol: float
    params: list[ParamReport] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        lines = [f"{p.name:40s} checked={p.checked:4d} max_rel_err={p.max_rel_err:.3e}" for p in self.params]
        lines.append(f"{'overall':40s} max_rel_err={self.max_rel_err:.3e} tol={self.tol:g} "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    tol: float = 1e-4,
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    floor: float = 1e-8,
    seed: int = 0,
    kink_retries: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``max_entries`` caps the number of coordinates probed per parameter (chosen
    at random with ``seed``); None probes every coordinate.

    A stencil that straddles a kink (relu, abs, clamp) shows up as disagreeing
    one-sided differences; such coordinates are re-probed with a ten times
    smaller step, at most ``kink_retries`` times. The analytic gradient plays
    no part in that decision, and asymmetries at round-off level are ignored.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        if p.data.dtype != np.float64:
            raise TypeError("finite_diff_check needs double precision parameters")
        p.data = np.ascontiguousarray(p.data)

    def value() -> float:
        out = f()
        if out.data.size != 1:
            raise ValueError(f"f must return a scalar, got shape {out.shape}")
        return float(out.data)

    loss = f()
    again = value()
    if float(loss.data) != again:
        raise NondeterministicError(f"f() returned {float(loss.data)!r} then {again!r}")

    for _, p in named:
        p.grad = np.zeros_like(p.data)
    backward(loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is None or n <= max_entries:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=max_entries, replace=False)
        worst = 0.0
        refined = 0
        for i in idx:
            orig = flat[i]
            h = eps
            for attempt in range(kink_retries + 1):
                flat[i] = orig + h
                up = value()
                flat[i] = orig - h
                down = value()
                flat[i] = orig
                fwd = (up - again) / h
                bwd = (again - down) / h
                # round-off in a one-sided difference grows like ulp(f) / h; only
                # an asymmetry well above it points at a kink inside the stencil
                noise = 1e3 * np.finfo(np.float64).eps * max(1.0, abs(again)) / h
                if attempt == kink_retries or abs(fwd - bwd) <= max(
                        tol * max(abs(fwd), abs(bwd), floor), noise):
                    break
                refined += 1
                h /= 10.0
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[i]), numeric, floor))
        report.params.append(ParamReport(name, worst, len(idx), float(np.abs(analytic).max(initial=0.0)), refined))
    return report
