"""Central finite-difference checking of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor

DENOM_FLOOR = 1e-8


@dataclass
class CoordinateCheck:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    checks: list[CoordinateCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def failing_params(self) -> list[str]:
        bad = {c.param for c in self.checks if c.rel_error > self.tolerance}
        return sorted(bad)

    def per_param(self) -> dict[str, float]:
        worst: dict[str, float] = {}
        for c in self.checks:
            worst[c.param] = max(worst.get(c.param, 0.0), c.rel_error)
        return worst


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), DENOM_FLOOR)
    return abs(analytic - numeric) / denom


def analytic_gradients(f: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    with Tape() as tape:
        loss = f()
    if loss.node_id is None:
        # loss does not depend on any tracked tensor
        return {name: np.zeros_like(p.data) for name, p in params.items()}
    tape.backward(loss, params.values())
    return {name: p.grad.copy() for name, p in params.items()}


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from the
    current values of ``params`` (which are perturbed in place and restored).
    ``samples`` limits the number of coordinates tried per parameter; ``None``
    checks every coordinate.  ``analytic`` overrides the tape gradients, which
    is how a corrupted gradient is fed in on purpose.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    rng = rng if rng is not None else np.random.default_rng(0)
    grads = dict(analytic) if analytic is not None else analytic_gradients(f, params)
    report = GradCheckReport(tolerance=tolerance, step=step)

    for name, p in params.items():
        n = p.size
        if n == 0:
            continue
        if samples is None or samples >= n:
            flat_ids = np.arange(n)
        else:
            flat_ids = rng.choice(n, size=samples, replace=False)
        flat = p.data.reshape(-1)
        for fid in flat_ids:
            orig = flat[fid]
            flat[fid] = orig + step
            f_plus = f().item()
            flat[fid] = orig - step
            f_minus = f().item()
            flat[fid] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            idx = np.unravel_index(fid, p.shape)
            report.checks.append(
                CoordinateCheck(
                    param=name,
                    index=tuple(int(i) for i in idx),
                    analytic=float(grads[name].reshape(-1)[fid]),
                    numeric=float(numeric),
                )
            )
    return report
