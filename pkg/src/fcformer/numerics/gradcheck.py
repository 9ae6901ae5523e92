"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nn import Parameter
from .tensor import DTYPE, Tensor, no_grad


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradFailure:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    error: float


@dataclass
class GradCheckReport:
    checked: int = 0
    max_error: float = 0.0
    failures: list[GradFailure] = field(default_factory=list)
    per_param: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def failed_params(self) -> list[str]:
        return sorted({f.name for f in self.failures})

    def summary(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        lines = [f"{status}: {self.checked} elements over {len(self.per_param)} parameters, "
                 f"max rel. error {self.max_error:.3e}"]
        for f in self.failures[:20]:
            lines.append(f"  {f.name}{list(f.index)}: analytic={f.analytic:.6g} "
                         f"numeric={f.numeric:.6g} err={f.error:.3e}")
        if len(self.failures) > 20:
            lines.append(f"  ... {len(self.failures) - 20} more")
        return "\n".join(lines)


def _scalar(f: Callable[[], Tensor]) -> float:
    out = f()
    val = float(np.asarray(out.data, dtype=np.float64).sum())
    if not np.isfinite(val):
        raise GradCheckError(f"loss is not finite ({val})")
    return val


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-3,
    tol: float = 1e-2,
    max_elements: int | None = 64,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    Each parameter contributes every element, or a random subsample of
    ``max_elements`` of them. The step is ``h * max(1, |w|)``; the realised
    float32 step is used as the denominator. An element fails when
    ``|analytic - numeric| / max(1, |numeric|) >= tol``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    if loss.data.size != 1:
        raise GradCheckError(f"f must return a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise GradCheckError(f"loss is not finite ({loss.data})")
    loss.backward()
    analytic = {id(p): (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for p in params}

    report = GradCheckReport()
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            n = flat.size
            if max_elements is None or n <= max_elements:
                picks = np.arange(n)
            else:
                picks = np.sort(rng.choice(n, size=max_elements, replace=False))
            grad_flat = analytic[id(p)].reshape(-1)
            for i in picks:
                orig = flat[i]
                step = DTYPE(h * max(1.0, abs(float(orig))))
                flat[i] = orig + step
                hi_w = float(flat[i])
                f_hi = _scalar(f)
                flat[i] = orig - step
                lo_w = float(flat[i])
                f_lo = _scalar(f)
                flat[i] = orig
                numeric = (f_hi - f_lo) / (hi_w - lo_w)
                a = float(grad_flat[i])
                err = abs(a - numeric) / max(1.0, abs(numeric))
                report.max_error = max(report.max_error, err)
                if not err < tol:
                    report.failures.append(GradFailure(
                        p.name, tuple(int(j) for j in np.unravel_index(i, p.shape)), a, numeric, err))
            report.checked += len(picks)
            report.per_param[p.name] = len(picks)
    return report
