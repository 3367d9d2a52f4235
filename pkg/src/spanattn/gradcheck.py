"""Finite-difference gradient verification.

Central differences against the analytic gradients produced by the tape.
Only meaningful in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonDeterministicFunction
from .tensor import Tensor, backward, no_grad

__all__ = ["GradCheckEntry", "GradCheckReport", "grad_check"]


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    h: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self):
        lines = [
            f"  {'PASS' if e.passed else 'FAIL'}  {e.name:<30s} max rel err {e.max_rel_err:.3e}"
            for e in self.entries
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})")
        return "\n".join(lines)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.abs(analytic - numeric).max() if analytic.size else 0.0
    scale = max(np.abs(analytic).max() if analytic.size else 0.0,
                np.abs(numeric).max() if numeric.size else 0.0)
    if scale < 1e-8:
        # both gradients are essentially zero; compare absolutely
        return float(diff)
    return float(diff / scale)


def grad_check(f: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]] | dict,
               h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` with central differences.

    ``params`` maps names to the float64 tensors ``f`` closes over. Each
    parameter is perturbed elementwise by +/-h. Raises
    NonDeterministicFunction if two evaluations of ``f`` disagree bitwise.
    """
    if isinstance(params, dict):
        params = list(params.items())

    with no_grad():
        v1 = f().data.copy()
        v2 = f().data.copy()
    if not np.array_equal(v1, v2):
        raise NonDeterministicFunction("f() returned different values on repeated evaluation")

    for _, p in params:
        p.zero_grad()
    loss = f()
    backward(loss)

    report = GradCheckReport(tol=tol, h=h)
    for name, p in params:
        analytic = np.zeros(p.shape, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        numeric = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2.0 * h)
        err = _rel_err(analytic, numeric)
        report.entries.append(GradCheckEntry(name=name, max_rel_err=err, passed=err <= tol))
    return report
