"""Finite-difference verification harness for the tensor engine.

Checks analytic gradients of a scalar-valued function against central
differences at float64, flagging non-smooth coordinates (kinks) instead of
failing on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["gradcheck", "GradcheckReport"]


@dataclass
class GradcheckReport:
    max_rel_err: float
    n_checked: int
    tol: float
    failures: list = field(default_factory=list)   # (input_idx, coord, analytic, numeric, err)
    kinks: list = field(default_factory=list)      # (input_idx, coord)

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        s = (f"gradcheck {status}: {self.n_checked} coords, "
             f"max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})")
        if self.kinks:
            s += f", {len(self.kinks)} kink(s) excluded"
        for idx, coord, a, n, e in self.failures[:8]:
            s += f"\n  input {idx} coord {coord}: analytic {a:.6e} vs fd {n:.6e} (err {e:.3e})"
        return s


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor],
              masks: Sequence[np.ndarray | None] | None = None,
              tol: float = 1e-4, eps_scale: float = 1e-5,
              kink_tol: float = 1e-2) -> GradcheckReport:
    """Compare analytic gradients of ``f(*inputs)`` against central differences.

    Inputs must be float64 tensors with ``requires_grad``. ``masks`` optionally
    restricts which coordinates of each input are probed. Step size per
    coordinate is ``eps_scale * max(1, |x|)``. Coordinates where the symmetric
    second difference is large relative to the step are reported as kinks and
    excluded from pass/fail.
    """
    inputs = list(inputs)
    for i, t in enumerate(inputs):
        if t.dtype != np.float64:
            raise ValueError(f"gradcheck input {i} must be float64, got {t.dtype}")
        if not t.requires_grad:
            raise ValueError(f"gradcheck input {i} must require grad")
        if t._vjp is not None:
            raise ValueError(f"gradcheck input {i} is not a leaf tensor")

    out = f(*inputs)
    if out.size != 1:
        raise ValueError("gradcheck target must be scalar-valued")
    f0 = out.item()
    if not np.isfinite(f0):
        raise FloatingPointError("non-finite function value at the base point")
    for t in inputs:
        t.grad = None
    out.backward()
    analytic = [t.grad.data if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    report = GradcheckReport(max_rel_err=0.0, n_checked=0, tol=tol)
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        mask = None
        if masks is not None and masks[i] is not None:
            mask = np.asarray(masks[i]).reshape(-1)
        coords = np.nonzero(mask)[0] if mask is not None else range(flat.size)
        a_flat = analytic[i].reshape(-1)
        for c in coords:
            x0 = flat[c]
            h = eps_scale * max(1.0, abs(x0))
            flat[c] = x0 + h
            fp = f(*inputs).item()
            flat[c] = x0 - h
            fm = f(*inputs).item()
            flat[c] = x0
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite value probing input {i} coord {c}")
            if abs(fp + fm - 2.0 * f0) > kink_tol * h * max(1.0, abs(f0)):
                report.kinks.append((i, int(c)))
                continue
            numeric = (fp - fm) / (2.0 * h)
            a = a_flat[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            report.n_checked += 1
            report.max_rel_err = max(report.max_rel_err, err)
            if err > tol:
                report.failures.append((i, int(c), float(a), float(numeric), float(err)))
    return report
