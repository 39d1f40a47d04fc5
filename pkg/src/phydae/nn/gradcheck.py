"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "n_coords": self.n_coords,
            "per_tensor": self.per_tensor,
        }


def grad_check(f: Callable[[], Tensor], tensors: Sequence[Tensor], tolerance: float = 1e-4, *,
               step: float = 1e-5, max_coords: int | None = 24, seed: int = 0,
               name: str = "f") -> GradCheckReport:
    """Compare backprop gradients of the scalar ``f()`` against central differences.

    ``tensors`` are leaves with ``requires_grad``; they are perturbed in place.
    At most ``max_coords`` randomly chosen entries per tensor are probed.
    The error of one tensor is max|analytic - numeric| over probed entries,
    divided by the largest magnitude of either gradient (floored at 1e-8).
    """
    for t in tensors:
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError(f"{name}: non-finite value at the sampled point")
    out.backward()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(name=name, max_rel_error=0.0, tolerance=tolerance)
    for i, t in enumerate(tensors):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.isfinite(analytic).all():
            raise FloatingPointError(f"{name}: non-finite analytic gradient")
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        for n, ci in enumerate(coords):
            orig = flat[ci]
            flat[ci] = orig + step
            fp = float(f().data)
            flat[ci] = orig - step
            fm = float(f().data)
            flat[ci] = orig
            numeric[n] = (fp - fm) / (2.0 * step)
        if not np.isfinite(numeric).all():
            raise FloatingPointError(f"{name}: non-finite finite-difference estimate")
        a = analytic.reshape(-1)[coords]
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        err = float(np.abs(a - numeric).max(initial=0.0) / scale)
        key = t.name or f"input{i}"
        while key in report.per_tensor:
            key += "'"
        report.per_tensor[key] = err
        report.n_coords += len(coords)
        report.max_rel_error = max(report.max_rel_error, err)
    for t in tensors:
        t.grad = None
    return report
