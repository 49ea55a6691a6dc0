"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if not v < self.tol]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); 0 when both vanish."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    names: Sequence[str] | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backward() against central differences for every entry of ``params``.

    ``f`` takes no arguments and must be deterministic: any random draws it
    uses have to be fixed before calling this.
    """
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    saved_grads = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
        backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved_grads):
        p.grad = g

    def value() -> float:
        with no_grad():
            out = f().item()
        if not np.isfinite(out):
            raise NonFiniteError("grad_check: non-finite objective at perturbed point")
        return out

    report = GradCheckReport(tol=tol)
    for name, p, a in zip(names, params, analytic):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)
        err = relative_error(a, numeric, floor)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
    return report
