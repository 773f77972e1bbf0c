"""Finite-difference gradient checking.

`gradient_check` compares reverse-mode gradients against central
differences computed from scratch on freshly rebuilt graphs. It never
reuses graph state between probes, so it exercises the same code path a
training step would take.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OracleError, ShapeError
from .tensor import Tensor

__all__ = ["GradCheckReport", "gradient_check"]


@dataclass
class GradCheckReport:
    """Worst-case relative error per checked input, plus the overall max."""

    per_input: dict[str, float] = field(default_factory=dict)
    max_rel_err: float = 0.0

    def __str__(self) -> str:
        rows = ", ".join(f"{k}={v:.3e}" for k, v in self.per_input.items())
        return f"GradCheckReport(max={self.max_rel_err:.3e}; {rows})"


def _eval_scalar(f, inputs: dict[str, Tensor]) -> Tensor:
    out = f(inputs)
    if not isinstance(out, Tensor):
        raise OracleError("gradient_check: function under test must return a Tensor")
    if out.data.size != 1:
        raise ShapeError(f"gradient_check needs a scalar output, got shape {out.data.shape}")
    if not np.all(np.isfinite(out.data)):
        raise OracleError("gradient_check: non-finite function value")
    return out


def gradient_check(f, inputs: dict[str, Tensor], h: float = 1e-5,
                   max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Check d f / d inputs via central differences.

    `f` maps the dict of named leaf tensors to a scalar Tensor and is
    re-invoked for every probe so the graph is rebuilt from scratch each
    time. Inputs are perturbed in float64 copies. When `max_entries` is
    set, that many coordinates per input are sampled (with `rng`) instead
    of sweeping all of them; large tensors stay checkable in bounded time.

    The relative error for a coordinate is |ad - fd| / max(|ad|, |fd|, 1),
    which behaves like an absolute error near zero and a relative error at
    scale.
    """
    for name, t in inputs.items():
        if not isinstance(t, Tensor):
            raise OracleError(f"gradient_check: input {name!r} is not a Tensor")
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None

    out = _eval_scalar(f, inputs)
    out.backward()
    analytic = {}
    for name, t in inputs.items():
        analytic[name] = np.zeros_like(t.data) if t.grad is None else np.array(t.grad, dtype=np.float64)

    report = GradCheckReport()
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_entries, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(_eval_scalar(f, inputs).data)
            flat[i] = orig - h
            f_minus = float(_eval_scalar(f, inputs).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = float(analytic[name].reshape(-1)[i])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1.0)
            if rel > worst:
                worst = rel
        report.per_input[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
