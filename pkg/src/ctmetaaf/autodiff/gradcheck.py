"""Central finite-difference validation of tape adjoints."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tape import Tape, backward


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    errors: dict = field(default_factory=dict)

    @property
    def failures(self) -> list:
        return [k for k, e in self.errors.items() if not e < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        lines = [f"{'PASS' if e < self.tol else 'FAIL'} {k}: max rel err {e:.2e}"
                 for k, e in self.errors.items()]
        return "\n".join(lines)


def _scalar(x) -> float:
    x = x.value if hasattr(x, "value") else x
    return float(np.real(np.asarray(x)).reshape(()))


def numerical_gradient(f: Callable, params: dict, name: str, eps: float) -> np.ndarray:
    base = {k: np.array(v, copy=True) for k, v in params.items()}
    x = base[name]
    flat = x.reshape(-1)
    is_complex = np.iscomplexobj(x)
    out = np.zeros(flat.shape, dtype=x.dtype)
    for i in range(flat.size):
        orig = flat[i]
        steps = (1.0, 1j) if is_complex else (1.0,)
        for step in steps:
            flat[i] = orig + eps * step
            fp = _scalar(f(base))
            flat[i] = orig - eps * step
            fm = _scalar(f(base))
            flat[i] = orig
            out[i] += step * (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def check_gradients(f: Callable, params: dict, eps: float = 1e-5, tol: float = 1e-4,
                    rel_floor: float = 1e-3) -> GradCheckReport:
    """Compare tape adjoints of ``f`` against central differences.

    ``f`` maps a dict of arrays (or tape variables) to a real scalar.  The
    per-element relative error uses ``max(|a|, |n|, rel_floor * max|n|)`` as
    its denominator, so entries that are zero up to rounding do not dominate.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    params = {k: np.asarray(v, dtype=np.complex128 if np.iscomplexobj(v) else np.float64)
              for k, v in params.items()}
    tape = Tape()
    leaves = tape.leaves(params)
    grad = backward(tape, f(leaves))
    report = GradCheckReport(tol=tol, eps=eps)
    for name in params:
        analytic = np.asarray(grad[name])
        numeric = numerical_gradient(f, params, name, eps)
        scale = np.max(np.abs(numeric)) if numeric.size else 0.0
        den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(rel_floor * scale, 1e-12))
        err = np.abs(analytic - numeric) / den
        report.errors[name] = float(np.max(err)) if err.size else 0.0
    return report
