"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonDeterministicFunction, NotScalar
from .tensor import Tensor, get_tape, no_grad


@dataclass
class GradReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __bool__(self):
        return self.passed


def _eval(fn, x: np.ndarray) -> float:
    with no_grad():
        out = fn(Tensor(x))
    if out.data.size != 1:
        raise NotScalar(f"gradcheck function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def gradcheck(fn, input, eps: float = 1e-6, tol: float = 1e-4, floor: float = 1e-4) -> GradReport:
    """Compare the tape gradient of scalar ``fn`` at ``input`` with central differences.

    The relative error at each coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps round-off on near-zero gradients from dominating.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    x0 = np.array(input.data if isinstance(input, Tensor) else input, dtype=np.float64)

    if _eval(fn, x0) != _eval(fn, x0):
        raise NonDeterministicFunction("two evaluations at the same point differ")

    get_tape().clear()
    xt = Tensor(x0.copy(), requires_grad=True)
    out = fn(xt)
    if out.data.size != 1:
        raise NotScalar(f"gradcheck function must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x0) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _eval(fn, x0)
        flat[i] = orig - eps
        fm = _eval(fn, x0)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * eps)

    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = diff / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return GradReport(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        max_abs_error=float(diff.max()) if diff.size else 0.0,
        worst_index=tuple(int(i) for i in worst),
        analytic=analytic,
        numeric=numeric,
        tol=tol,
    )
