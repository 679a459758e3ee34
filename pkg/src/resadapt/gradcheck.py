"""Central finite-difference verification of hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .rng import CounterRNG

DEFAULT_STEP = 1e-5
# gradients whose entries all sit below this are compared in absolute terms
ABS_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    name: str
    errors: list = field(default_factory=list)
    excluded: int = 0
    tolerance: float = 1e-6

    @property
    def max_rel_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g}, excluded {self.excluded})"


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Max absolute deviation scaled by the larger of the two gradients' max magnitude (at least ``floor``)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def finite_diff_check(forward: Callable, backward: Callable, inputs: Sequence[np.ndarray],
                      tolerance: float = 1e-6, step: float = DEFAULT_STEP,
                      nondiff: Callable | None = None, name: str = "op",
                      seed: int = 0, floor: float = ABS_FLOOR) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``forward``.

    ``forward(*inputs)`` returns an array; ``backward(dout, *inputs)`` returns one
    cotangent per input (``None`` skips that input).  A random upstream cotangent
    turns the op into the scalar ``sum(dout * forward(...))``.  ``nondiff(*inputs)``
    may return boolean masks of elements sitting on a kink; those are skipped.
    Gradients that vanish identically (e.g. a bias absorbed by a later batch norm)
    would otherwise pit rounding noise against rounding noise, hence ``floor``.
    """
    if any(np.asarray(a).dtype != np.float64 for a in inputs):
        raise ConfigError("finite-difference checks run in double precision")
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out = np.asarray(forward(*inputs))
    dout = CounterRNG(seed).normal(out.size).reshape(out.shape)
    analytic = backward(dout, *inputs)
    masks = nondiff(*inputs) if nondiff is not None else [None] * len(inputs)
    report = GradCheckReport(name, tolerance=tolerance)

    def objective() -> float:
        return float(np.sum(dout * forward(*inputs)))

    for a, ga, mask in zip(inputs, analytic, masks):
        if ga is None:
            continue
        ga = np.asarray(ga, dtype=np.float64)
        numeric = np.zeros_like(a)
        keep = np.ones(a.shape, bool) if mask is None else ~np.asarray(mask, bool)
        flat = a.reshape(-1)
        for i in np.flatnonzero(keep.reshape(-1)):
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        report.excluded += int((~keep).sum())
        report.errors.append(rel_error(np.where(keep, ga, 0.0), numeric, floor))
    return report
