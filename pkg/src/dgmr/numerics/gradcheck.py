"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tape
from .tape import Var

# Denominator floor for the relative error. Central differences on a
# function of magnitude |f| carry round-off noise of order eps*|f|/step
# (~1e-10 for |f| ~ 10 at the default step), so gradients smaller than this
# floor cannot be certified to any relative precision; disagreements below
# tolerance*REL_FLOOR in absolute terms are attributed to that noise. A
# structurally zero gradient (e.g. a bias that cancels out of a softmax)
# would otherwise report noise/floor as a spurious relative error.
REL_FLOOR = 1.0e-4


@dataclass
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: Optional[GradCheckEntry]
    checked: int
    failures: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def grad_check(
    fn: Callable[[], Var],
    params: list[tuple[str, Var]],
    step: float = 1.0e-5,
    tolerance: float = 1.0e-4,
    max_entries_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare tape gradients of a scalar function against central differences.

    Args:
        fn: zero-argument callable rebuilding the graph from current values.
        params: named Vars to perturb.
        step: central-difference step.
        tolerance: report threshold on |analytic - numeric| /
            max(|analytic|, |numeric|, REL_FLOOR).
        max_entries_per_param: optionally subsample large parameters.
        rng: generator for the subsampling choice.

    Returns:
        GradCheckReport; ``passed`` is True when the max relative error over
        every checked entry is under the tolerance.
    """
    tape.zero_grads(p for _, p in params)
    out = fn()
    if out.value.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.all(np.isfinite(out.value)):
        raise ValueError("function value is not finite; cannot check gradients")
    tape.backward(out)
    analytic = {
        name: (np.zeros_like(p.value) if p.grad is None else p.grad.copy())
        for name, p in params
    }

    worst = None
    failures = []
    checked = 0
    max_rel = 0.0
    for name, p in params:
        p.value = np.ascontiguousarray(p.value)
        flat = p.value.ravel()
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = range(n)
        a_flat = analytic[name].ravel()
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + step
            f_plus = float(fn().value)
            flat[i] = keep - step
            f_minus = float(fn().value)
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * step)
            entry = GradCheckEntry(
                param=name,
                index=int(i),
                analytic=float(a_flat[i]),
                numeric=numeric,
                rel_error=_rel_error(float(a_flat[i]), numeric),
            )
            checked += 1
            if entry.rel_error > max_rel:
                max_rel = entry.rel_error
                worst = entry
            if entry.rel_error >= tolerance:
                failures.append(entry)
    return GradCheckReport(
        max_rel_error=max_rel,
        tolerance=tolerance,
        worst=worst,
        checked=checked,
        failures=failures,
    )
