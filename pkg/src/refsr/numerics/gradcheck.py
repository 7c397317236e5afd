"""Central finite-difference verification of analytic gradients.

The checker evaluates a deterministic scalar-valued function, backpropagates,
then perturbs input coordinates by +/- h and compares (f(x+h) - f(x-h)) / 2h
against the recorded analytic gradient. Double precision inputs are assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, no_grad


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    tol: float
    worst: tuple[int, int] | None = None  # (input index, flat coordinate)
    checked: int = 0
    entries: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"gradient_check {status}: max rel err {self.max_rel_err:.3e} over {self.checked} coords (tol {self.tol:.1e})"


def _relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    denom = max(abs(analytic), abs(numeric))
    if denom < floor:
        return 0.0
    return abs(analytic - numeric) / denom


def gradient_check(
    fn,
    inputs,
    h: float = 1e-5,
    tol: float = 1e-3,
    max_coords_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn(inputs)`` against central differences.

    ``fn`` must be deterministic and return a scalar tensor. Each input tensor
    is checked coordinate-wise; ``max_coords_per_input`` caps the number of
    sampled coordinates per input for large parameter blocks (all coordinates
    are checked when it is None or not exceeded).

    Raises FloatingPointError when the function produces a non-finite value,
    naming the offending input/coordinate.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()

    out = fn(inputs)
    if out.size != 1:
        raise ValueError("gradient_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("gradient_check: non-finite function value at base point")
    out.backward()

    analytic = []
    for t in inputs:
        analytic.append(np.zeros_like(t.data) if t.grad is None else t.grad.copy())

    def evaluate() -> float:
        with no_grad():  # difference evaluations need values only
            val = fn(inputs)
        return float(val.data.reshape(-1)[0])

    max_err = 0.0
    worst = None
    checked = 0
    entries = []
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = range(n)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = evaluate()
            flat[c] = orig - h
            f_minus = evaluate()
            flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"gradient_check: non-finite value at input {i}, coordinate {c}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[i].reshape(-1)[c])
            err = _relative_error(a, numeric)
            checked += 1
            entries.append((i, int(c), a, numeric, err))
            if err > max_err:
                max_err = err
                worst = (i, int(c))

    return GradCheckReport(
        passed=max_err < tol,
        max_rel_err=max_err,
        tol=tol,
        worst=worst,
        checked=checked,
        entries=entries,
    )
