"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import DeterminismError
from .tensor import Tensor

# An element that misses the threshold is probed again with smaller steps. A
# stencil straddling a ReLU kink stops straddling it once the step is small
# enough; a wrong analytic gradient stays wrong at every step.
STEP_RETRIES = (1.0, 0.1, 0.01)


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    epsilon: float
    threshold: float
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold

    def worst(self, n: int = 5) -> list[tuple[str, float]]:
        return sorted(self.errors.items(), key=lambda kv: -kv[1])[:n]

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "threshold": self.threshold,
            "max_error": self.max_error,
            "pass": self.passed,
            "per_parameter": self.errors,
            "elements_checked": self.checked,
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    closure: Callable[[], Tensor],
    parameters: Mapping[str, Tensor],
    epsilon: float = 1e-5,
    threshold: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
    oracle_dtype=None,
    order: int = 2,
) -> GradCheckReport:
    """Compare autodiff gradients of ``closure()`` with central differences.

    ``closure`` must rebuild the scalar loss from the current parameter values
    and be deterministic (sampling noise frozen). Each perturbation uses the
    step ``epsilon * max(1, |theta|)``. With ``max_elements`` set, only that
    many randomly chosen entries per parameter are probed; otherwise all are.

    ``oracle_dtype`` (e.g. ``np.longdouble``) evaluates the finite differences
    at a wider precision than the analytic pass. In float64 the difference
    quotient carries roughly ``1e-16 * |loss| / h`` of rounding noise, which
    swamps gradients near 1e-7; the closure must then propagate the
    parameters' dtype. ``order=4`` switches to the five-point central stencil
    ``(8[f(+h) - f(-h)] - [f(+2h) - f(-2h)]) / 12h``, whose truncation error
    is O(h^4) instead of O(h^2). Elements above ``threshold`` are re-probed
    with steps shrunk by ``STEP_RETRIES`` and keep their best error.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    first = closure().data.copy()
    second = closure().data.copy()
    if first.tobytes() != second.tobytes():
        raise DeterminismError(
            f"closure is not deterministic: two forward passes gave {first!r} and {second!r}"
        )

    for p in parameters.values():
        p.zero_grad()
    closure().backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in parameters.items()
    }

    originals = {}
    if oracle_dtype is not None:
        for name, p in parameters.items():
            originals[name] = p.data
            p.data = p.data.astype(oracle_dtype)

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked: dict[str, int] = {}
    try:
        _probe(closure, parameters, analytic, epsilon, threshold, max_elements, rng, errors, checked, order)
    finally:
        for name, data in originals.items():
            parameters[name].data = data
    return GradCheckReport(errors=errors, epsilon=epsilon, threshold=threshold, checked=checked)


def _difference(closure, flat, i, epsilon, order):
    orig = flat[i]
    h = epsilon * max(1.0, abs(orig))
    d1 = _at(closure, flat, i, orig + h) - _at(closure, flat, i, orig - h)
    if order == 2:
        numeric = d1 / (2.0 * h)
    else:
        d2 = _at(closure, flat, i, orig + 2 * h) - _at(closure, flat, i, orig - 2 * h)
        numeric = (8.0 * d1 - d2) / (12.0 * h)
    flat[i] = orig
    return numeric


def _at(closure, flat, i, value):
    flat[i] = value
    return closure().data


def _probe(closure, parameters, analytic, epsilon, threshold, max_elements, rng, errors, checked, order) -> None:
    for name, p in parameters.items():
        flat = p.data.flat
        idx = np.arange(p.size)
        if max_elements is not None and p.size > max_elements:
            idx = np.sort(rng.choice(p.size, size=max_elements, replace=False))
        g = analytic[name].reshape(-1)[idx]
        worst = 0.0
        for j, i in enumerate(idx):
            err = np.inf
            for shrink in STEP_RETRIES:
                numeric = _difference(closure, flat, i, epsilon * shrink, order)
                err = min(err, float(relative_error(g[j], numeric)))
                if err < threshold:
                    break
            worst = max(worst, err)
        errors[name] = worst
        checked[name] = int(idx.size)
