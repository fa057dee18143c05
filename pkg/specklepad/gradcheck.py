"""
Compare analytic gradients against central finite differences
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
from typing import Callable, Dict, List, Tuple

import numpy as np

from specklepad.layers import Layer
from specklepad.tensor import Param, Tensor

logger = logging.getLogger(__name__)

# relative errors are measured against max(|analytic|, |numeric|, RELATIVE_FLOOR)
RELATIVE_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    """Per-tensor maximum relative error, plus the entries found sitting on a kink"""

    epsilon: float
    tolerance: float
    max_relative_error: Dict[str, float] = field(default_factory=dict)
    kinks: Dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        """largest error over every checked tensor"""
        return max(self.max_relative_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        """every smooth entry agreed within tolerance"""
        return self.worst < self.tolerance

    @property
    def flagged(self) -> int:
        """how many entries were skipped as non-differentiable"""
        return sum(self.kinks.values())


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a|, |n|, floor)"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), RELATIVE_FLOOR)


def _check_tensor(
    name: str, values: Tensor, analytic: Tensor, loss: Callable[[], float], epsilon: float, tolerance: float
) -> Tuple[float, int]:
    """Perturb every entry of `values` in place and compare slopes"""
    base = loss()
    worst = 0.0
    kinks = 0
    flat = values.reshape(-1)
    grad = analytic.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + epsilon
        plus = loss()
        flat[index] = original - epsilon
        minus = loss()
        flat[index] = original

        a = float(grad[index])
        central = (plus - minus) / (2 * epsilon)
        error = relative_error(a, central)
        if error < tolerance:
            worst = max(worst, error)
            continue
        forward = (plus - base) / epsilon
        backward = (base - minus) / epsilon
        one_sided = min(relative_error(a, forward), relative_error(a, backward))
        if one_sided < 0.1 and relative_error(forward, backward) > tolerance:
            kinks += 1
            logger.debug("%s[%d] sits on a non-differentiable point", name, index)
            continue
        worst = max(worst, error)
    return worst, kinks


def grad_check(
    fragment: Layer, x: Tensor, epsilon: float = 1e-3, tolerance: float = 1e-3, seed: int = 0
) -> GradCheckReport:
    """
    Check every parameter of `fragment` and its input gradient.

    The fragment runs in float64 for the duration of the check and gets its
    parameters' original dtypes back afterwards, with gradients cleared. Its
    output is reduced to a scalar by a fixed random projection so that every
    output entry contributes to the checked gradient.
    """
    params: List[Param] = fragment.params()
    dtypes = [param.value.dtype for param in params]
    for param in params:
        param.astype(np.float64)
        param.zero_grad()
    try:
        return _run_check(fragment, params, x, epsilon, tolerance, seed)
    finally:
        for param, dtype in zip(params, dtypes):
            param.astype(dtype)
            param.zero_grad()


def _run_check(
    fragment: Layer, params: List[Param], x: Tensor, epsilon: float, tolerance: float, seed: int
) -> GradCheckReport:
    x = np.array(x, dtype=np.float64)

    out, cache = fragment.forward(x)
    projection = np.random.default_rng(seed).standard_normal(out.shape)
    dx = fragment.backward(projection, cache)

    def loss() -> float:
        y, _ = fragment.forward(x)
        return float(np.sum(y * projection))

    report = GradCheckReport(epsilon, tolerance)
    tensors: List[Tuple[str, Tensor, Tensor]] = [("input", x, dx)]
    tensors += [(param.name, param.value, param.grad.copy()) for param in params]
    for name, values, analytic in tensors:
        worst, kinks = _check_tensor(name, values, analytic, loss, epsilon, tolerance)
        report.max_relative_error[name] = worst
        report.kinks[name] = kinks
    logger.info("gradient check: worst relative error %.3g, %d kinks", report.worst, report.flagged)
    return report
