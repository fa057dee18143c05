"""
The value types every layer trades in. This is just to avoid circular imports...
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Tuple

import numpy as np
import numpy.typing as npt

from specklepad.error import ConfigurationError, NumericError

# dense row-major float array; float32 everywhere except inside gradient checks
Tensor = npt.NDArray[Any]

DTYPE = np.float32


def as_tuple(value: int | Tuple[int, ...], ndim: int) -> Tuple[int, ...]:
    """Broadcast a scalar hyperparameter (padding, stride, window) over `ndim` axes"""
    if isinstance(value, int):
        return (value,) * ndim
    if len(value) != ndim:
        raise ConfigurationError(f"Expected {ndim} values, got {len(value)}", value=value)
    return tuple(int(v) for v in value)


def check_finite(values: Tensor, what: str) -> Tensor:
    """NaN/Inf is an error state for every activation and gradient"""
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite values in {what}")
    return values


@dataclass
class Param:
    """A trainable tensor together with its gradient and Adam moments"""

    name: str
    value: Tensor
    grad: Tensor = field(init=False)
    m: Tensor = field(init=False)
    v: Tensor = field(init=False)
    step_count: int = 0

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        """number of scalar weights"""
        return int(self.value.size)

    def accumulate(self, grad: Tensor) -> None:
        """Add a gradient contribution (a layer may be used several times per pass)"""
        if grad.shape != self.value.shape:
            raise ConfigurationError(
                f"Gradient shape {grad.shape} does not match parameter shape {self.value.shape}", param=self.name
            )
        self.grad += grad.astype(self.grad.dtype, copy=False)

    def zero_grad(self) -> None:
        """reset the gradient slot"""
        self.grad.fill(0)

    def astype(self, dtype: Any) -> None:
        """Recast all slots, used by the gradient checker"""
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)
