"""
Adam with bias correction
"""
from __future__ import annotations

from typing import Iterable

import numpy as np

from specklepad.error import TrainingError
from specklepad.tensor import Param

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


def adam_step(
    params: Iterable[Param], lr: float, beta1: float = BETA1, beta2: float = BETA2, eps: float = EPSILON
) -> None:
    """
    Apply one Adam update to every parameter in place, then zero the
    gradients. Each parameter keeps its own step counter.
    """
    params = list(params)
    # check everything first so a bad gradient never leaves a half-updated network
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            raise TrainingError("Non-finite gradient", param=param.name, step=param.step_count + 1)

    for param in params:
        param.step_count += 1
        g = param.grad
        param.m *= beta1
        param.m += (1.0 - beta1) * g
        param.v *= beta2
        param.v += (1.0 - beta2) * (g * g)
        m_hat = param.m / (1.0 - beta1**param.step_count)
        v_hat = param.v / (1.0 - beta2**param.step_count)
        param.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.value.dtype, copy=False)
        param.zero_grad()
