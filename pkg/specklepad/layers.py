"""
Layers own their parameters and wrap the stateless kernels. A forward call
returns the cache its backward call needs, so the same layer can serve
several batches at once.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
import math
from typing import Any, List, Sequence, Tuple

import numpy as np

from specklepad import kernels
from specklepad.tensor import DTYPE, Param, Tensor, as_tuple


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    """U(-√(1/fan_in), √(1/fan_in))"""
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Layer(ABC):
    """base class for all network layers"""

    def __init__(self, name: str) -> None:
        self.name = name

    def params(self) -> List[Param]:
        """trainable parameters, in a stable order"""
        return []

    def param_count(self) -> int:
        """number of scalar weights"""
        return sum(p.size for p in self.params())

    def children(self) -> List[Layer]:
        """nested layers, for summaries"""
        return []

    @abstractmethod
    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        """Compute the layer output and the cache its backward pass needs"""

    @abstractmethod
    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        """
        Accumulate parameter gradients and return the gradient with respect
        to the layer input
        """


class Conv(Layer):
    """2-D or 3-D convolution, picked by the rank of `kernel`"""

    def __init__(
        self,
        name: str,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel: Tuple[int, ...],
        padding: int | Tuple[int, ...] = 0,
    ) -> None:
        super().__init__(name)
        self.kernel = kernel
        self.padding = as_tuple(padding, len(kernel))
        fan_in = in_channels * math.prod(kernel)
        self.weight = Param(f"{name}.weight", uniform_init(rng, (out_channels, in_channels) + kernel, fan_in))
        self.bias = Param(f"{name}.bias", np.zeros(out_channels, dtype=DTYPE))

    def params(self) -> List[Param]:
        return [self.weight, self.bias]

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return kernels.conv_nd(x, self.weight.value, self.bias.value, self.padding, 1)

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        dx, dweight, dbias = kernels.conv_nd_backward(dout, cache)
        self.weight.accumulate(dweight)
        self.bias.accumulate(dbias)
        return dx


class Linear(Layer):
    """fully connected layer"""

    def __init__(self, name: str, rng: np.random.Generator, features: int, outputs: int) -> None:
        super().__init__(name)
        self.weight = Param(f"{name}.weight", uniform_init(rng, (features, outputs), features))
        self.bias = Param(f"{name}.bias", np.zeros(outputs, dtype=DTYPE))

    def params(self) -> List[Param]:
        return [self.weight, self.bias]

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return kernels.linear(x, self.weight.value, self.bias.value)

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        dx, dweight, dbias = kernels.linear_backward(dout, cache)
        self.weight.accumulate(dweight)
        self.bias.accumulate(dbias)
        return dx


class Relu(Layer):
    """rectified linear unit"""

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return kernels.relu(x)

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        return kernels.relu_backward(dout, cache)


class Sigmoid(Layer):
    """squash to a probability"""

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return kernels.sigmoid(x)

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        return kernels.sigmoid_backward(dout, cache)


class MaxPool(Layer):
    """non-overlapping max-pool over the trailing `len(window)` axes"""

    def __init__(self, name: str, window: Tuple[int, ...]) -> None:
        super().__init__(name)
        self.window = window

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return kernels.max_pool(x, self.window, self.window, ndim=len(self.window))

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        return kernels.max_pool_backward(dout, cache)


class SamePool(Layer):
    """stride-1 max-pool that keeps the spatial size"""

    def __init__(self, name: str, window: int) -> None:
        super().__init__(name)
        self.window = window

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return kernels.max_pool_same(x, self.window)

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        return kernels.max_pool_same_backward(dout, cache)


class Flatten(Layer):
    """B×… → B×F"""

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        return dout.reshape(cache)


class GlobalAvgPool(Layer):
    """B×C×H×W → B×C"""

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        height, width = cache[2], cache[3]
        return np.broadcast_to(dout[:, :, None, None] / (height * width), cache).copy()


class Sequential(Layer):
    """layers applied one after another"""

    def __init__(self, name: str, layers: Sequence[Layer]) -> None:
        super().__init__(name)
        self.layers = list(layers)

    def params(self) -> List[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def children(self) -> List[Layer]:
        return self.layers

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        for layer, layer_cache in zip(reversed(self.layers), reversed(cache)):
            dout = layer.backward(dout, layer_cache)
        return dout


class ResidualBlock(Layer):
    """
    conv → relu → conv on the main branch, a 1×1 projection conv on the
    shortcut; the two are summed before the block's final relu
    """

    def __init__(self, name: str, rng: np.random.Generator, in_channels: int, out_channels: int) -> None:
        super().__init__(name)
        self.main = Sequential(
            f"{name}.main",
            [
                Conv(f"{name}.conv_a", rng, in_channels, out_channels, (3, 3), 1),
                Relu(f"{name}.relu_a"),
                Conv(f"{name}.conv_b", rng, out_channels, out_channels, (3, 3), 1),
            ],
        )
        self.projection = Conv(f"{name}.projection", rng, in_channels, out_channels, (1, 1), 0)

    def params(self) -> List[Param]:
        return self.main.params() + self.projection.params()

    def children(self) -> List[Layer]:
        return self.main.layers + [self.projection]

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        main, main_cache = self.main.forward(x)
        shortcut, shortcut_cache = self.projection.forward(x)
        out, relu_cache = kernels.relu(main + shortcut)
        return out, (main_cache, shortcut_cache, relu_cache)

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        main_cache, shortcut_cache, relu_cache = cache
        dsum = kernels.relu_backward(dout, relu_cache)
        return self.main.backward(dsum, main_cache) + self.projection.backward(dsum, shortcut_cache)


class Inception(Layer):
    """
    Four parallel branches concatenated along channels: 1×1; 1×1→3×3;
    1×1→5×5; 3×3 max-pool→1×1. Every convolution is followed by a relu.
    """

    def __init__(self, name: str, rng: np.random.Generator, in_channels: int, branch_channels: int) -> None:
        super().__init__(name)
        c = branch_channels
        self.branches = [
            Sequential(f"{name}.b1", [Conv(f"{name}.b1.conv", rng, in_channels, c, (1, 1)), Relu(f"{name}.b1.relu")]),
            Sequential(
                f"{name}.b3",
                [
                    Conv(f"{name}.b3.reduce", rng, in_channels, c, (1, 1)),
                    Relu(f"{name}.b3.relu_reduce"),
                    Conv(f"{name}.b3.conv", rng, c, c, (3, 3), 1),
                    Relu(f"{name}.b3.relu"),
                ],
            ),
            Sequential(
                f"{name}.b5",
                [
                    Conv(f"{name}.b5.reduce", rng, in_channels, c, (1, 1)),
                    Relu(f"{name}.b5.relu_reduce"),
                    Conv(f"{name}.b5.conv", rng, c, c, (5, 5), 2),
                    Relu(f"{name}.b5.relu"),
                ],
            ),
            Sequential(
                f"{name}.pool",
                [
                    SamePool(f"{name}.pool.max", 3),
                    Conv(f"{name}.pool.conv", rng, in_channels, c, (1, 1)),
                    Relu(f"{name}.pool.relu"),
                ],
            ),
        ]
        self.branch_channels = c

    def params(self) -> List[Param]:
        return [p for branch in self.branches for p in branch.params()]

    def children(self) -> List[Layer]:
        return list(self.branches)

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        outputs, caches = zip(*(branch.forward(x) for branch in self.branches))
        return np.concatenate(outputs, axis=1), list(caches)

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        c = self.branch_channels
        dx = np.zeros((), dtype=dout.dtype)
        for index, (branch, branch_cache) in enumerate(zip(self.branches, cache)):
            dx = dx + branch.backward(np.ascontiguousarray(dout[:, index * c : (index + 1) * c]), branch_cache)
        return dx


class Lstm(Layer):
    """one LSTM layer over a T×B×F sequence, emitting all T hidden states"""

    def __init__(self, name: str, rng: np.random.Generator, features: int, hidden: int) -> None:
        super().__init__(name)
        self.hidden = hidden
        fan_in = features + hidden
        self.weight = Param(f"{name}.weight", uniform_init(rng, (fan_in, 4 * hidden), fan_in))
        self.bias = Param(f"{name}.bias", np.zeros(4 * hidden, dtype=DTYPE))

    def params(self) -> List[Param]:
        return [self.weight, self.bias]

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        hs, _, _, cache = kernels.lstm_layer(x, self.weight.value, self.bias.value)
        return hs, cache

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        dxs, dweight, dbias, _, _ = kernels.lstm_layer_backward(dout, cache)
        self.weight.accumulate(dweight)
        self.bias.accumulate(dbias)
        return dxs


class LastStep(Layer):
    """T×B×H → B×H, keeping only the final hidden state"""

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return x[-1], x.shape

    def backward(self, dout: Tensor, cache: Any) -> Tensor:
        dx = np.zeros(cache, dtype=dout.dtype)
        dx[-1] = dout
        return dx
