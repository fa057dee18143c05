"""
Forward and hand-derived backward kernels for every layer the five networks
need. Each forward kernel returns `(output, cache)`; the matching
`*_backward` consumes the cache, so no kernel keeps state between calls.
"""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from specklepad.error import ConfigurationError, DataError
from specklepad.tensor import Tensor, as_tuple

BCE_EPSILON = 1e-7


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvCache:
    """What a convolution needs to remember for its backward pass"""

    padded: Tensor
    weight: Tensor
    padding: Tuple[int, ...]
    stride: Tuple[int, ...]
    out_shape: Tuple[int, ...]


def conv_output_shape(
    spatial: Sequence[int], kernel: Sequence[int], padding: Sequence[int], stride: Sequence[int]
) -> Tuple[int, ...]:
    """floor((n + 2p - k) / s) + 1 along every spatial axis"""
    return tuple((n + 2 * p - k) // s + 1 for n, k, p, s in zip(spatial, kernel, padding, stride))


def _window(offset: Tuple[int, ...], stride: Tuple[int, ...], out_shape: Tuple[int, ...]) -> Tuple[slice, ...]:
    """Index of the input cells a single kernel tap touches, across all output positions"""
    taps = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape))
    return (slice(None), slice(None)) + taps


def conv_nd(
    x: Tensor, weight: Tensor, bias: Tensor, padding: int | Tuple[int, ...] = 0, stride: int | Tuple[int, ...] = 1
) -> Tuple[Tensor, ConvCache]:
    """
    Cross-correlation of a B×C×S₁…Sₙ input with an O×C×K₁…Kₙ filter bank.

    The output is accumulated one kernel tap at a time: every tap is a single
    (B·S)×C by C×O matrix product over a strided view of the padded input, so
    memory never exceeds one output-sized buffer.
    """
    ndim = weight.ndim - 2
    if x.ndim != ndim + 2:
        raise ConfigurationError(f"Input of rank {x.ndim} does not fit a {ndim}-D convolution", shape=x.shape)
    channels_out, channels_in = weight.shape[:2]
    if x.shape[1] != channels_in:
        raise ConfigurationError(
            f"Input has {x.shape[1]} channels but the filters expect {channels_in}",
            input_shape=x.shape,
            weight_shape=weight.shape,
        )
    if bias.shape != (channels_out,):
        raise ConfigurationError(f"Bias shape {bias.shape} does not match {channels_out} filters")
    pads = as_tuple(padding, ndim)
    strides = as_tuple(stride, ndim)
    if any(s < 1 for s in strides) or any(p < 0 for p in pads):
        raise ConfigurationError("Stride must be at least 1 and padding non-negative", stride=strides, padding=pads)
    kernel = weight.shape[2:]
    spatial = x.shape[2:]
    if any(k > n + 2 * p for k, n, p in zip(kernel, spatial, pads)):
        raise ConfigurationError("Kernel does not fit inside the padded input", kernel=kernel, spatial=spatial)
    out_shape = conv_output_shape(spatial, kernel, pads, strides)
    if any(n < 1 for n in out_shape):
        raise ConfigurationError("Convolution would produce an empty output", out_shape=out_shape)

    padded = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pads)) if any(pads) else x
    out = np.zeros((x.shape[0],) + out_shape + (channels_out,), dtype=x.dtype)
    for offset in np.ndindex(*kernel):
        taps = padded[_window(offset, strides, out_shape)]
        out += np.tensordot(taps, weight[(slice(None), slice(None)) + offset], axes=([1], [1]))
    out += bias
    return np.ascontiguousarray(np.moveaxis(out, -1, 1)), ConvCache(padded, weight, pads, strides, out_shape)


def conv_nd_backward(dout: Tensor, cache: ConvCache) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients with respect to input, weight and bias"""
    padded, weight = cache.padded, cache.weight
    ndim = weight.ndim - 2
    reduce_axes = [0] + list(range(2, ndim + 2))
    channels_last = np.moveaxis(dout, 1, -1)

    dpadded = np.zeros_like(padded)
    dweight = np.zeros_like(weight)
    for offset in np.ndindex(*weight.shape[2:]):
        window = _window(offset, cache.stride, cache.out_shape)
        taps = padded[window]
        dweight[(slice(None), slice(None)) + offset] = np.tensordot(dout, taps, axes=(reduce_axes, reduce_axes))
        back = np.tensordot(channels_last, weight[(slice(None), slice(None)) + offset], axes=([-1], [0]))
        dpadded[window] += np.moveaxis(back, -1, 1)
    dbias = dout.sum(axis=tuple(reduce_axes))

    unpad = (slice(None), slice(None)) + tuple(slice(p, dpadded.shape[i + 2] - p) for i, p in enumerate(cache.padding))
    return np.ascontiguousarray(dpadded[unpad]), dweight, dbias.astype(weight.dtype)


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0, stride: int = 1
) -> Tuple[Tensor, ConvCache]:
    """B×C×H×W input, O×C×kh×kw filters"""
    if weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects O×C×kh×kw filters, got shape {weight.shape}")
    return conv_nd(x, weight, bias, padding, stride)


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    padding: int | Tuple[int, int, int] = 0,
    stride: int | Tuple[int, int, int] = 1,
) -> Tuple[Tensor, ConvCache]:
    """B×C×D×H×W input, O×C×kd×kh×kw filters"""
    if weight.ndim != 5:
        raise ConfigurationError(f"conv3d expects O×C×kd×kh×kw filters, got shape {weight.shape}")
    return conv_nd(x, weight, bias, padding, stride)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolCache:
    """argmax positions (flat, within each window) of a max-pool"""

    argmax: Tensor
    input_shape: Tuple[int, ...]
    window: Tuple[int, ...]
    stride: Tuple[int, ...]


def max_pool(
    x: Tensor, window: int | Tuple[int, ...], stride: Optional[int | Tuple[int, ...]] = None, ndim: int = 2
) -> Tuple[Tensor, PoolCache]:
    """
    Max over the trailing `ndim` axes. No padding; incomplete windows at the
    far border are dropped. Ties resolve to the lowest flat index.
    """
    windows = as_tuple(window, ndim)
    strides = as_tuple(stride if stride is not None else window, ndim)
    spatial = x.shape[-ndim:]
    if any(k > n for k, n in zip(windows, spatial)):
        raise ConfigurationError("Pooling window is larger than the input", window=windows, spatial=spatial)
    if any(s < 1 for s in strides) or any(k < 1 for k in windows):
        raise ConfigurationError("Pooling window and stride must be positive", window=windows, stride=strides)
    lead = x.shape[:-ndim]
    axes = tuple(range(x.ndim - ndim, x.ndim))
    view = sliding_window_view(x, windows, axis=axes)
    view = view[(slice(None),) * len(lead) + tuple(slice(None, None, s) for s in strides)]
    out_shape = view.shape[len(lead) : len(lead) + ndim]
    flat = view.reshape(lead + out_shape + (math.prod(windows),))
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), PoolCache(argmax, x.shape, windows, strides)


def max_pool_backward(dout: Tensor, cache: PoolCache) -> Tensor:
    """Route each output gradient to the input cell that won its window"""
    ndim = len(cache.window)
    spatial = cache.input_shape[-ndim:]
    lead = cache.input_shape[:-ndim]
    rows = math.prod(lead)
    out_shape = cache.argmax.shape[len(lead) :]

    offsets = np.unravel_index(cache.argmax.reshape((rows,) + out_shape), cache.window)
    grid = np.indices(out_shape)
    coords = tuple(grid[i] * cache.stride[i] + offsets[i] for i in range(ndim))
    flat_index = np.ravel_multi_index(coords, spatial)
    row_index = np.broadcast_to(np.arange(rows).reshape((rows,) + (1,) * ndim), flat_index.shape)

    dx = np.zeros((rows, math.prod(spatial)), dtype=dout.dtype)
    np.add.at(dx, (row_index, flat_index), dout.reshape((rows,) + out_shape))
    return dx.reshape(cache.input_shape)


@dataclass(frozen=True)
class SamePoolCache:
    """Border width and inner pool cache of a shape-preserving max-pool"""

    border: int
    inner: PoolCache


def max_pool_same(x: Tensor, window: int) -> Tuple[Tensor, SamePoolCache]:
    """Stride-1 2-D max-pool that keeps the spatial size; the border is padded with -inf so it never wins"""
    border = window // 2
    padded = np.pad(x, ((0, 0), (0, 0), (border, border), (border, border)), constant_values=-np.inf)
    out, inner = max_pool(padded, window, 1, ndim=2)
    return out, SamePoolCache(border, inner)


def max_pool_same_backward(dout: Tensor, cache: SamePoolCache) -> Tensor:
    """gradient of `max_pool_same`"""
    dpadded = max_pool_backward(dout, cache.inner)
    b = cache.border
    return np.ascontiguousarray(dpadded[:, :, b : dpadded.shape[2] - b, b : dpadded.shape[3] - b])


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tuple[Tensor, Tensor]:
    """max(x, 0); the cache is the input"""
    return np.maximum(x, 0).astype(x.dtype, copy=False), x


def relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    """the derivative at exactly 0 is taken to be 0"""
    return dout * (x > 0)


def sigmoid(x: Tensor) -> Tuple[Tensor, Tensor]:
    """logistic function; the cache is the output"""
    y = expit(x).astype(x.dtype, copy=False)
    return y, y


def sigmoid_backward(dout: Tensor, y: Tensor) -> Tensor:
    """σ' = σ(1 - σ)"""
    return dout * y * (1 - y)


def tanh(x: Tensor) -> Tuple[Tensor, Tensor]:
    """hyperbolic tangent; the cache is the output"""
    y = np.tanh(x)
    return y, y


def tanh_backward(dout: Tensor, y: Tensor) -> Tensor:
    """tanh' = 1 - tanh²"""
    return dout * (1 - y * y)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
    """B×F @ F×G + G"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ConfigurationError(
            "Linear layer shape mismatch", input_shape=x.shape, weight_shape=weight.shape, bias_shape=bias.shape
        )
    return x @ weight + bias, (x, weight)


def linear_backward(dout: Tensor, cache: Tuple[Tensor, Tensor]) -> Tuple[Tensor, Tensor, Tensor]:
    """gradients with respect to input, weight and bias"""
    x, weight = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


# ---------------------------------------------------------------------------
# recurrent
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LstmStep:
    """Everything one time step needs for backpropagation through time"""

    xh: Tensor
    i: Tensor
    f: Tensor
    g: Tensor
    o: Tensor
    c_prev: Tensor
    tanh_c: Tensor


@dataclass(frozen=True)
class LstmCache:
    """Per-step caches plus the weight the gates were computed with"""

    steps: List[LstmStep]
    weight: Tensor
    features: int


def lstm_parameter_count(features: int, hidden: int) -> int:
    """4·(H·(F+H) + H): one weight block and one bias vector per gate"""
    return 4 * (hidden * (features + hidden) + hidden)


def lstm_layer(
    xs: Tensor, weight: Tensor, bias: Tensor, h0: Optional[Tensor] = None, c0: Optional[Tensor] = None
) -> Tuple[Tensor, Tensor, Tensor, LstmCache]:
    """
    Run a T×B×F sequence through one LSTM layer.

    `weight` is (F+H)×4H and `bias` is 4H, gate blocks ordered i, f, g, o.
    Returns all hidden states (T×B×H), the final hidden and the final cell state.
    """
    if xs.ndim != 3 or xs.shape[0] == 0:
        raise ConfigurationError("LSTM input must be a non-empty T×B×F sequence", shape=xs.shape)
    steps, batch, features = xs.shape
    hidden = weight.shape[1] // 4
    if weight.shape != (features + hidden, 4 * hidden) or bias.shape != (4 * hidden,):
        raise ConfigurationError(
            "LSTM weight shape mismatch", weight_shape=weight.shape, bias_shape=bias.shape, features=features
        )
    h = np.zeros((batch, hidden), dtype=xs.dtype) if h0 is None else h0
    c = np.zeros((batch, hidden), dtype=xs.dtype) if c0 is None else c0

    hs = np.empty((steps, batch, hidden), dtype=xs.dtype)
    cache: List[LstmStep] = []
    for t in range(steps):
        xh = np.concatenate([xs[t], h], axis=1)
        z = xh @ weight + bias
        i = expit(z[:, :hidden])
        f = expit(z[:, hidden : 2 * hidden])
        g = np.tanh(z[:, 2 * hidden : 3 * hidden])
        o = expit(z[:, 3 * hidden :])
        c_prev = c
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        hs[t] = h
        cache.append(LstmStep(xh, i, f, g, o, c_prev, tanh_c))
    return hs, h, c, LstmCache(cache, weight, features)


def lstm_layer_backward(
    dhs: Tensor, cache: LstmCache, dh_last: Optional[Tensor] = None, dc_last: Optional[Tensor] = None
) -> Tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """
    Backpropagation through time.

    `dhs` is the T×B×H gradient arriving at every hidden state from above.
    Returns (dxs, dweight, dbias, dh0, dc0).
    """
    weight, features = cache.weight, cache.features
    hidden = weight.shape[1] // 4
    steps, batch, _ = dhs.shape
    dweight = np.zeros_like(weight)
    dbias = np.zeros(weight.shape[1], dtype=weight.dtype)
    dxs = np.empty((steps, batch, features), dtype=dhs.dtype)
    dh_next = np.zeros((batch, hidden), dtype=dhs.dtype) if dh_last is None else dh_last
    dc_next = np.zeros((batch, hidden), dtype=dhs.dtype) if dc_last is None else dc_last

    for t in reversed(range(steps)):
        step = cache.steps[t]
        dh = dhs[t] + dh_next
        do = dh * step.tanh_c
        dc = dc_next + dh * step.o * (1 - step.tanh_c * step.tanh_c)
        di = dc * step.g
        dg = dc * step.i
        df = dc * step.c_prev
        dz = np.concatenate(
            [
                di * step.i * (1 - step.i),
                df * step.f * (1 - step.f),
                dg * (1 - step.g * step.g),
                do * step.o * (1 - step.o),
            ],
            axis=1,
        )
        dweight += step.xh.T @ dz
        dbias += dz.sum(axis=0)
        dxh = dz @ weight.T
        dxs[t] = dxh[:, :features]
        dh_next = dxh[:, features:]
        dc_next = dc * step.f
    return dxs, dweight, dbias, dh_next, dc_next


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def bce_loss(pred: Tensor, target: Tensor, epsilon: float = BCE_EPSILON) -> Tuple[float, Tensor]:
    """
    Mean binary cross entropy and its gradient with respect to `pred`.
    Predictions are clamped to [ε, 1-ε] before taking logs.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ConfigurationError("Prediction and target shapes differ", pred=pred.shape, target=target.shape)
    if not np.all((target == 0) | (target == 1)):
        raise DataError("Binary cross entropy targets must be 0 or 1")
    p = np.clip(pred.astype(np.float64), epsilon, 1 - epsilon)
    y = target.astype(np.float64)
    batch = max(p.size, 1)
    loss = float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))
    grad = (p - y) / (p * (1 - p)) / batch
    return loss, grad.astype(pred.dtype)
