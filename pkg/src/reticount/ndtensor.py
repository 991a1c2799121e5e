"""Dense tensor kernels with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` objects; image tensors use NCHW layout.
Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the upstream gradient plus that cache. Nothing here
holds hidden state: batch-norm running statistics come back as return values.

Fully connected layers are expressed as 1x1 convolutions over 1x1 maps, so
there is no dedicated dense layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import as_strided

Tensor = np.ndarray

DEFAULT_DTYPE = np.float32
PROB_FLOOR = 1e-12
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with a layer's geometry."""


@dataclass
class LayerParams:
    """Trainable weights of one layer, plus running statistics for batch-norm.

    For a convolution ``weights`` has shape ``(out_ch, in_ch, kH, kW)`` and
    ``bias`` has shape ``(out_ch,)``. For batch-norm ``weights``/``bias`` are
    the per-channel scale and shift.
    """

    weights: Tensor
    bias: Tensor
    running_mean: Tensor | None = None
    running_var: Tensor | None = None
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON
    num_updates: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if self.running_var is not None and np.any(self.running_var < 0):
            raise ValueError("running_var must be nonnegative")


def batchnorm_params(channels: int, dtype=DEFAULT_DTYPE) -> LayerParams:
    return LayerParams(
        weights=np.ones(channels, dtype=dtype),
        bias=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
    )


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass
class _ConvCache:
    cols: Tensor
    x_shape: tuple
    w: Tensor
    stride: int
    padding: int
    out_hw: tuple


def _windows(xp: Tensor, kh: int, kw: int, stride: int, ho: int, wo: int) -> Tensor:
    """Strided view of shape (N, Ho, Wo, C, kH, kW) over a padded input."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )


def conv2d_forward(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0, per_channel: bool = False):
    """Cross-correlate ``x`` (N, C, H, W) with ``w`` (O, C, kH, kW) plus bias.

    With ``per_channel`` every output channel is a separate matrix-vector
    product, so its values do not depend on which other channels the kernel
    holds. A matrix-matrix product may change its summation order with the
    channel count, which breaks bitwise comparisons between heads of
    different widths.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d input has {c} channels but kernel expects {ci} (kernel shape {w.shape})")
    if b.shape != (o,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {o} output channels")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _windows(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, c * kh * kw)
    wm = w.reshape(o, -1)
    if per_channel:
        out = np.empty((cols.shape[0], o), dtype=np.result_type(cols, w))
        for j in range(o):
            out[:, j] = cols @ wm[j]
    else:
        out = cols @ wm.T
    out += b
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), _ConvCache(cols, x.shape, w, stride, padding, (ho, wo))


def conv2d_backward(dout: Tensor, cache: _ConvCache):
    """Return ``(dx, dw, db)`` for :func:`conv2d_forward`."""
    n, c, h, wd = cache.x_shape
    o, _, kh, kw = cache.w.shape
    ho, wo = cache.out_hw
    s, p = cache.stride, cache.padding
    if dout.shape != (n, o, ho, wo):
        raise ShapeError(f"upstream gradient shape {dout.shape} != conv output {(n, o, ho, wo)}")
    dmat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dw = (dmat.T @ cache.cols).reshape(cache.w.shape)
    db = dmat.sum(axis=0)
    dcols = (dmat @ cache.w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------


@dataclass
class _PoolCache:
    argmax: Tensor
    x_shape: tuple
    window: int
    stride: int


def maxpool2d_forward(x: Tensor, window: int = 2, stride: int = 2):
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ShapeError("window and stride must be positive")
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    sn, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(n, c, ho, wo, window, window),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    ).reshape(n, c, ho, wo, window * window)
    # np.argmax returns the first maximum, i.e. row-major scan order on ties
    argmax = win.argmax(axis=-1)
    out = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]
    return out, _PoolCache(argmax, x.shape, window, stride)


def maxpool2d_backward(dout: Tensor, cache: _PoolCache) -> Tensor:
    n, c, h, w = cache.x_shape
    k, s = cache.window, cache.stride
    _, _, ho, wo = cache.argmax.shape
    dx = np.zeros(cache.x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            routed = np.where(cache.argmax == i * k + j, dout, 0)
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += routed
    return dx


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class _BNCache:
    xhat: Tensor
    inv_std: Tensor
    gamma: Tensor
    training: bool


def batchnorm2d_forward(x: Tensor, params: LayerParams, training: bool):
    """Per-channel normalization over (N, H, W).

    Returns ``(out, cache, (running_mean, running_var, num_updates))``; in
    inference mode the running statistics are returned unchanged. The moving
    average uses momentum ``min(momentum, n / (n + 1))`` after ``n`` updates,
    i.e. a cumulative mean until it reaches ``momentum``, so early running
    statistics carry no weight from their initial values.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got shape {x.shape}")
    c = x.shape[1]
    for name in ("weights", "bias", "running_mean", "running_var"):
        vec = getattr(params, name)
        if vec is None or vec.shape != (c,):
            raise ShapeError(f"batchnorm {name} must have shape ({c},), got {None if vec is None else vec.shape}")
    gamma = params.weights.reshape(1, c, 1, 1)
    beta = params.bias.reshape(1, c, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("training-mode batchnorm needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        n = params.num_updates
        m = min(params.momentum, n / (n + 1.0))
        running = (
            (m * params.running_mean + (1 - m) * mean).astype(params.running_mean.dtype),
            (m * params.running_var + (1 - m) * var).astype(params.running_var.dtype),
            n + 1,
        )
    else:
        mean, var = params.running_mean, params.running_var
        running = (params.running_mean, params.running_var, params.num_updates)
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma * xhat + beta
    return out.astype(x.dtype, copy=False), _BNCache(xhat, inv_std, params.weights, training), running


def batchnorm2d_backward(dout: Tensor, cache: _BNCache):
    """Return ``(dx, dgamma, dbeta)``."""
    c = dout.shape[1]
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * cache.xhat).sum(axis=(0, 2, 3))
    g = (cache.gamma * cache.inv_std).reshape(1, c, 1, 1)
    if not cache.training:
        return dout * g, dgamma, dbeta
    count = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = g * (
        dout
        - dbeta.reshape(1, c, 1, 1) / count
        - cache.xhat * dgamma.reshape(1, c, 1, 1) / count
    )
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# activations and losses
# ---------------------------------------------------------------------------


def relu_forward(x: Tensor):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dout: Tensor, mask: Tensor) -> Tensor:
    return np.where(mask, dout, 0).astype(dout.dtype, copy=False)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout: Tensor, probs: Tensor, axis: int = -1) -> Tensor:
    inner = (dout * probs).sum(axis=axis, keepdims=True)
    return probs * (dout - inner)


def smooth_l1(pred: Tensor, target: Tensor):
    """Summed smooth-L1 loss and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    d = pred - target
    ad = np.abs(d)
    small = ad < 1.0
    value = np.where(small, 0.5 * d * d, ad - 0.5).sum()
    grad = np.where(small, d, np.sign(d))
    return float(value), grad


def cross_entropy(probs: Tensor, target: Tensor, axis: int = -1):
    """``-log p[target]`` per position, floored at ``PROB_FLOOR``.

    Returns ``(losses, grad)`` where ``grad`` is w.r.t. ``probs``.
    """
    target = np.asarray(target)
    idx = np.expand_dims(target, axis)
    if np.any(target < 0) or np.any(target >= probs.shape[axis]):
        raise ShapeError("cross_entropy target index out of range")
    p = np.take_along_axis(probs, idx, axis=axis)
    clamped = np.maximum(p, PROB_FLOOR)
    losses = -np.log(clamped)
    grad = np.zeros_like(probs)
    np.put_along_axis(grad, idx, np.where(p > PROB_FLOOR, -1.0 / clamped, 0.0), axis=axis)
    return np.squeeze(losses, axis), grad


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target: Tensor, axis: int = -1):
    """Fused softmax + cross-entropy; gradient w.r.t. logits is ``p - onehot``."""
    target = np.asarray(target)
    idx = np.expand_dims(target, axis)
    logp = log_softmax(logits, axis)
    losses = -np.take_along_axis(logp, idx, axis=axis)
    losses = np.minimum(losses, -np.log(PROB_FLOOR))
    grad = np.exp(logp)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=axis) - 1.0, axis=axis)
    return np.squeeze(losses, axis), grad


def global_avgpool_forward(x: Tensor):
    return x.mean(axis=(2, 3)), x.shape


def global_avgpool_backward(dout: Tensor, x_shape: tuple) -> Tensor:
    n, c, h, w = x_shape
    return np.broadcast_to(dout.reshape(n, c, 1, 1) / (h * w), x_shape).astype(dout.dtype)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_gradient(f: Callable[..., float], inputs: Mapping[str, Tensor], name: str, eps: float) -> Tensor:
    """Central-difference gradient of scalar ``f(**inputs)`` w.r.t. ``inputs[name]``."""
    work = {k: np.array(v, copy=True) for k, v in inputs.items()}
    x = work[name]
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(**work)
        flat[i] = orig - eps
        fm = f(**work)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def finite_difference_check(
    f: Callable[..., float],
    inputs: Mapping[str, Tensor],
    analytic: Mapping[str, Tensor],
    eps: float = 1e-4,
) -> float:
    """Max relative error between ``analytic`` gradients and central differences.

    ``f`` must be deterministic and scalar valued; it is called with the
    (perturbed) inputs as keyword arguments. Only names present in
    ``analytic`` are checked. The default step suits float64 inputs of
    order one; float32 closures need a much larger step and looser bounds.
    """
    worst = 0.0
    for name, grad in analytic.items():
        num = numeric_gradient(f, inputs, name, eps)
        worst = max(worst, relative_error(grad, num))
    return worst


def he_uniform(rng: np.random.Generator, shape: tuple, dtype=DEFAULT_DTYPE) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def all_finite(*arrays: Tensor) -> bool:
    return all(np.isfinite(a).all() for a in arrays)


__all__ = [
    "Tensor",
    "LayerParams",
    "ShapeError",
    "batchnorm_params",
    "conv_output_size",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "batchnorm2d_forward",
    "batchnorm2d_backward",
    "relu_forward",
    "relu_backward",
    "softmax",
    "softmax_backward",
    "smooth_l1",
    "cross_entropy",
    "softmax_cross_entropy",
    "log_softmax",
    "global_avgpool_forward",
    "global_avgpool_backward",
    "relative_error",
    "numeric_gradient",
    "finite_difference_check",
    "he_uniform",
    "all_finite",
]
