"""Differentiable dense-tensor operations with exact analytic backward passes.

There is no autodiff tape: every op returns ``(output, backward)`` where
``backward(upstream)`` accumulates gradients into the grads of its inputs.
Composite models chain the backward callables by hand in reverse order.
All math runs in float64.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Operand shapes are inconsistent with the operation."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared in a forward or backward result."""


class ConfigError(ValueError):
    """An operation was configured outside its valid domain."""


def _check_finite(name, arr):
    # One reduction pass; NaN and +-Inf both poison the sum.
    if not np.isfinite(np.sum(arr)):
        raise NumericError(f"non-finite values in {name}")


class Tensor:
    """Dense float64 array plus a same-shape gradient buffer.

    The gradient buffer materializes (zero-initialized) on first access, so
    forward-only passes never pay for it.
    """

    __slots__ = ("data", "_grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self._grad = None

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, v):
        self._grad = v

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Param:
    """Trainable tensor with Adam moment buffers.

    ``decay_enabled`` marks weight matrices that receive the L2 penalty;
    biases and batch-norm/attention scalars leave it off.
    """

    __slots__ = ("value", "adam_m", "adam_v", "step_count", "decay_enabled")

    def __init__(self, data, decay=False):
        self.value = data if isinstance(data, Tensor) else Tensor(data)
        self.adam_m = np.zeros_like(self.value.data)
        self.adam_v = np.zeros_like(self.value.data)
        self.step_count = 0
        self.decay_enabled = bool(decay)

    @property
    def data(self):
        return self.value.data

    @data.setter
    def data(self, v):
        self.value.data = v

    @property
    def grad(self):
        return self.value.grad

    @grad.setter
    def grad(self, v):
        self.value.grad = v


@dataclass
class OptimConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.epsilon <= 0 or self.weight_decay < 0:
            raise ConfigError("epsilon must be positive, weight_decay non-negative")


def _promote(x, nd, what):
    """Allow the single-sample shapes from the op contracts alongside batches."""
    if x.data.ndim == nd:
        return x.data, False
    if x.data.ndim == nd - 1:
        return x.data[None], True
    raise DimensionError(f"{what}: expected {nd - 1}D or {nd}D input, got {x.data.ndim}D")


def conv2d(x, kernels, bias, stride=1, pad=0, need_input_grad=True):
    """Cross-correlation of (C,H,W) or (B,C,H,W) input with square kernels.

    ``need_input_grad=False`` lets a first layer skip the input-gradient
    scatter, which nothing upstream would consume.
    """
    xd, squeezed = _promote(x, 4, "conv2d")
    c_out, c_in, k, k2 = kernels.value.shape
    if k != k2:
        raise DimensionError("conv2d: kernels must be square")
    B, C, H, W = xd.shape
    if C != c_in:
        raise DimensionError(f"conv2d: input has {C} channels, kernels expect {c_in}")
    if bias.value.shape != (c_out,):
        raise DimensionError("conv2d: bias shape must be (C_out,)")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise DimensionError("conv2d: kernel larger than padded input")
    if stride < 1:
        raise ConfigError("conv2d: stride must be >= 1")

    if pad > 0:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
        xp[:, :, pad : pad + H, pad : pad + W] = xd
    else:
        xp = xd
    w_mat = kernels.data.reshape(c_out, c_in * k * k)
    outd = _kernels.conv_forward(xp, w_mat, bias.data, k, stride)
    _check_finite("conv2d output", outd)
    out = Tensor(outd[0] if squeezed else outd)

    def backward(upstream):
        up = upstream[None] if squeezed else upstream
        up = np.ascontiguousarray(up, dtype=np.float64)
        dw, db = _kernels.conv_grad_weights(xp, up, k, stride)
        kernels.grad += dw.reshape(kernels.value.shape)
        bias.grad += db
        if need_input_grad:
            hp, wp = xp.shape[2], xp.shape[3]
            dxp = _kernels.conv_grad_input(up, w_mat, c_in, hp, wp, k, stride)
            if pad > 0:
                dxp = dxp[:, :, pad : pad + H, pad : pad + W]
            x.grad += dxp[0] if squeezed else dxp

    return out, backward


def maxpool2d(x, k, stride):
    """Per-window maximum; gradient routes to the first maximum in scan order."""
    xd, squeezed = _promote(x, 4, "maxpool2d")
    B, C, H, W = xd.shape
    if k > H or k > W:
        raise DimensionError(f"maxpool2d: window {k} exceeds input {H}x{W}")
    outd, idx = _kernels.maxpool_forward(xd, k, stride)
    _check_finite("maxpool2d output", outd)
    out = Tensor(outd[0] if squeezed else outd)

    def backward(upstream):
        up = upstream[None] if squeezed else upstream
        up = np.ascontiguousarray(up, dtype=np.float64)
        dx = _kernels.maxpool_backward(idx, up, H, W)
        x.grad += dx[0] if squeezed else dx

    return out, backward


def fully_connected(x, weights, bias):
    """Affine map (B,N) @ (M,N)^T + (M,)."""
    xd, squeezed = _promote(x, 2, "fully_connected")
    M, N = weights.value.shape
    if xd.shape[1] != N:
        raise DimensionError(f"fully_connected: input width {xd.shape[1]} != {N}")
    if bias.value.shape != (M,):
        raise DimensionError("fully_connected: bias shape must be (M,)")
    outd = xd @ weights.data.T + bias.data
    _check_finite("fully_connected output", outd)
    out = Tensor(outd[0] if squeezed else outd)

    def backward(upstream):
        up = upstream[None] if squeezed else upstream
        weights.grad += up.T @ xd
        bias.grad += up.sum(axis=0)
        x.grad += (up @ weights.data)[0] if squeezed else up @ weights.data

    return out, backward


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0))

    def backward(upstream):
        # Subgradient 0 at exactly 0; mask derived lazily so eval stays cheap.
        x.grad += upstream * (x.data > 0)

    return out, backward


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_biased(x):
    """Logistic function shifted up by 0.5; output lies in (0.5, 1.5).

    The logistic value is nudged off 0 and 1 so the open range survives
    float64 saturation at extreme inputs.
    """
    s = np.clip(_sigmoid(np.asarray(x.data, dtype=np.float64)), 1e-12, 1.0 - 1e-12)
    out = Tensor(s + 0.5)

    def backward(upstream):
        x.grad += upstream * s * (1.0 - s)

    return out, backward


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)


def batchnorm2d(x, gamma, beta, state, mode):
    """Per-channel normalization over (B,H,W); running stats follow train mode."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm2d: unknown mode {mode!r}")
    xd, squeezed = _promote(x, 4, "batchnorm2d")
    B, C, H, W = xd.shape
    if gamma.value.shape != (C,) or beta.value.shape != (C,):
        raise DimensionError("batchnorm2d: gamma/beta must have one entry per channel")
    n = B * H * W
    if mode == "train":
        if B < 2:
            raise ConfigError("batchnorm2d: train mode needs a batch of at least 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = state.momentum
        state.mean = (1 - m) * state.mean + m * mu
        state.var = (1 - m) * state.var + m * var * (n / (n - 1))
    else:
        mu = state.mean
        var = state.var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    outd = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    _check_finite("batchnorm2d output", outd)
    out = Tensor(outd[0] if squeezed else outd)

    def backward(upstream):
        up = upstream[None] if squeezed else upstream
        gamma.grad += np.sum(up * xhat, axis=(0, 2, 3))
        beta.grad += np.sum(up, axis=(0, 2, 3))
        ghat = up * gamma.data[None, :, None, None]
        if mode == "train":
            sum_g = ghat.sum(axis=(0, 2, 3), keepdims=True)
            sum_gx = (ghat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv[None, :, None, None] / n) * (n * ghat - sum_g - xhat * sum_gx)
        else:
            dx = ghat * inv[None, :, None, None]
        x.grad += dx[0] if squeezed else dx

    return out, backward


def dropout(x, p, mode, rng=None):
    """Inverted dropout; identity in eval mode and for p == 0."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: p must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout: unknown mode {mode!r}")
    if mode == "eval" or p == 0.0:
        out = Tensor(x.data.copy())

        def backward(upstream):
            x.grad += upstream

        return out, backward

    if rng is None:
        raise ConfigError("dropout: train mode needs an rng")
    scale = 1.0 / (1.0 - p)
    mask = (rng.random(x.data.shape) >= p) * scale
    out = Tensor(x.data * mask)

    def backward(upstream):
        x.grad += upstream * mask

    return out, backward


def concat_channels(xs):
    """Stack feature maps along the channel axis, in argument order."""
    if not xs:
        raise DimensionError("concat_channels: need at least one input")
    parts = []
    squeezed = None
    for x in xs:
        d, s = _promote(x, 4, "concat_channels")
        if squeezed is None:
            squeezed = s
        elif s != squeezed:
            raise DimensionError("concat_channels: mixed batched and unbatched inputs")
        parts.append(d)
    spatial = parts[0].shape[2:]
    batch = parts[0].shape[0]
    for d in parts[1:]:
        if d.shape[2:] != spatial or d.shape[0] != batch:
            raise DimensionError("concat_channels: spatial or batch dims differ")
    outd = np.concatenate(parts, axis=1)
    out = Tensor(outd[0] if squeezed else outd)
    counts = [d.shape[1] for d in parts]

    def backward(upstream):
        up = upstream[None] if squeezed else upstream
        at = 0
        for x, c in zip(xs, counts):
            piece = up[:, at : at + c]
            x.grad += piece[0] if squeezed else piece
            at += c

    return out, backward


def scale_channel(x, w):
    """Multiply one feature map by a scalar weight tensor."""
    if w.data.size != 1:
        raise DimensionError("scale_channel: weight must be a scalar")
    wv = float(w.data.reshape(()))
    out = Tensor(x.data * wv)

    def backward(upstream):
        x.grad += upstream * wv
        w.grad += np.sum(upstream * x.data).reshape(w.data.shape)

    return out, backward


def scale_channels(x, w):
    """Batched per-channel scaling: (B,C,H,W) maps times (B,C) weights."""
    xd = x.data
    wd = w.data
    if xd.ndim != 4 or wd.shape != xd.shape[:2]:
        raise DimensionError("scale_channels: need (B,C,H,W) maps and (B,C) weights")
    out = Tensor(xd * wd[:, :, None, None])

    def backward(upstream):
        x.grad += upstream * wd[:, :, None, None]
        w.grad += np.sum(upstream * xd, axis=(2, 3))

    return out, backward


def l1_loss(pred, target):
    """Mean absolute difference over every entry; returns (loss, backward)."""
    if pred.data.shape != target.data.shape:
        raise DimensionError("l1_loss: shape mismatch")
    diff = pred.data - target.data
    loss = float(np.mean(np.abs(diff)))
    if not np.isfinite(loss):
        raise NumericError("non-finite l1 loss")

    def backward(upstream=1.0):
        pred.grad += np.sign(diff) * (upstream / diff.size)

    return loss, backward


def adam_step(params, config):
    """One Adam update with bias correction; grads are zeroed afterwards.

    For ``decay_enabled`` params the L2 penalty enters as an additive gradient
    term ``weight_decay * value``.
    """
    b1, b2 = config.beta1, config.beta2
    for p in params:
        g = p.value.grad
        if p.decay_enabled and config.weight_decay != 0.0:
            g = g + config.weight_decay * p.value.data
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * (g * g)
        p.step_count += 1
        t = p.step_count
        m_hat = p.adam_m / (1.0 - b1**t)
        v_hat = p.adam_v / (1.0 - b2**t)
        p.value.data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        _check_finite("adam-updated param", p.value.data)
        p.value.grad[...] = 0.0
