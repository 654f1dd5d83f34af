"""Forward and backward kernels for every layer type the networks use:
dense and convolutional preactivations, the piecewise-linear activation
family (ReLU, LReLU, PReLU, maxout), batch normalisation, dropout,
pooling, and softmax cross-entropy.

Every forward returns a cache consumed by the paired backward; analytic
gradients are held to the finite-difference oracle in the tests.

Lane layout convention: a unit with k lanes owns k consecutive feature
rows, so dense feature index = unit * k + lane, and convolutional
channel index = channel_unit * k + lane. Reshaping to (..., units, k)
therefore groups lanes correctly without any copying.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, DomainError, StateError
from .numerics import SeededRng

__all__ = [
    "LinearParams",
    "ConvParams",
    "ActivationSpec",
    "BatchNormState",
    "DropoutSpec",
    "PoolSpec",
    "linear_forward",
    "linear_backward",
    "conv2d_forward",
    "conv2d_backward",
    "activation_forward",
    "activation_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "dropout_forward",
    "dropout_backward",
    "pool_forward",
    "pool_backward",
    "softmax_xent",
]

TRAIN = "train"
INFER = "infer"

_RELU_FAMILY = ("relu", "lrelu", "prelu")
_KINDS = _RELU_FAMILY + ("maxout",)


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise DomainError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")


# ---------------------------------------------------------------------------
# dense preactivation


@dataclass
class LinearParams:
    """Dense preactivation f = x W^T + b.

    W has one row per preactivation feature (units * k rows), so a
    maxout unit's k lanes are k consecutive rows.
    """

    W: np.ndarray  # (out*k, in)
    b: np.ndarray  # (out*k,)

    @classmethod
    def zeros(cls, out_features: int, in_features: int) -> "LinearParams":
        return cls(
            W=np.zeros((out_features, in_features)),
            b=np.zeros(out_features),
        )


def linear_forward(x: np.ndarray, p: LinearParams):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"linear input must be batch x in, got shape {x.shape}")
    if x.shape[1] != p.W.shape[1]:
        raise DimensionError(
            f"linear input width {x.shape[1]} does not match W {p.W.shape}"
        )
    y = x @ p.W.T + p.b
    return y, (x, p)


def linear_backward(dy: np.ndarray, cache):
    x, p = cache
    dx = dy @ p.W
    dW = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dW, db


# ---------------------------------------------------------------------------
# convolutional preactivation (cross-correlation, zero padding)


@dataclass
class ConvParams:
    """Convolution kernels with one output channel per preactivation
    feature (channel units * k channels)."""

    kernels: np.ndarray  # (out*k, in, kh, kw)
    bias: np.ndarray  # (out*k,)
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"conv stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ConfigError(f"conv pad must be >= 0, got {self.pad}")

    @classmethod
    def zeros(cls, out_ch, in_ch, kh, kw, stride=1, pad=0) -> "ConvParams":
        return cls(
            kernels=np.zeros((out_ch, in_ch, kh, kw)),
            bias=np.zeros(out_ch),
            stride=stride,
            pad=pad,
        )


def _conv_out_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    span = extent + 2 * pad - kernel
    if span < 0:
        raise DimensionError(
            f"kernel {kernel} exceeds padded extent {extent + 2 * pad}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = _conv_out_extent(h, kh, stride, pad)
    wo = _conv_out_extent(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, c, ho, wo, kh, kw) -> (n*ho*wo, c*kh*kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    dwin = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                dwin[:, :, :, :, i, j]
            )
    if pad == 0:
        return dxp
    return dxp[:, :, pad : pad + h, pad : pad + w]


def conv2d_forward(x: np.ndarray, p: ConvParams):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"conv input must be n,c,h,w, got shape {x.shape}")
    out_ch, in_ch, kh, kw = p.kernels.shape
    if x.shape[1] != in_ch:
        raise DimensionError(
            f"conv input channels {x.shape[1]} do not match kernels {p.kernels.shape}"
        )
    cols, ho, wo = _im2col(x, kh, kw, p.stride, p.pad)
    kmat = p.kernels.reshape(out_ch, -1)
    out = cols @ kmat.T + p.bias
    n = x.shape[0]
    y = out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2)
    return y, (x.shape, cols, p, ho, wo)


def conv2d_backward(dy: np.ndarray, cache):
    x_shape, cols, p, ho, wo = cache
    out_ch, in_ch, kh, kw = p.kernels.shape
    dy_cols = dy.transpose(0, 2, 3, 1).reshape(-1, out_ch)
    dbias = dy_cols.sum(axis=0)
    dkernels = (dy_cols.T @ cols).reshape(p.kernels.shape)
    dcols = dy_cols @ p.kernels.reshape(out_ch, -1)
    dx = _col2im(dcols, x_shape, kh, kw, p.stride, p.pad, ho, wo)
    return dx, dkernels, dbias


# ---------------------------------------------------------------------------
# piecewise-linear activations


@dataclass
class ActivationSpec:
    """One of the piecewise-linear activation kinds.

    kind: relu | lrelu | prelu | maxout
    k:    lanes per unit (1 for the ReLU family, >= 2 for maxout)
    alpha: negative-side slope; a constant for lrelu, a learnable
           per-unit array for prelu (filled in at initialisation)
    """

    kind: str
    k: int = 1
    alpha: float | np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown activation kind {self.kind!r}")
        if self.kind == "maxout":
            if self.k < 2:
                raise ConfigError("maxout needs k >= 2 lanes")
        else:
            if self.k != 1:
                raise ConfigError(f"{self.kind} is single-lane, got k={self.k}")
        if self.kind == "lrelu" and self.alpha is None:
            self.alpha = 0.01

    @property
    def regions_per_unit(self) -> int:
        """Distinct pattern values one unit can emit."""
        return 2 if self.kind in _RELU_FAMILY else self.k


def _lane_view(h: np.ndarray, k: int) -> np.ndarray:
    """Group features into (batch, units, k[, spatial...]) lanes."""
    if h.ndim == 2:
        b, f = h.shape
        if f % k:
            raise DimensionError(f"{f} features not divisible into lanes of {k}")
        return h.reshape(b, f // k, k)
    if h.ndim == 4:
        b, c, hh, ww = h.shape
        if c % k:
            raise DimensionError(f"{c} channels not divisible into lanes of {k}")
        return h.reshape(b, c // k, k, hh, ww)
    raise DimensionError(f"activation input must be rank 2 or 4, got {h.ndim}")


def _alpha_broadcast(alpha, h: np.ndarray):
    if isinstance(alpha, np.ndarray):
        if h.ndim == 2:
            return alpha[None, :]
        return alpha[None, :, None, None]
    return alpha


def activation_forward(h: np.ndarray, spec: ActivationSpec, want_pattern: bool = True):
    """Apply the activation; returns (y, pattern, cache).

    pattern holds one small integer per unit: the active region index.
    ReLU family: 1 iff h > 0 (so exactly 0 sits on the negative side,
    matching the gradient convention). Maxout: argmax lane, ties to the
    lowest index.

    want_pattern=False skips the pattern (returned as None) and yields a
    cache unfit for backward; it exists for cheap inference passes.
    """
    h = np.asarray(h, dtype=np.float64)
    if spec.kind == "maxout":
        lanes = _lane_view(h, spec.k)
        if not want_pattern:
            return lanes.max(axis=2), None, (spec, h.shape, None)
        # max() selects the same value the argmax pattern records (ties
        # go to the lowest lane either way), one pass cheaper.
        pattern = lanes.argmax(axis=2).astype(np.int16)
        y = lanes.max(axis=2)
        return y, pattern, (spec, h.shape, pattern)
    pattern = (h > 0).astype(np.int16) if want_pattern else None
    if spec.kind == "relu":
        y = np.where(h > 0, h, 0.0)
        return y, pattern, (spec, h, pattern)
    alpha = _alpha_broadcast(spec.alpha, h)
    y = np.where(h > 0, h, alpha * h)
    return y, pattern, (spec, h, pattern)


def activation_backward(dy: np.ndarray, cache):
    """Returns (dh, dalpha); dalpha is None except for prelu."""
    spec = cache[0]
    if spec.kind == "maxout":
        _, h_shape, pattern = cache
        b = h_shape[0]
        units = pattern.shape[1]
        if len(h_shape) == 2:
            dlanes = np.zeros((b, units, spec.k))
        else:
            dlanes = np.zeros((b, units, spec.k) + h_shape[2:])
        np.put_along_axis(
            dlanes, pattern[:, :, None].astype(np.int64), dy[:, :, None], axis=2
        )
        return dlanes.reshape(h_shape), None
    _, h, pattern = cache
    pos = pattern.astype(bool)
    if spec.kind == "relu":
        return np.where(pos, dy, 0.0), None
    alpha = _alpha_broadcast(spec.alpha, h)
    dh = np.where(pos, dy, alpha * dy)
    if spec.kind == "lrelu":
        return dh, None
    # prelu: gradient w.r.t. the per-unit slope, summed over batch
    # (and spatial positions for feature maps)
    neg_contrib = np.where(pos, 0.0, dy * h)
    if h.ndim == 2:
        dalpha = neg_contrib.sum(axis=0)
    else:
        dalpha = neg_contrib.sum(axis=(0, 2, 3))
    return dh, dalpha


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    """Per-feature scale/shift plus running moments for inference.

    Train mode standardises by the current batch's mean and population
    variance, then applies gamma and beta; running moments track an
    exponential average for later inference.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise DomainError(f"epsilon must be > 0, got {self.epsilon}")
        if not (0 < self.momentum <= 1):
            raise DomainError(f"momentum must be in (0, 1], got {self.momentum}")
        if np.any(self.running_var < 0):
            raise DomainError("running_var must be elementwise nonnegative")

    @classmethod
    def identity(cls, n_features: int, epsilon: float = 1e-5, momentum: float = 0.1):
        """gamma=1, beta=0, running moments (0, 1): pure standardisation."""
        return cls(
            gamma=np.ones(n_features),
            beta=np.zeros(n_features),
            running_mean=np.zeros(n_features),
            running_var=np.ones(n_features),
            epsilon=epsilon,
            momentum=momentum,
        )


def _bn_axes(f: np.ndarray):
    if f.ndim == 2:
        return (0,), (1, -1)
    if f.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise DimensionError(f"batchnorm input must be rank 2 or 4, got {f.ndim}")


def batchnorm_forward(f: np.ndarray, s: BatchNormState, mode: str, update_running: bool = True):
    """Standardise then scale-and-shift. Train mode uses batch moments
    (per channel over batch and spatial positions for feature maps) and
    updates the running moments; infer mode uses the stored moments and
    mutates nothing."""
    _check_mode(mode)
    f = np.asarray(f, dtype=np.float64)
    axes, bshape = _bn_axes(f)
    if f.shape[1] != s.gamma.shape[0]:
        raise DimensionError(
            f"batchnorm feature count {f.shape[1]} does not match gamma {s.gamma.shape}"
        )
    gamma = s.gamma.reshape(bshape)
    beta = s.beta.reshape(bshape)
    if mode == TRAIN:
        if f.shape[0] < 2:
            raise DomainError("train-mode batchnorm needs batch size >= 2")
        mean = f.mean(axis=axes)
        var = f.var(axis=axes)
        if update_running:
            m = s.momentum
            s.running_mean = (1.0 - m) * s.running_mean + m * mean
            s.running_var = (1.0 - m) * s.running_var + m * var
    else:
        mean = s.running_mean
        var = s.running_var
    inv_std = 1.0 / np.sqrt(var.reshape(bshape) + s.epsilon)
    x_hat = (f - mean.reshape(bshape)) * inv_std
    h = gamma * x_hat + beta
    count = f.size // f.shape[1]
    cache = (s, mode, x_hat, inv_std, axes, count)
    return h, cache


def batchnorm_backward(dy: np.ndarray, cache):
    s, mode, x_hat, inv_std, axes, count = cache
    _, bshape = _bn_axes(dy)
    gamma = s.gamma.reshape(bshape)
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * x_hat).sum(axis=axes)
    if mode == INFER:
        # running moments are constants, so this is a plain affine map
        return dy * gamma * inv_std, dgamma, dbeta
    df = (gamma * inv_std / count) * (
        count * dy - dbeta.reshape(bshape) - x_hat * dgamma.reshape(bshape)
    )
    return df, dgamma, dbeta


# ---------------------------------------------------------------------------
# dropout


@dataclass
class DropoutSpec:
    p: float = 0.5

    def __post_init__(self):
        if not (0 <= self.p < 1):
            raise ConfigError(f"dropout p must be in [0, 1), got {self.p}")


def dropout_forward(x: np.ndarray, spec: DropoutSpec, mode: str, rng: SeededRng | None = None):
    """Inverted dropout: train mode zeroes units with probability p and
    scales survivors by 1/(1-p); inference is exactly the identity."""
    _check_mode(mode)
    if mode == INFER or spec.p == 0:
        return x, (spec, None)
    if rng is None:
        raise StateError("train-mode dropout with p > 0 needs an rng")
    mask = rng.random(x.shape) >= spec.p
    y = x * mask / (1.0 - spec.p)
    return y, (spec, mask)


def dropout_backward(dy: np.ndarray, cache):
    spec, mask = cache
    if mask is None:
        return dy
    return dy * mask / (1.0 - spec.p)


# ---------------------------------------------------------------------------
# pooling


@dataclass
class PoolSpec:
    kind: str  # "max" | "avg"
    window: int
    stride: int
    pad: int = 0

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ConfigError(f"pool kind must be max or avg, got {self.kind!r}")
        if self.window < 1 or self.stride < 1 or self.pad < 0:
            raise ConfigError(
                f"bad pool geometry: window {self.window}, stride {self.stride}, pad {self.pad}"
            )


def pool_forward(
    x: np.ndarray, kind: str, window: int, stride: int, pad: int = 0, need_grad: bool = True
):
    """need_grad=False skips the max-routing bookkeeping; the cache it
    returns cannot drive pool_backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"pool input must be n,c,h,w, got shape {x.shape}")
    n, c, h, w = x.shape
    ho = _conv_out_extent(h, window, stride, pad)
    wo = _conv_out_extent(w, window, stride, pad)
    if kind == "max":
        fill = -np.inf
    elif kind == "avg":
        fill = 0.0
    else:
        raise ConfigError(f"pool kind must be max or avg, got {kind!r}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    if kind == "max":
        if not need_grad:
            return flat.max(axis=-1), (kind, x.shape, window, stride, pad, ho, wo, None)
        arg = flat.argmax(axis=-1)
        y = flat.max(axis=-1)
        cache = (kind, x.shape, window, stride, pad, ho, wo, arg)
    else:
        y = flat.mean(axis=-1)
        cache = (kind, x.shape, window, stride, pad, ho, wo, None)
    return y, cache


def pool_backward(dy: np.ndarray, cache):
    kind, x_shape, window, stride, pad, ho, wo, arg = cache
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    if kind == "avg":
        share = dy / float(window * window)
        for i in range(window):
            for j in range(window):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
    else:
        for i in range(window):
            for j in range(window):
                hit = arg == (i * window + j)
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    dy * hit
                )
    if pad == 0:
        return dxp
    return dxp[:, :, pad : pad + h, pad : pad + w]


# ---------------------------------------------------------------------------
# softmax cross-entropy head


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient
    (softmax - onehot) / batch."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be batch x classes, got {logits.shape}")
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(
            f"labels shape {labels.shape} does not match batch {n}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(-np.log(probs[rows, labels]).mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad
