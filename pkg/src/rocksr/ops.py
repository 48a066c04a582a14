"""Layer primitives with hand-written backward passes.

Every function works on NCHW ndarrays and keeps the dtype of its inputs, so
the same code runs in float64 (gradient checks) and float32 (training).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    DegenerateFilterError,
    DimensionError,
    UninitializedStatisticsError,
    check_4d,
    check_axis,
)

ACTIVATIONS = ("relu", "lrelu", "prelu")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

@dataclass
class ConvParams:
    """Filters ``(n_f, in_channels, k_y, k_x)``, per-filter bias and padding.

    ``padding`` is ``(top, bottom, left, right)``; ``None`` means "same"
    zero padding, ``(k - 1) // 2`` on every side. Stride is always 1.
    """

    weight: np.ndarray
    bias: np.ndarray
    padding: tuple | None = None

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise DimensionError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        n_f, _, ky, kx = self.weight.shape
        if ky % 2 == 0 or kx % 2 == 0:
            raise DimensionError(f"kernel size must be odd, got {ky}x{kx}")
        if self.bias.shape != (n_f,):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {n_f} filters",
                expected=(n_f,), got=self.bias.shape,
            )
        if self.padding is None:
            self.padding = ((ky - 1) // 2, (ky - 1) // 2, (kx - 1) // 2, (kx - 1) // 2)
        elif isinstance(self.padding, int):
            p = self.padding
            self.padding = (p, p, p, p)
        else:
            self.padding = tuple(int(p) for p in self.padding)

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]


def _pad_nhwc(x, padding):
    """Zero-pad spatially, returning channels-last memory ``(B, Hp, Wp, C)``."""
    top, bottom, left, right = padding
    b, c, h, w = x.shape
    xl = x.transpose(0, 2, 3, 1)
    if top == bottom == left == right == 0:
        return xl
    xp = np.zeros((b, h + top + bottom, w + left + right, c), dtype=x.dtype)
    xp[:, top:top + h, left:left + w, :] = xl
    return xp


def _check_conv_input(x, params):
    x = check_4d(x)
    check_axis(x, 1, params.in_channels)
    _, _, h, w = x.shape
    top, bottom, left, right = params.padding
    _, _, ky, kx = params.weight.shape
    if h + top + bottom < ky:
        raise DimensionError(f"height {h} too small for kernel {ky}", axis="height")
    if w + left + right < kx:
        raise DimensionError(f"width {w} too small for kernel {kx}", axis="width")
    return x


# The padded input is viewed as one long (B*Hp*Wp, C) matrix. For kernel tap
# (i, j) the rows needed by every output pixel form the contiguous slice
# starting at i*Wp + j, so each tap is a single matmul on a view. Rows that
# straddle a row/batch boundary produce junk that is cropped afterwards.

def _taps(ky, kx, wp):
    return [(i, j, i * wp + j) for i in range(ky) for j in range(kx)]


def _flat_padded(x, padding):
    xp = np.ascontiguousarray(_pad_nhwc(x, padding))
    b, hp, wp, c = xp.shape
    return xp.reshape(b * hp * wp, c), (b, hp, wp)


def conv2d_forward(x, params, return_cache=False):
    """Cross-correlate ``x`` with ``params.weight`` and add the bias.

    The result is an NCHW view of channels-last memory, which the next
    convolution consumes without a layout copy. ``return_cache`` also
    returns the padded input for :func:`conv2d_backward`.
    """
    x = _check_conv_input(x, params)
    n_f, _, ky, kx = params.weight.shape
    flat, (b, hp, wp) = _flat_padded(x, params.padding)
    ho, wo = hp - ky + 1, wp - kx + 1
    span = b * hp * wp - (ky - 1) * wp - (kx - 1)
    wt = np.ascontiguousarray(params.weight.transpose(2, 3, 1, 0))  # ky, kx, C, F
    full = np.empty((b * hp * wp, n_f), dtype=np.result_type(flat, wt))
    acc = full[:span]
    taps = _taps(ky, kx, wp)
    if len(taps) > 1 and flat.shape[1] * len(taps) <= 64:
        # thin inputs (e.g. the 1-channel image): one matmul over gathered taps
        cols = np.concatenate([flat[off:off + span] for _, _, off in taps], axis=1)
        np.matmul(cols, wt.reshape(-1, n_f), out=acc)
    else:
        scratch = np.empty_like(acc) if len(taps) > 1 else None
        for n, (i, j, off) in enumerate(taps):
            if n == 0:
                np.matmul(flat[off:off + span], wt[i, j], out=acc)
            else:
                np.matmul(flat[off:off + span], wt[i, j], out=scratch)
                acc += scratch
    out = full.reshape(b, hp, wp, n_f)[:, :ho, :wo, :]
    if ky > 1 or kx > 1:
        out = np.ascontiguousarray(out)
    out += params.bias
    out = out.transpose(0, 3, 1, 2)
    if return_cache:
        return out, flat
    return out


def conv2d_backward(dout, x, params, cache=None):
    """Gradients ``(dx, dweight, dbias)`` of a convolution.

    ``cache`` may be the padded input returned by :func:`conv2d_forward`.
    """
    x = _check_conv_input(x, params)
    b, c, h, w = x.shape
    n_f, _, ky, kx = params.weight.shape
    top, bottom, left, right = params.padding
    hp, wp = h + top + bottom, w + left + right
    ho, wo = hp - ky + 1, wp - kx + 1
    dout = check_4d(dout, "output_grad")
    if dout.shape != (b, n_f, ho, wo):
        raise DimensionError(
            f"output_grad shape {dout.shape} != forward output shape {(b, n_f, ho, wo)}",
            expected=(b, n_f, ho, wo), got=dout.shape,
        )
    flat = _flat_padded(x, params.padding)[0] if cache is None else cache
    span = b * hp * wp - (ky - 1) * wp - (kx - 1)
    dl = dout.transpose(0, 2, 3, 1)
    dbias = dl.sum(axis=(0, 1, 2))
    if ky == 1 and kx == 1 and top == bottom == left == right == 0:
        dflat = dl.reshape(-1, n_f)
    else:
        dfull = np.zeros((b, hp, wp, n_f), dtype=dout.dtype)
        dfull[:, :ho, :wo, :] = dl
        dflat = dfull.reshape(-1, n_f)[:span]
    wt = np.ascontiguousarray(params.weight.transpose(2, 3, 0, 1))  # ky, kx, F, C
    dweight = np.empty((ky, kx, c, n_f), dtype=np.result_type(flat, dflat))
    dxflat = np.zeros((b * hp * wp, c), dtype=np.result_type(dflat, wt))
    scratch = np.empty((span, c), dtype=dxflat.dtype)
    for i, j, off in _taps(ky, kx, wp):
        np.matmul(flat[off:off + span].T, dflat, out=dweight[i, j])
        np.matmul(dflat, wt[i, j], out=scratch)
        dxflat[off:off + span] += scratch
    dweight = dweight.transpose(3, 2, 0, 1)
    dx = dxflat.reshape(b, hp, wp, c)[:, top:top + h, left:left + w, :].transpose(0, 3, 1, 2)
    return dx, dweight, dbias


def conv2d_reference(x, weight, bias, padding):
    """Direct nested-loop convolution; slow, for verification only."""
    top, bottom, left, right = padding
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    b, c, hp, wp = xp.shape
    n_f, _, ky, kx = weight.shape
    ho, wo = hp - ky + 1, wp - kx + 1
    out = np.zeros((b, n_f, ho, wo))
    for n in range(b):
        for f in range(n_f):
            for yo in range(ho):
                for xo in range(wo):
                    acc = bias[f]
                    for ch in range(c):
                        for i in range(ky):
                            for j in range(kx):
                                acc += xp[n, ch, yo + i, xo + j] * weight[f, ch, i, j]
                    out[n, f, yo, xo] = acc
    return out


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

@dataclass
class ActivationSpec:
    """``max(0, y) - alpha * max(0, -y)``.

    ``alpha`` is 0 for ReLU, a constant for LReLU and a per-channel learnable
    array for PReLU.
    """

    kind: str = "relu"
    alpha: float | np.ndarray = 0.0

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")
        if self.kind == "relu":
            self.alpha = 0.0


def _alpha_view(alpha, x):
    alpha = np.asarray(alpha, dtype=x.dtype)
    if alpha.ndim == 0:
        return alpha
    check_axis(x, 1, alpha.shape[0])
    return alpha.reshape(1, -1, 1, 1)


def activation_forward(x, spec):
    if spec.kind == "relu":
        return np.maximum(x, 0)
    a = _alpha_view(spec.alpha, x)
    return np.maximum(x, 0) + a * np.minimum(x, 0)


def activation_backward(dout, x, spec):
    """Returns ``(dx, dalpha)``; ``dalpha`` is None unless PReLU."""
    if spec.kind == "relu":
        return dout * (x > 0), None
    a = _alpha_view(spec.alpha, x)
    dx = np.where(x > 0, dout, dout * a)
    if spec.kind != "prelu":
        return dx, None
    dalpha = (dout * np.minimum(x, 0)).sum(axis=(0, 2, 3))
    if np.ndim(spec.alpha) == 0:
        dalpha = dalpha.sum()
    return dx, dalpha


# --------------------------------------------------------------------------
# batch normalisation
# --------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Learned scale/shift plus running statistics for one BN layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    initialized: bool = False
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, dtype=np.float64, **kw):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )


def batch_norm(x, state, training=True):
    """Per-channel standardisation followed by ``gamma * xhat + beta``.

    Returns ``(y, cache)``; ``cache`` feeds :func:`batch_norm_backward`.
    Training mode updates the running statistics in place.
    """
    x = check_4d(x)
    check_axis(x, 1, state.gamma.shape[0])
    shape = (1, -1, 1, 1)
    if training:
        b, _, h, w = x.shape
        n = b * h * w
        if n < 2:
            raise DimensionError(f"batch norm needs at least 2 values per channel, got {n}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        if state.initialized:
            state.running_mean[...] = m * state.running_mean + (1 - m) * mean
            state.running_var[...] = m * state.running_var + (1 - m) * var * n / (n - 1)
        else:
            state.running_mean[...] = mean
            state.running_var[...] = var * n / (n - 1)
            state.initialized = True
    else:
        if not state.initialized:
            raise UninitializedStatisticsError(
                "batch norm has no running statistics; train the model before inference"
            )
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = xhat * state.gamma.reshape(shape) + state.beta.reshape(shape)
    return y, (xhat, inv_std, training)


def batch_norm_backward(dout, cache, state):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, training = cache
    shape = (1, -1, 1, 1)
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * state.gamma.reshape(shape)
    if not training:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    b, _, h, w = dout.shape
    n = b * h * w
    sum_d = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
    sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
    dx = (inv_std.reshape(shape) / n) * (n * dxhat - sum_d - xhat * sum_dx)
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# sub-pixel shuffle
# --------------------------------------------------------------------------

def depth_to_space(x, n):
    """``(B, C*n*n, H, W) -> (B, C, n*H, n*W)``.

    ``out[b, c, n*y + dy, n*x + dx] = in[b, c*n*n + dy*n + dx, y, x]``.
    """
    x = check_4d(x)
    b, c, h, w = x.shape
    if c % (n * n):
        raise DimensionError(
            f"channel count {c} is not divisible by scale^2 = {n * n}",
            axis="channels", expected=f"multiple of {n * n}", got=c,
        )
    c_out = c // (n * n)
    return (x.reshape(b, c_out, n, n, h, w)
             .transpose(0, 1, 4, 2, 5, 3)
             .reshape(b, c_out, h * n, w * n))


def space_to_depth(x, n):
    """Exact inverse of :func:`depth_to_space`."""
    x = check_4d(x)
    b, c, h, w = x.shape
    if h % n or w % n:
        raise DimensionError(f"spatial size {h}x{w} is not divisible by {n}")
    return (x.reshape(b, c, h // n, n, w // n, n)
             .transpose(0, 1, 3, 5, 2, 4)
             .reshape(b, c * n * n, h // n, w // n))


# --------------------------------------------------------------------------
# weight normalisation
# --------------------------------------------------------------------------

def _filter_norms(v):
    norms = np.sqrt((v.reshape(v.shape[0], -1) ** 2).sum(axis=1))
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise DegenerateFilterError(f"filters {bad.tolist()} have zero-norm direction vectors")
    return norms


def weight_norm_materialize(g, v):
    """``w = g * v / ||v||`` with one magnitude ``g`` per output filter."""
    norms = _filter_norms(v)
    return v * (g / norms).reshape(-1, *([1] * (v.ndim - 1)))


def weight_norm_backward(dw, g, v):
    """Returns ``(dg, dv)`` given the gradient of the materialised weight."""
    norms = _filter_norms(v)
    shape = (-1, *([1] * (v.ndim - 1)))
    dg = (dw * v).reshape(v.shape[0], -1).sum(axis=1) / norms
    dv = (g / norms).reshape(shape) * (dw - (dg / norms).reshape(shape) * v)
    return dg, dv
