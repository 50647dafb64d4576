"""Dense H x W x C x T tensors and the primitive layers with hand-written backward passes.

Every activation is a numpy array laid out as (rows, cols, channels, batch).
Forward functions ending in ``_forward`` return ``(output, cache)``; the
matching ``_backward`` consumes the cache and an upstream gradient.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, LabelError

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported compute dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def compute_dtype(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def tensor4(data, dtype=None):
    """Validate (and copy if needed) ``data`` as an H x W x C x T array."""
    arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
    if arr.ndim != 4:
        raise DimensionError(f"expected a 4-way tensor (H, W, C, T), got {arr.ndim} dims")
    for name, size in zip("HWCT", arr.shape):
        if size < 1:
            raise DimensionError(f"axis {name} must be >= 1, got {size}", axis=name)
    return np.ascontiguousarray(arr)


def zeros4(h, w, c, t, dtype=None):
    return np.zeros((h, w, c, t), dtype=dtype or _DEFAULT_DTYPE)


@dataclass
class GradPair:
    """A parameter value with its gradient buffer of identical shape."""

    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0


# --------------------------------------------------------------------------- conv


def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"non-integral conv output: ({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _im2col(x, k, stride, pad, ho, wo):
    """Patch tensor (Ho*Wo, K*K*C, T): batch stays the innermost axis."""
    h, w, c, t = x.shape
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0), (0, 0)))
    cols = np.empty((ho, wo, k, k, c, t), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(ho * wo, k * k * c, t)


def conv2d_forward(x, weights, bias, stride=1, pad=0):
    """Cross-correlation of ``x`` (H,W,Cin,T) with a K x K x Cin x Cout filter bank."""
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"invalid stride={stride} / pad={pad}")
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
        raise DimensionError(f"filter bank must be K x K x Cin x Cout, got {weights.shape}", axis="K")
    k, _, cin, cout = weights.shape
    h, w, c, t = x.shape
    if c != cin:
        raise DimensionError(f"channel mismatch: input C={c}, filter Cin={cin}", axis="C")
    if bias.shape != (cout,):
        raise DimensionError(f"bias length {bias.shape} != Cout={cout}", axis="Cout")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    cols = _im2col(x, k, stride, pad, ho, wo)
    wt = weights.reshape(k * k * cin, cout).T
    y = np.matmul(wt, cols).reshape(ho, wo, cout, t)
    if bias.any():
        y += bias[:, None]
    return y, (x.shape, cols, weights, stride, pad)


def conv2d_backward(cache, upstream):
    """Return ``(dx, dweights, dbias)`` for an upstream gradient of the conv output."""
    (h, w, c, t), cols, weights, stride, pad = cache
    k, _, cin, cout = weights.shape
    ho, wo = upstream.shape[0], upstream.shape[1]
    if upstream.shape != (ho, wo, cout, t):
        raise DimensionError(f"upstream shape {upstream.shape} does not match conv output", axis="C")
    g = upstream.reshape(ho * wo, cout, t)
    dweights = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).T.reshape(k, k, cin, cout)
    dbias = g.sum(axis=(0, 2))
    dcols = np.matmul(weights.reshape(k * k * cin, cout), g).reshape(ho, wo, k, k, cin, t)
    dxp = np.zeros((h + 2 * pad, w + 2 * pad, cin, t), dtype=upstream.dtype)
    for i in range(k):
        for j in range(k):
            dxp[i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if pad:
        dxp = np.ascontiguousarray(dxp[pad:pad + h, pad:pad + w])
    return dxp, dweights, dbias


def conv2d(x, weights, bias, stride=1, pad=0):
    return conv2d_forward(x, weights, bias, stride, pad)[0]


# --------------------------------------------------------------------------- linear


def linear_forward(x, weights, bias):
    """Affine map of each flattened instance; ``weights`` is (K, features)."""
    h, w, c, t = x.shape
    feats = h * w * c
    if weights.ndim != 2 or weights.shape[1] != feats:
        raise DimensionError(
            f"linear expects {weights.shape[-1] if weights.ndim == 2 else '?'} input features, got {feats}",
            axis="features",
        )
    k = weights.shape[0]
    if bias.shape != (k,):
        raise DimensionError(f"bias length {bias.shape} != K={k}", axis="K")
    flat = x.reshape(feats, t)
    out = weights @ flat + bias[:, None]
    return out.reshape(1, 1, k, t), (x.shape, flat, weights)


def linear_backward(cache, upstream):
    shape, flat, weights = cache
    g = upstream.reshape(weights.shape[0], shape[3])
    dweights = g @ flat.T
    dbias = g.sum(axis=1)
    dx = (weights.T @ g).reshape(shape)
    return dx, dweights, dbias


def linear(x, weights, bias):
    return linear_forward(x, weights, bias)[0]


# --------------------------------------------------------------------------- relu / pooling


def relu_forward(x):
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(mask, upstream):
    return upstream * mask


def relu(x):
    return relu_forward(x)[0]


def global_avg_pool_forward(x):
    return x.mean(axis=(0, 1), keepdims=True, dtype=x.dtype), x.shape


def global_avg_pool_backward(shape, upstream):
    h, w = shape[0], shape[1]
    return np.broadcast_to(upstream / (h * w), shape).copy()


def global_avg_pool(x):
    return global_avg_pool_forward(x)[0]


def avg_pool2_forward(x):
    """2 x 2 average pooling with stride 2 (used for downsampling)."""
    h, w, c, t = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"2x2 pooling needs even spatial dims, got {h}x{w}")
    y = x.reshape(h // 2, 2, w // 2, 2, c, t).mean(axis=(1, 3), dtype=x.dtype)
    return y, x.shape


def avg_pool2_backward(shape, upstream):
    g = np.repeat(np.repeat(upstream * upstream.dtype.type(0.25), 2, axis=0), 2, axis=1)
    return g.reshape(shape)


# --------------------------------------------------------------------------- loss


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood over the batch and its gradient w.r.t. ``logits``."""
    if logits.shape[0] != 1 or logits.shape[1] != 1:
        raise DimensionError(f"logits must be 1 x 1 x K x T, got {logits.shape}", axis="H")
    k, t = logits.shape[2], logits.shape[3]
    labels = np.asarray(labels)
    if labels.shape != (t,):
        raise DimensionError(f"expected {t} labels, got shape {labels.shape}", axis="T")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels[i])} at index {i} outside [0, {k})", index=i)
    z = logits.reshape(k, t)
    z = z - z.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=0))
    cols = np.arange(t)
    loss = float(np.mean(logsum - z[labels, cols]))
    prob = np.exp(z - logsum)
    prob[labels, cols] -= 1
    grad = (prob / t).astype(logits.dtype, copy=False).reshape(logits.shape)
    return loss, grad
