"""Functional layers with hand-written backward passes.

Tensors are laid out (batch, time, channels). Every ``*_forward`` returns
its output and a cache consumed by the matching ``*_backward``.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def conv_out_len(t: int, context: int, dilation: int = 1, stride: int = 1) -> int:
    span = dilation * (context - 1) + 1
    if t < span:
        return 0
    return (t - span) // stride + 1


def _taps(x, context, dilation, stride, t_out):
    return [x[:, j * dilation: j * dilation + (t_out - 1) * stride + 1: stride, :] for j in range(context)]


def conv_forward(x, weight, bias, dilation=1, stride=1):
    """Temporal convolution; ``weight`` is (context, in_dim, out_dim)."""
    context, in_dim, out_dim = weight.shape
    if x.ndim != 3 or x.shape[2] != in_dim:
        raise ShapeError(f"conv expects (B, T, {in_dim}) input, got {x.shape}")
    t_out = conv_out_len(x.shape[1], context, dilation, stride)
    if t_out <= 0:
        raise ShapeError(f"{x.shape[1]} frames cannot cover a context of {context} (dilation {dilation})")
    cols = np.concatenate(_taps(x, context, dilation, stride, t_out), axis=2)
    y = cols @ weight.reshape(context * in_dim, out_dim) + bias
    return y, (x.shape, cols, weight, dilation, stride)


def conv_backward(dy, cache):
    x_shape, cols, weight, dilation, stride = cache
    context, in_dim, out_dim = weight.shape
    flat_w = weight.reshape(context * in_dim, out_dim)
    dw = np.tensordot(cols, dy, axes=([0, 1], [0, 1])).reshape(weight.shape)
    db = dy.sum(axis=(0, 1))
    dcols = dy @ flat_w.T
    dx = np.zeros(x_shape, dtype=dy.dtype)
    t_out = dy.shape[1]
    for j, tap in enumerate(_taps(dx, context, dilation, stride, t_out)):
        tap += dcols[:, :, j * in_dim:(j + 1) * in_dim]
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, *, train, eps=1e-5, momentum=0.1):
    """Per-channel normalization over batch and time.

    In training mode the running statistics are updated in place (the
    variance with the unbiased estimate).
    """
    if train:
        flat = x.reshape(-1, x.shape[-1])
        n = flat.shape[0]
        if n < 2:
            raise ShapeError("batch norm needs at least two values per channel in training mode")
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma = cache
    d = dy.shape[-1]
    dyf = dy.reshape(-1, d)
    xf = xhat.reshape(-1, d)
    n = dyf.shape[0]
    dgamma = (dyf * xf).sum(axis=0)
    dbeta = dyf.sum(axis=0)
    dxhat = dyf * gamma
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xf * (dxhat * xf).sum(axis=0))
    return dx.reshape(dy.shape), dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def softmax(z, axis=-1):
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean frame-level cross-entropy.

    ``logits`` is (B, T, C); ``labels`` holds one class per sequence and is
    broadcast over its frames. Returns ``(loss, dlogits)``.
    """
    b, t, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, labels[:, None, None].repeat(t, axis=1), axis=2)
    loss = -picked.mean()
    grad = np.exp(logp)
    grad[np.arange(b), :, labels] -= 1.0
    grad /= b * t
    return float(loss), grad
