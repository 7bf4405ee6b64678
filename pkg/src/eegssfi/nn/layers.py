"""Forward/backward primitives on NHWC arrays.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values after {where}")


def conv2d_forward(x, w, b):
    """3x3 cross-correlation, zero 'same' padding. w: (3, 3, C, F), b: (F,)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3):
        raise ValueError(f"expected NHWC input and (3, 3, C, F) kernels, got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ValueError(f"input has {x.shape[3]} channels, kernels expect {w.shape[2]}")
    if b.shape != (w.shape[3],):
        raise ValueError("bias must have one entry per filter")
    n, h, wd, c = x.shape
    f = w.shape[3]
    cols = kernels.im2col3x3(x)
    out = (cols @ w.reshape(9 * c, f) + b).reshape(n, h, wd, f)
    return out, (cols, x.shape, w)


def conv2d_backward(dout, cache):
    cols, xshape, w = cache
    n, h, wd, c = xshape
    f = w.shape[3]
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = d2 @ w.reshape(9 * c, f).T
    dx = kernels.col2im3x3(dcols, n, h, wd, c)
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x):
    """Non-overlapping 2x2 max; ties resolve to the first element row-major."""
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ValueError(f"max-pool needs even spatial dims, got {x.shape[1:3]}")
    out, idx = kernels.maxpool2x2_forward(x)
    return out, idx


def maxpool_backward(dout, idx):
    return kernels.maxpool2x2_backward(dout, idx)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch norm over all axes but the last.

    In train mode the running statistics are updated in place.
    """
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[-1]
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (count / (count - 1))
    elif mode == "infer":
        mu, var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = gamma * xhat + beta
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, mode)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, mode = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if mode == "infer":
        return (dxhat * inv_std).astype(dout.dtype, copy=False), dgamma, dbeta
    m = dout.size // dout.shape[-1]
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


def dropout_forward(x, rate, mode="train", rng=None):
    """Inverted dropout."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def dense_forward(x, w, b):
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense input width {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("one integer label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z - logsumexp[:, None]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1
    return float(loss), dlogits / n
