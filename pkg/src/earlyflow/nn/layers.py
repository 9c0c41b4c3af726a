"""Forward/backward pairs for each layer of the flow classifier.

All functions operate on batched arrays: sequences are ``(B, T, C)`` and
vectors ``(B, C)``. Backward functions take the upstream gradient and return
gradients for the inputs and parameters of that layer.
"""
from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


def conv1x1_forward(x, kernel, bias):
    # kernel is stored (out, in, 1); width 1 makes the conv a per-timestep affine map
    return x @ kernel[:, :, 0].T + bias


def conv1x1_backward(x, kernel, dz, need_dx=True):
    flat_dz = dz.reshape(-1, dz.shape[-1])
    dkernel = (flat_dz.T @ x.reshape(-1, x.shape[-1]))[:, :, None]
    dbias = flat_dz.sum(axis=0)
    dx = dz @ kernel[:, :, 0] if need_dx else None
    return dx, dkernel, dbias


def relu_forward(z):
    return np.maximum(z, 0.0)


def relu_backward(z, da):
    return da * (z > 0)


def layernorm_forward(a, gain, shift, eps):
    """Normalize across the channel axis independently at every position."""
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    return xhat * gain + shift, (xhat, inv_std)


def layernorm_backward(dout, cache, gain):
    xhat, inv_std = cache
    lead = tuple(range(dout.ndim - 1))
    dgain = (dout * xhat).sum(axis=lead)
    dshift = dout.sum(axis=lead)
    dxhat = dout * gain
    da = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return da, dgain, dshift


def pool_counts(T: int) -> np.ndarray:
    """Number of real elements in each window of a width-2, stride-2 pool."""
    counts = np.full((T + 1) // 2, 2.0)
    if T % 2:
        counts[-1] = 1.0
    return counts


def avgpool2_forward(n):
    """Average pooling, window 2, stride 2, 'same' padding.

    An odd trailing element is averaged alone rather than with a zero.
    """
    B, T, C = n.shape
    if T % 2:
        n = np.concatenate([n, np.zeros((B, 1, C), dtype=n.dtype)], axis=1)
    sums = n.reshape(B, -1, 2, C).sum(axis=2)
    return sums / pool_counts(T).astype(n.dtype)[None, :, None]


def avgpool2_backward(dp, T: int):
    B, P, C = dp.shape
    scaled = dp / pool_counts(T).astype(dp.dtype)[None, :, None]
    return np.repeat(scaled, 2, axis=1)[:, :T, :]


def global_avgpool_forward(p):
    return p.mean(axis=1)


def global_avgpool_backward(dg, P: int):
    return np.broadcast_to(dg[:, None, :] / P, (dg.shape[0], P, dg.shape[1])).copy()


def dense_forward(x, w, b):
    return x @ w + b


def dense_backward(x, w, dy):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(probs, labels, weights):
    """Per-sample ``-w * log p[label]`` with the probability floored at 1e-12."""
    picked = probs[np.arange(len(labels)), labels]
    return -np.asarray(weights, dtype=probs.dtype) * np.log(np.maximum(picked, PROB_FLOOR))


def softmax_cross_entropy_backward(probs, labels, weights):
    """Gradient of the weighted loss with respect to the pre-softmax logits."""
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    return d * np.asarray(weights, dtype=probs.dtype)[:, None]
