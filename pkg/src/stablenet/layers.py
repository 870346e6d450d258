"""Structural operators: ReLU, batch normalization, channel padding, pooling.

All functions take arrays shaped ``(..., h, w, d)`` unless noted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

__all__ = [
    "BN_EPSILON",
    "BatchNormParams",
    "relu",
    "batchnorm",
    "batchnorm_backward",
    "fold_batchnorm",
    "pad_channels",
    "pad_channels_adjoint",
    "pool2",
    "pool2_adjoint",
    "pool_global",
    "pool_global_adjoint",
]

# Guard for zero-variance batches; not part of the original definition.
BN_EPSILON = 1e-5


def relu(x):
    """``max(x, 0)``: the projection onto the nonnegative orthant."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


@dataclass
class BatchNormParams:
    """Per-channel scale/shift plus the statistics used in eval mode."""

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray = None
    sigma: np.ndarray = None
    epsilon: float = BN_EPSILON
    trainable: bool = field(default=True)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        d = self.gamma.shape[0]
        self.mu = np.zeros(d) if self.mu is None else np.asarray(self.mu, float)
        self.sigma = np.ones(d) if self.sigma is None else np.asarray(self.sigma, float)
        if np.any(self.sigma < self.epsilon):
            raise ValueError("sigma must be >= epsilon")

    @classmethod
    def identity(cls, d: int, trainable: bool = True) -> "BatchNormParams":
        return cls(np.ones(d), np.zeros(d), trainable=trainable)


def batch_stats(x, epsilon: float = BN_EPSILON):
    """Per-channel mean and guarded std over every axis but the last."""
    x = np.asarray(x, dtype=np.float64)
    axes = tuple(range(x.ndim - 1))
    mu = x.mean(axis=axes)
    std = np.sqrt(((x - mu) ** 2).mean(axis=axes))
    return mu, np.maximum(std, epsilon)


def batchnorm(x, params: BatchNormParams, train_mode: bool = True):
    """``gamma * (x - mu) / sigma + beta`` per channel.

    In train mode ``mu`` and ``sigma`` come from the batch ``x`` (shape
    ``(B, h, w, d)``), pooled over batch and spatial positions; in eval mode
    the stored statistics are used.  ``sigma`` is floored at ``epsilon`` so a
    constant batch maps to ``beta``.
    """
    x = np.asarray(x, dtype=np.float64)
    if train_mode:
        if x.ndim < 2 or x.shape[0] == 0:
            raise ValueError("batch normalization in train mode needs a nonempty batch")
        mu, sigma = batch_stats(x, params.epsilon)
    else:
        mu, sigma = params.mu, params.sigma
    return params.gamma * (x - mu) / sigma + params.beta


def batchnorm_backward(x, dy, gamma, epsilon: float = BN_EPSILON):
    """Train-mode gradients ``(dx, dgamma, dbeta)`` of :func:`batchnorm`."""
    x = np.asarray(x, dtype=np.float64)
    axes = tuple(range(x.ndim - 1))
    mu = x.mean(axis=axes)
    centered = x - mu
    std = np.sqrt((centered**2).mean(axis=axes))
    clamped = std < epsilon
    sigma = np.maximum(std, epsilon)
    xhat = centered / sigma
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    g = dy * gamma
    g_mean = g.mean(axis=axes)
    gx_mean = (g * xhat).mean(axis=axes)
    # a clamped sigma does not depend on x
    gx_mean = np.where(clamped, 0.0, gx_mean)
    dx = (g - g_mean - xhat * gx_mean) / sigma
    return dx, dgamma, dbeta


def fold_batchnorm(K, b, params: BatchNormParams):
    """Fold eval-mode batch norm into the preceding convolution.

    Returns ``(K_tilde, b_tilde)`` with ``K_tilde = gamma K / sigma`` (per
    output channel) and ``b_tilde = gamma (b - mu) / sigma + beta``.
    """
    scale = params.gamma / params.sigma
    K = np.asarray(K, dtype=np.float64)
    b = np.zeros(K.shape[-1]) if b is None else np.asarray(b, dtype=np.float64)
    return K * scale, scale * (b - params.mu) + params.beta


def pad_channels(x, d2: int):
    """Zero-extend the channel axis to ``d2``, centring the input channels."""
    x = np.asarray(x, dtype=np.float64)
    d1 = x.shape[-1]
    if d2 <= d1:
        raise ShapeError(f"target depth {d2} must exceed input depth {d1}")
    lo = (d2 - d1) // 2
    out = np.zeros(x.shape[:-1] + (d2,))
    out[..., lo:lo + d1] = x
    return out


def pad_channels_adjoint(y, d1: int):
    y = np.asarray(y, dtype=np.float64)
    lo = (y.shape[-1] - d1) // 2
    return y[..., lo:lo + d1]


def pool2(x):
    """2x2 average pooling with stride 2 and zero padding.

    Edge blocks of odd-sized inputs are still divided by 4.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-3], x.shape[-2]
    widths = [(0, 0)] * x.ndim
    widths[-3] = (0, h % 2)
    widths[-2] = (0, w % 2)
    xp = np.pad(x, widths)
    H, W = xp.shape[-3] // 2, xp.shape[-2] // 2
    blocks = xp.reshape(x.shape[:-3] + (H, 2, W, 2, x.shape[-1]))
    return blocks.sum(axis=(-4, -2)) / 4.0


def pool2_adjoint(y, h: int, w: int):
    y = np.asarray(y, dtype=np.float64)
    up = np.repeat(np.repeat(y, 2, axis=-3), 2, axis=-2) / 4.0
    return up[..., :h, :w, :]


def pool_global(x):
    """Channel means: ``(..., h, w, d) -> (..., d)``."""
    return np.asarray(x, dtype=np.float64).mean(axis=(-3, -2))


def pool_global_adjoint(y, h: int, w: int):
    y = np.asarray(y, dtype=np.float64)
    return np.broadcast_to(y[..., None, None, :] / (h * w),
                           y.shape[:-1] + (h, w, y.shape[-1])).copy()
