"""Dense layers with hand-written gradients.

Every array is ``float64``. Spatial layers take channels-last inputs, either a
single ``(H, W, C)`` patch or a batch ``(N, H, W, C)``; the batch axis is
carried through untouched so the same code serves gradient checks on one
patch and training on hundreds.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("conv2d", "maxpool2d", "dense", "relu", "softmax_ce")


class ShapeError(ValueError):
    """Raised when array extents disagree with a layer's declared shape."""


@dataclass
class LayerParams:
    kind: str
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.weights.ndim != 4 or self.bias.shape != (self.weights.shape[3],):
                raise ShapeError(
                    f"conv2d weights must be (kh, kw, C, F) with bias (F,), "
                    f"got {self.weights.shape} and {self.bias.shape}"
                )
        elif self.kind == "dense":
            if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
                raise ShapeError(
                    f"dense weights must be (fan_out, fan_in) with bias (fan_out,), "
                    f"got {self.weights.shape} and {self.bias.shape}"
                )
        elif self.weights.size or self.bias.size:
            raise ShapeError(f"{self.kind} layers carry no weights")

    @property
    def arrays(self):
        """Trainable arrays, weights first."""
        if self.kind in ("conv2d", "dense"):
            return [self.weights, self.bias]
        return []


def glorot_uniform(shape, fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_conv2d(kh, kw, in_channels, filters, rng):
    w = glorot_uniform((kh, kw, in_channels, filters), kh * kw * in_channels, filters, rng)
    return LayerParams("conv2d", w, np.zeros(filters))


def init_dense(fan_in, fan_out, rng):
    w = glorot_uniform((fan_out, fan_in), fan_in, fan_out, rng)
    return LayerParams("dense", w, np.zeros(fan_out))


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (H, W, C) or (N, H, W, C) input, got shape {x.shape}")


def conv2d_forward(x, params):
    """Valid, stride-1 convolution. Returns ``(H-kh+1, W-kw+1, F)`` per sample."""
    xb, single = _batched(x)
    kh, kw, c, f = params.weights.shape
    n, h, w, cin = xb.shape
    if cin != c:
        raise ShapeError(f"conv2d expects {c} input channels, got {cin}")
    if h < kh or w < kw:
        raise ShapeError(f"conv2d input {h}x{w} is smaller than kernel {kh}x{kw}")
    # windows: (N, H', W', C, kh, kw)
    windows = sliding_window_view(xb, (kh, kw), axis=(1, 2))
    out = np.einsum("nijcab,abcf->nijf", windows, params.weights, optimize=True)
    out += params.bias
    return out[0] if single else out


def conv2d_backward(x, params, upstream):
    """Returns ``([dW, db], dx)`` for :func:`conv2d_forward`."""
    xb, single = _batched(x)
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = up[None]
    kh, kw, c, f = params.weights.shape
    n, h, w, _ = xb.shape
    expected = (n, h - kh + 1, w - kw + 1, f)
    if up.shape != expected:
        raise ShapeError(f"conv2d upstream shape {up.shape} != forward output {expected}")
    oh, ow = expected[1], expected[2]
    windows = sliding_window_view(xb, (kh, kw), axis=(1, 2))
    dw = np.einsum("nijcab,nijf->abcf", windows, up, optimize=True)
    db = up.sum(axis=(0, 1, 2))
    dx = np.zeros_like(xb)
    for a in range(kh):
        for b in range(kw):
            dx[:, a:a + oh, b:b + ow, :] += up @ params.weights[a, b].T
    return [dw, db], (dx[0] if single else dx)


def maxpool2d_forward(x, pool=2):
    """Non-overlapping max pooling.

    Returns the pooled array and, per output cell, the flat index (row-major
    within the window) of the maximum. Ties go to the first maximum.
    """
    xb, single = _batched(x)
    n, h, w, c = xb.shape
    if h % pool or w % pool:
        raise ShapeError(f"maxpool2d extent {h}x{w} not divisible by pool {pool}")
    blocks = xb.reshape(n, h // pool, pool, w // pool, pool, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // pool, w // pool, c, pool * pool)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(upstream, argmax, input_shape, pool=2):
    """Routes each upstream value to the recorded argmax position."""
    up = np.asarray(upstream, dtype=np.float64)
    single = len(input_shape) == 3
    if single:
        up, argmax = up[None], argmax[None]
        input_shape = (1,) + tuple(input_shape)
    n, h, w, c = input_shape
    if up.shape != (n, h // pool, w // pool, c) or argmax.shape != up.shape:
        raise ShapeError(f"maxpool2d upstream {up.shape} does not match input {input_shape}")
    blocks = np.zeros((n, h // pool, w // pool, c, pool * pool))
    np.put_along_axis(blocks, argmax[..., None], up[..., None], axis=-1)
    blocks = blocks.reshape(n, h // pool, w // pool, c, pool, pool).transpose(0, 1, 4, 2, 5, 3)
    dx = blocks.reshape(n, h, w, c)
    return dx[0] if single else dx


def dense_forward(x, params):
    """Affine map ``W x + b`` on a vector or on rows of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    fan_in = params.weights.shape[1]
    if x.shape[-1] != fan_in or x.ndim > 2:
        raise ShapeError(f"dense expects fan-in {fan_in}, got input shape {x.shape}")
    return x @ params.weights.T + params.bias


def dense_backward(x, params, upstream):
    x = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != x.shape[:-1] + (params.weights.shape[0],):
        raise ShapeError(f"dense upstream shape {up.shape} does not match output")
    if x.ndim == 1:
        dw = np.outer(up, x)
        db = up.copy()
    else:
        dw = up.T @ x
        db = up.sum(axis=0)
    return [dw, db], up @ params.weights


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    # subgradient 0 at exactly 0
    return np.where(x > 0, upstream, 0.0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label, weights=None):
    """Two-class cross-entropy on one logit vector or a batch of them.

    For a batch the loss is the mean (or the ``weights``-weighted mean) and
    the gradient is scaled accordingly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(label)
    if logits.shape[-1] != 2:
        raise ShapeError(f"expected 2 logits, got {logits.shape[-1]}")
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError(f"labels must be 0 or 1, got {np.unique(labels)}")
    labels = labels.astype(np.intp)
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, labels.reshape(z.shape[:-1] + (1,)), axis=-1)[..., 0]
    losses = log_norm - picked
    grad = softmax(logits)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, labels.reshape(z.shape[:-1] + (1,)), 1.0, axis=-1)
    grad -= onehot
    if logits.ndim == 1:
        return float(losses), grad
    if weights is None:
        return float(losses.mean()), grad / logits.shape[0]
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != losses.shape or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per sample, with a positive sum")
    w = w / w.sum()
    return float(w @ losses), grad * w[:, None]


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """Momentum SGD, updating ``params`` in place.

    ``params`` and ``grads`` are matching lists of arrays. ``velocity`` is the
    list of momentum buffers (created as zeros when ``None``) and is returned
    so the caller can keep it between steps::

        v <- momentum * v - lr * g
        theta <- theta + v
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v *= momentum
        v -= lr * g
        p += v
    return velocity
