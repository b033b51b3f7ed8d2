"""Numeric kernels shared by every layer.

Tensors are plain ``float64`` numpy arrays. Dense activations are
``(batch, features)``, image activations ``(batch, channels, height, width)``
and convolution kernels ``(out_channels, in_channels, kh, kw)``. Every kernel
validates rank and extents up front and refuses to return non-finite values.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes violate a kernel's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a kernel would return NaN or Inf."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s) in output of shape {x.shape}")
    return x


def _require_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {x.shape}")


def matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Batched inner product ``out[i, j] = sum_k a[i, k] * w[k, j]``."""
    _require_rank(a, 2, "matmul lhs")
    _require_rank(w, 2, "matmul rhs")
    if a.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul inner extents differ: lhs {a.shape} vs rhs {w.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ w
    return check_finite(out, "matmul")


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise add/sub/mul.

    ``b`` must either match ``a`` exactly or be a bias: a per-feature row for
    ``(batch, features)`` operands, or a per-channel vector for
    ``(batch, channels, h, w)`` operands.
    """
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_OPS)}") from None
    if a.shape == b.shape:
        pass
    elif b.ndim == 1 and a.ndim == 2 and b.shape[0] == a.shape[1]:
        b = b[None, :]
    elif b.ndim == 1 and a.ndim == 4 and b.shape[0] == a.shape[1]:
        b = b[None, :, None, None]
    else:
        raise ShapeError(f"cannot {op} shapes {a.shape} and {b.shape}: only exact or bias broadcasting")
    # overflow is reported below as a NonFiniteError, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        out = fn(a, b)
    return check_finite(out, op)


def conv_output_extent(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"convolution extent (size {size} + 2*{padding} - kernel {k}) / stride {stride} "
            "is not a non-negative integer"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unfold sliding windows into rows of shape ``(b*oh*ow, c*kh*kw)``."""
    _require_rank(x, 4, "im2col input")
    b, c, h, w = x.shape
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (b, c, oh, ow, kh, kw) view; the reshape below is the only copy
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add window rows back to an image."""
    b, c, h, w = x_shape
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(w, kw, stride, padding)
    cols = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            img[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if padding:
        img = img[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(img)


def cols_to_map(rows: np.ndarray, b: int, oh: int, ow: int) -> np.ndarray:
    """``(b*oh*ow, co)`` matmul output -> ``(b, co, oh, ow)`` feature map."""
    return np.ascontiguousarray(rows.reshape(b, oh, ow, -1).transpose(0, 3, 1, 2))


def map_to_cols(fmap: np.ndarray) -> np.ndarray:
    """Inverse of :func:`cols_to_map`."""
    b, co, oh, ow = fmap.shape
    return fmap.transpose(0, 2, 3, 1).reshape(b * oh * ow, co)


def conv2d(x: np.ndarray, k: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` with ``k``; the caller adds any bias."""
    _require_rank(x, 4, "conv2d input")
    _require_rank(k, 4, "conv2d kernel")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    co, _, kh, kw = k.shape
    b, _, h, w = x.shape
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(w, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = matmul(cols, k.reshape(co, -1).T)
    return cols_to_map(out, b, oh, ow)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pooling.

    Returns the pooled map and, per output cell, the flat index (0..3,
    row-major within the window) of the winning input.
    """
    _require_rank(x, 4, "maxpool2 input")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {x.shape}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(pooled), idx


def maxpool2_backward(grad: np.ndarray, idx: np.ndarray) -> np.ndarray:
    b, c, oh, ow = grad.shape
    win = np.zeros((b, c, oh, ow, 4), dtype=DTYPE)
    np.put_along_axis(win, idx[..., None], grad[..., None], axis=-1)
    return np.ascontiguousarray(
        win.reshape(b, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh * 2, ow * 2)
    )


def _check_labels(labels: np.ndarray, classes: int, batch: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range [0, {classes}): min {labels.min()}, max {labels.max()}")
    return labels.astype(np.int64, copy=False)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient ``(softmax - onehot) / batch``."""
    _require_rank(logits, 2, "logits")
    check_finite(logits, "logits")
    b, classes = logits.shape
    labels = _check_labels(labels, classes, b)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(b)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


def logistic_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary log-loss for a single-output head; class 1 means logit > 0."""
    _require_rank(logits, 2, "logits")
    check_finite(logits, "logits")
    b, width = logits.shape
    if width != 1:
        raise ShapeError(f"logistic head needs one output, got {logits.shape}")
    labels = _check_labels(labels, 2, b)
    z = logits[:, 0]
    sign = 2.0 * labels - 1.0
    margin = sign * z
    loss = float(np.logaddexp(0.0, -margin).mean())
    # d/dz softplus(-s z) = -s * sigmoid(-s z)
    grad = (-sign * np.exp(-np.logaddexp(0.0, margin)) / b)[:, None]
    return loss, grad
