"""Dense array math for the four layer kinds the recognizer is built from.

Tensors are C-contiguous float64 numpy arrays. Every forward operation has a
paired backward rule returning exact analytic gradients, and `grad_check`
verifies any (value, gradient) pair against central finite differences.

Convolutions are stride-1 with no padding; pooling is a fixed 2x2 max.
Batched variants (trailing `_batch`) carry a leading batch axis and are what
the training loop calls; the single-sample forms wrap them.
"""

from __future__ import annotations

from typing import Callable, Tuple

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Raised when operands have inconsistent or unsupported shapes."""


def as_tensor(x) -> Array:
    """Coerce to a contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(images: Array, k: int) -> Array:
    """Unfold [B,C,H,W] into [B, C*k*k, OH*OW] patch columns."""
    b, c, h, w = images.shape
    oh, ow = h - k + 1, w - k + 1
    windows = np.lib.stride_tricks.sliding_window_view(images, (k, k), axis=(2, 3))
    # windows: [B, C, OH, OW, k, k] -> [B, C, k, k, OH, OW]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, oh * ow)
    return np.ascontiguousarray(cols)


def _check_conv_shapes(images: Array, kernels: Array, bias: Array) -> int:
    if images.ndim != 4 or kernels.ndim != 4 or bias.ndim != 1:
        raise ShapeError(
            f"conv2d expects image [C,H,W], kernels [O,C,k,k], bias [O]; "
            f"got {images.shape[1:]}, {kernels.shape}, {bias.shape}"
        )
    _, c, h, w = images.shape
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError(f"only square kernels supported, got {kh}x{kw}")
    if c_in != c:
        raise ShapeError(f"kernel expects {c_in} input channels, image has {c}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than image {h}x{w}")
    if bias.shape[0] != c_out:
        raise ShapeError(f"bias has {bias.shape[0]} entries for {c_out} kernels")
    return kh


def conv2d_batch(images: Array, kernels: Array, bias: Array) -> Array:
    """Valid cross-correlation of [B,C,H,W] with [O,C,k,k] kernels plus bias."""
    k = _check_conv_shapes(images, kernels, bias)
    b, _, h, w = images.shape
    c_out = kernels.shape[0]
    oh, ow = h - k + 1, w - k + 1
    cols = _im2col(images, k)
    kmat = kernels.reshape(c_out, -1)
    out = np.matmul(kmat, cols)  # [B, O, OH*OW]
    out += bias[None, :, None]
    return out.reshape(b, c_out, oh, ow)


def conv2d_batch_backward(
    images: Array, kernels: Array, upstream: Array
) -> Tuple[Array, Array, Array]:
    """Gradients of conv2d_batch w.r.t. images, kernels and bias."""
    b, c, h, w = images.shape
    c_out, _, k, _ = kernels.shape
    oh, ow = h - k + 1, w - k + 1
    if upstream.shape != (b, c_out, oh, ow):
        raise ShapeError(f"upstream shape {upstream.shape} != {(b, c_out, oh, ow)}")
    up = upstream.reshape(b, c_out, oh * ow)
    cols = _im2col(images, k)

    bias_grad = upstream.sum(axis=(0, 2, 3))
    kernel_grad = np.einsum("bop,bqp->oq", up, cols).reshape(kernels.shape)

    kmat = kernels.reshape(c_out, -1)
    col_grad = np.matmul(kmat.T, up)  # [B, C*k*k, OH*OW]
    col_grad = col_grad.reshape(b, c, k, k, oh, ow)
    input_grad = np.zeros_like(images)
    for i in range(k):
        for j in range(k):
            input_grad[:, :, i : i + oh, j : j + ow] += col_grad[:, :, i, j]
    return input_grad, kernel_grad, bias_grad


def conv2d(image: Array, kernels: Array, bias: Array) -> Array:
    """Single-image convolution: [C,H,W] -> [O,H-k+1,W-k+1]."""
    if image.ndim != 3:
        raise ShapeError(f"conv2d expects a [C,H,W] image, got shape {image.shape}")
    return conv2d_batch(image[None], kernels, bias)[0]


def conv2d_backward(
    image: Array, kernels: Array, upstream: Array
) -> Tuple[Array, Array, Array]:
    ig, kg, bg = conv2d_batch_backward(image[None], kernels, upstream[None])
    return ig[0], kg, bg


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def _pool_windows(images: Array) -> Array:
    """Reshape [B,C,H,W] into row-major 2x2 windows [B,C,H/2,W/2,4]."""
    b, c, h, w = images.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    win = images.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(b, c, h // 2, w // 2, 4)


def maxpool2_batch(images: Array) -> Array:
    """2x2 max pooling over [B,C,H,W] with even H, W."""
    win = _pool_windows(images)
    return win.max(axis=-1)


def maxpool2_batch_backward(images: Array, upstream: Array) -> Array:
    """Route upstream gradient to each window's argmax (first cell on ties)."""
    b, c, h, w = images.shape
    win = _pool_windows(images)
    if upstream.shape != win.shape[:-1]:
        raise ShapeError(f"upstream shape {upstream.shape} != {win.shape[:-1]}")
    idx = win.argmax(axis=-1)  # argmax takes the first max: row-major tie-break
    grad_win = np.zeros_like(win)
    np.put_along_axis(grad_win, idx[..., None], upstream[..., None], axis=-1)
    grad = grad_win.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(grad.reshape(b, c, h, w))


def maxpool2(image: Array) -> Array:
    """Single-image 2x2 max pooling: [C,H,W] -> [C,H/2,W/2]."""
    if image.ndim != 3:
        raise ShapeError(f"maxpool2 expects a [C,H,W] image, got shape {image.shape}")
    return maxpool2_batch(image[None])[0]


def maxpool2_backward(image: Array, upstream: Array) -> Array:
    return maxpool2_batch_backward(image[None], upstream[None])[0]


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

def _check_affine(x: Array, w: Array, b: Array) -> None:
    if w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"affine expects W [m,n] and b [m], got {w.shape}, {b.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != W columns {w.shape[1]}")
    if b.shape[0] != w.shape[0]:
        raise ShapeError(f"bias width {b.shape[0]} != W rows {w.shape[0]}")


def affine(x: Array, w: Array, b: Array) -> Array:
    """out = W @ x + b for a single input vector."""
    if x.ndim != 1:
        raise ShapeError(f"affine expects a vector input, got shape {x.shape}")
    _check_affine(x, w, b)
    return w @ x + b


def affine_backward(x: Array, w: Array, upstream: Array) -> Tuple[Array, Array, Array]:
    """Returns (input_grad, w_grad, b_grad) = (W^T u, outer(u, x), u)."""
    if upstream.shape != (w.shape[0],):
        raise ShapeError(f"upstream shape {upstream.shape} != {(w.shape[0],)}")
    return w.T @ upstream, np.outer(upstream, x), upstream.copy()


def affine_batch(x: Array, w: Array, b: Array) -> Array:
    """out[i] = W @ x[i] + b for a batch of row vectors [B,n]."""
    _check_affine(x, w, b)
    return x @ w.T + b[None, :]


def affine_batch_backward(
    x: Array, w: Array, upstream: Array
) -> Tuple[Array, Array, Array]:
    input_grad = upstream @ w
    w_grad = upstream.T @ x
    b_grad = upstream.sum(axis=0)
    return input_grad, w_grad, b_grad


# ---------------------------------------------------------------------------
# rectifier
# ---------------------------------------------------------------------------

def relu(x: Array) -> Array:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0.0)


def relu_backward(x: Array, upstream: Array) -> Array:
    """Gradient is upstream where x > 0, else 0 (0 at exactly 0)."""
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != input {x.shape}")
    return np.where(x > 0.0, upstream, 0.0)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[Array], Tuple[float, Array]], x: Array, eps: float = 1e-5
) -> float:
    """Compare an analytic gradient against central finite differences.

    `f` maps a tensor to (scalar value, gradient w.r.t. the tensor). Returns
    the max over coordinates of |analytic - numeric| / max(1e-8, |analytic| +
    |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    value, analytic = f(x)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise ValueError("function value or gradient is not finite")
    if analytic.shape != x.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != input {x.shape}")

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi, _ = f(x)
        flat[i] = orig - eps
        lo, _ = f(x)
        flat[i] = orig
        if not np.isfinite(hi) or not np.isfinite(lo):
            raise ValueError(f"function value not finite near coordinate {i}")
        numeric = (hi - lo) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
