"""
Forward and backward primitives for the numpy CNN.

Tensors are channels-last: a single image is (H, W, C), a batch is
(N, H, W, C). Every primitive accepts either and returns the same rank it
was given. Convolution uses the cross-correlation convention (no kernel flip)
with zero "same" padding.
"""

from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class LayerShapeError(ValueError):
    """Raised when tensor shapes do not agree with a layer"""
    pass


class NumericError(ArithmeticError):
    """Raised when a layer produces non-finite values"""

    def __init__(self, layer: str, message: str = "non-finite values"):
        self.layer = layer
        self.message = message
        super().__init__(f"{message} after layer {layer}")

    def __reduce__(self):
        return (self.__class__, (self.layer, self.message))


def check_finite(x: np.ndarray, layer: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(layer)
    return x


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise LayerShapeError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def _im2col(x_padded: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # (N, H, W, C, k, k) view -> (N*H*W, k*k*C) with (ki, kj, c) ordering
    patches = sliding_window_view(x_padded, (k, k), axis=(1, 2))[:, :h, :w]
    n, c = x_padded.shape[0], x_padded.shape[3]
    return patches.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv2d_same(x: np.ndarray, kernels: np.ndarray, biases: np.ndarray, stride: int = 1) -> np.ndarray:
    """
    Zero-padded 2D cross-correlation that keeps the spatial size.

    Args:
        x: (H, W, C) or (N, H, W, C) input
        kernels: (k, k, C, O) with odd k
        biases: (O,)
        stride: only 1 is supported

    Returns:
        (H, W, O) or (N, H, W, O) output
    """
    batch, single = _as_batch(x)
    if stride != 1:
        raise LayerShapeError("only stride 1 is supported")
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1] or kernels.shape[0] % 2 == 0:
        raise LayerShapeError(f"kernels must be (k, k, C, O) with odd k, got {kernels.shape}")
    k, _, c_in, c_out = kernels.shape
    if batch.shape[3] != c_in:
        raise LayerShapeError(f"input has {batch.shape[3]} channels, kernels expect {c_in}")
    if biases.shape != (c_out,):
        raise LayerShapeError(f"biases must have shape ({c_out},), got {biases.shape}")

    n, h, w, _ = batch.shape
    p = k // 2
    padded = np.pad(batch, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col(padded, k, h, w)
    out = (cols @ kernels.reshape(k * k * c_in, c_out) + biases).reshape(n, h, w, c_out)
    return out[0] if single else out


def conv2d_same_backward(
    x: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradients of conv2d_same.

    Returns:
        (grad_input, grad_kernels, grad_biases); pad positions are discarded
        from grad_input.
    """
    batch, single = _as_batch(x)
    grad, _ = _as_batch(grad_out)
    k, _, c_in, c_out = kernels.shape
    n, h, w, _ = batch.shape
    p = k // 2

    padded = np.pad(batch, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col(padded, k, h, w)
    grad_2d = grad.reshape(n * h * w, c_out)

    grad_kernels = (cols.T @ grad_2d).reshape(k, k, c_in, c_out)
    grad_biases = grad_2d.sum(axis=0)

    grad_cols = (grad_2d @ kernels.reshape(k * k * c_in, c_out).T).reshape(n, h, w, k, k, c_in)
    grad_padded = np.zeros_like(padded)
    for ki in range(k):
        for kj in range(k):
            grad_padded[:, ki:ki + h, kj:kj + w, :] += grad_cols[:, :, :, ki, kj, :]
    grad_input = grad_padded[:, p:p + h, p:p + w, :]

    return (grad_input[0] if single else grad_input), grad_kernels, grad_biases


def maxpool2(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    2x2 max pooling with stride 2.

    Returns:
        (pooled, argmax) where argmax holds the position 0..3 of the maximum
        inside each block (row-major, first maximum on ties).
    """
    batch, single = _as_batch(x)
    n, h, w, c = batch.shape
    if h % 2 or w % 2:
        raise LayerShapeError(f"maxpool2 needs even height and width, got {h}x{w}")

    blocks = batch.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    argmax = blocks.argmax(axis=-1)
    pooled = np.take_along_axis(blocks, argmax[..., np.newaxis], axis=-1)[..., 0]

    if single:
        return pooled[0], argmax[0]
    return pooled, argmax


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    """Route each pooled gradient back to the recorded maximum position."""
    grad, single = _as_batch(grad_out)
    idx, _ = _as_batch(argmax)
    n, h2, w2, c = grad.shape

    blocks = np.zeros((n, h2, w2, c, 4), dtype=grad.dtype)
    np.put_along_axis(blocks, idx[..., np.newaxis], grad[..., np.newaxis], axis=-1)
    grad_input = blocks.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    return grad_input[0] if single else grad_input


def dense(x: np.ndarray, weights: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """Affine map x @ W + b for a vector (D,) or batch (N, D); W is (D, O)."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise LayerShapeError(f"input width {x.shape[-1]} does not match weights {weights.shape}")
    if biases.shape != (weights.shape[1],):
        raise LayerShapeError(f"biases must have shape ({weights.shape[1]},), got {biases.shape}")
    return x @ weights + biases


def dense_backward(
    x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_out)
    grad_input = g2 @ weights.T
    if x.ndim == 1:
        grad_input = grad_input[0]
    return grad_input, x2.T @ g2, g2.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Zero the gradient wherever the pre-activation was not positive."""
    return np.where(x > 0, grad_out, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis"""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
