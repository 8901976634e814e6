"""Numeric kernels shared by every layer.

Tensors are plain float64 numpy arrays in row-major order. The kernels are
pure: they never modify their inputs.
"""

import numpy as np

from .errors import DimensionError, InputError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a float64 array with rank >= 1."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(input_shape, weight_shape, stride, padding):
    if len(input_shape) != 4 or len(weight_shape) != 4:
        raise DimensionError(
            f"conv2d: expected 4-d input and weight, got {tuple(input_shape)} "
            f"and {tuple(weight_shape)}"
        )
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride={stride} / padding={padding}")
    _, cin, h, w = input_shape
    _, wcin, kh, kw = weight_shape
    if cin != wcin:
        raise DimensionError(
            f"conv2d: input {tuple(input_shape)} has {cin} channels, "
            f"weight {tuple(weight_shape)} expects {wcin}"
        )
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of the padded input as a (Cin*kh*kw, N*H'*W') matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back onto the padded input."""
    n, c, hp, wp = padded_shape
    patches = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-d cross-correlation with zero padding and no bias.

    Shapes: ``x`` is (N, Cin, H, W), ``weight`` is (Cout, Cin, kh, kw), the
    result is (N, Cout, H', W') with ``H' = (H + 2p - kh) // stride + 1``.
    """
    _check_conv(x.shape, weight.shape, stride, padding)
    n, _, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = im2col(_pad(x, padding), kh, kw, stride, ho, wo)
    out = weight.reshape(cout, -1) @ cols
    return np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))


def conv2d_grads(x, weight, grad_out, stride: int = 1, padding: int = 0):
    """Gradients of ``sum(grad_out * conv2d(x, weight))``.

    Returns ``(grad_input, grad_weight)`` shaped like ``x`` and ``weight``.
    """
    _check_conv(x.shape, weight.shape, stride, padding)
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if grad_out.shape != (n, cout, ho, wo):
        raise DimensionError(
            f"conv2d_grads: grad_out {grad_out.shape} does not match expected "
            f"{(n, cout, ho, wo)}"
        )
    xp = _pad(x, padding)
    cols = im2col(xp, kh, kw, stride, ho, wo)
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
    grad_weight = (g2 @ cols.T).reshape(weight.shape)
    gxp = col2im(weight.reshape(cout, -1).T @ g2, xp.shape, kh, kw, stride, ho, wo)
    return np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w]), grad_weight


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    if x.shape != grad_out.shape:
        raise DimensionError(f"relu_grad: {x.shape} vs {grad_out.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple:
    """Mean cross-entropy of ``logits`` (N, K) against integer ``labels``.

    Returns ``(loss, grad_logits)`` where the gradient is already divided by N.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {n} logits rows but labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sums = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sums)
    rows = np.arange(n)
    loss = -log_probs[rows, labels].sum() / n
    grad = exp / sums
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


def avgpool2d(x: np.ndarray, k: int) -> np.ndarray:
    """Non-overlapping k x k average pooling; trailing rows/cols are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise DimensionError(f"avgpool2d: window {k} larger than input {h}x{w}")
    v = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
    return v.mean(axis=(3, 5))


def avgpool2d_grad(input_shape, grad_out: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = input_shape
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    g = np.zeros(input_shape, dtype=DTYPE)
    spread = np.repeat(np.repeat(grad_out, k, axis=2), k, axis=3) / (k * k)
    g[:, :, :ho * k, :wo * k] = spread
    return g
