"""Dense array kernels shared by every layer.

Tensors are plain numpy arrays. Image batches use the ``[N, C, H, W]``
layout; single images ``[C, H, W]`` are accepted wherever a batch is and
come back without the leading axis.

"Convolution" means cross-correlation (no kernel flip), stride 1.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"single": np.float32, "double": np.float64}

# im2col buffers are materialised per chunk of samples to bound memory
_CHUNK_ELEMS = 1 << 23


def as_dtype(precision):
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}") from None


def elementwise_mul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _chunks(n, per_sample):
    step = max(1, _CHUNK_ELEMS // max(per_sample, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _check_kernels(x, kernels):
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ValueError(f"kernels must be [F,C,k,k], got {kernels.shape}")
    _, c, h, w = x.shape
    f, kc, k, _ = kernels.shape
    if kc != c:
        raise ValueError(f"channel mismatch: input has {c}, kernels expect {kc}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if k > h or k > w:
        raise ValueError(f"kernel {k}x{k} larger than input {h}x{w}")
    return k


def conv2d(x, kernels, bias=None):
    """Valid cross-correlation: ``[N,C,H,W] * [F,C,k,k] -> [N,F,H-k+1,W-k+1]``."""
    x, single = _batched(x)
    kernels = np.asarray(kernels)
    k = _check_kernels(x, kernels)
    n, c, h, w = x.shape
    f = kernels.shape[0]
    ho, wo = h - k + 1, w - k + 1
    out = np.empty((n, f, ho, wo), dtype=np.result_type(x, kernels))
    for sl in _chunks(n, c * ho * wo * k * k):
        win = sliding_window_view(x[sl], (k, k), axis=(2, 3))  # n,c,ho,wo,k,k
        # -> n,ho,wo,f
        out[sl] = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out += np.asarray(bias, dtype=out.dtype)[None, :, None, None]
    return out[0] if single else out


def conv2d_backward(x, kernels, d_out, need_input_grad=True):
    """Gradients of :func:`conv2d` w.r.t. kernels, bias and input.

    Returns ``(d_kernels, d_bias, d_input)``; ``d_input`` is None when not
    requested.
    """
    x, single = _batched(x)
    d_out, _ = _batched(d_out)
    kernels = np.asarray(kernels)
    k = _check_kernels(x, kernels)
    n, c, h, w = x.shape
    f = kernels.shape[0]
    ho, wo = h - k + 1, w - k + 1
    if d_out.shape != (n, f, ho, wo):
        raise ValueError(f"d_out shape {d_out.shape} does not match forward output {(n, f, ho, wo)}")

    d_kernels = np.zeros_like(kernels, dtype=np.result_type(x, kernels, d_out))
    d_input = np.zeros_like(x, dtype=d_kernels.dtype) if need_input_grad else None
    for sl in _chunks(n, c * ho * wo * k * k):
        win = sliding_window_view(x[sl], (k, k), axis=(2, 3))
        d_kernels += np.tensordot(d_out[sl], win, axes=([0, 2, 3], [0, 2, 3]))
        if need_input_grad:
            # cols[n,ho,wo,c,i,j] then scatter-add back onto the input grid
            cols = np.tensordot(d_out[sl], kernels, axes=([1], [0]))
            dx = d_input[sl]
            for i in range(k):
                for j in range(k):
                    dx[:, :, i:i + ho, j:j + wo] += cols[..., i, j].transpose(0, 3, 1, 2)
    d_bias = d_out.sum(axis=(0, 2, 3))
    if single and need_input_grad:
        d_input = d_input[0]
    return d_kernels, d_bias, d_input


def same_pad(k):
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    return (k - 1) // 2


def pad2d(x, p):
    x, single = _batched(x)
    out = np.pad(x, [(0, 0), (0, 0), (p, p), (p, p)]) if p else x
    return out[0] if single else out


def conv2d_same(x, kernels, bias=None):
    """Zero-padded convolution keeping the spatial extent."""
    k = np.asarray(kernels).shape[-1]
    return conv2d(pad2d(x, same_pad(k)), kernels, bias)


def conv2d_same_backward(x, kernels, d_out, need_input_grad=True):
    k = np.asarray(kernels).shape[-1]
    p = same_pad(k)
    d_k, d_b, d_xp = conv2d_backward(pad2d(x, p), kernels, d_out, need_input_grad)
    if d_xp is not None and p:
        d_xp = d_xp[..., p:-p, p:-p]
    return d_k, d_b, d_xp


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling.

    Returns ``(out, argmax)`` where ``argmax`` holds the row-major position
    (0..3) of the winner inside each window; ties go to the first position.
    """
    x, single = _batched(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even extents, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2x2_backward(d_out, argmax):
    d_out, single = _batched(d_out)
    argmax = argmax[None] if single else argmax
    n, c, h2, w2 = d_out.shape
    win = np.zeros((n, c, h2, w2, 4), dtype=d_out.dtype)
    np.put_along_axis(win, argmax[..., None], d_out[..., None], axis=-1)
    dx = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return dx[0] if single else dx


def fully_connected(x, weights, bias):
    """``W @ x + b`` for a vector ``x`` or a row batch ``[N, n]``."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ValueError(
            f"dimension mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )
    return x @ weights.T + bias
