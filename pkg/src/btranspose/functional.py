"""Differentiable neural-network kernels on :class:`~btranspose.tensor.Tensor`.

Convolutions use a strided window view plus ``tensordot``; their backward passes
scatter window gradients back with one slice-add per kernel offset, which keeps
the accumulation order fixed.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result, matmul, transpose


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad_hw(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (N, C, ho, wo, kh, kw) over a padded NCHW array."""
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _scatter_windows(cols: np.ndarray, out: np.ndarray, stride: int) -> None:
    """Add cols (kh, kw, N, C, h, w) into out (N, C, H, W) at strided window offsets."""
    kh, kw, _, _, h, w = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += cols[i, j]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has C={c}, weight expects I={ci}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit padded input {h + 2 * padding}x{w + 2 * padding}")
    wd = weight.data

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        w2 = wd.reshape(o, c)
        out = (w2 @ xs.reshape(n, c, ho * wo)).reshape(n, o, ho, wo)

        def backward(g):
            g3 = g.reshape(n, o, ho * wo)
            gw = (g3 @ xs.reshape(n, c, ho * wo).transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
            gx = None
            if x.requires_grad:
                gxs = (w2.T @ g3).reshape(n, c, ho, wo)
                if stride > 1:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = gxs
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return gx, gw, gb
    else:
        xp = _pad_hw(x.data, padding)
        win = _windows(xp, kh, kw, stride, ho, wo)
        out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

        def backward(g):
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            gx = None
            if x.requires_grad:
                # (kh, kw, N, C, ho, wo): each kernel offset is one contiguous block
                gcols = np.ascontiguousarray(np.tensordot(wd, g, axes=([0], [1])).transpose(1, 2, 3, 0, 4, 5))
                gxp = np.zeros_like(xp)
                _scatter_windows(gcols, gxp, stride)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return gx, gw, gb

    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (gradient of conv2d w.r.t. its input); weight is (I, O, kH, kW)."""
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has C={c}, weight expects I={ci}")
    if stride < 1:
        raise ShapeError(f"conv_transpose2d needs stride >= 1, got {stride}")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d output extent would be {ho}x{wo}")
    wd = weight.data
    cols = np.ascontiguousarray(np.tensordot(wd, x.data, axes=([0], [1])).transpose(1, 2, 3, 0, 4, 5))
    full = np.zeros((n, o, hf, wf), dtype=np.result_type(x.data, wd))
    _scatter_windows(cols, full, stride)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = _pad_hw(g, padding)
        win = _windows(gfull, kh, kw, stride, h, w)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray(np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed maximum; the gradient goes to the first (row-major) maximal element."""
    if kernel < 1:
        raise ShapeError(f"max_pool2d kernel must be >= 1, got {kernel}")
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, kernel, stride, padding), conv_output_size(w, kernel, stride, padding)
    xp = _pad_hw(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, kernel, stride, ho, wo).reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += g * (arg == idx)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place as ``(1 - momentum) * old + momentum * batch``
    (unbiased variance).  In eval mode the running buffers are used.
    """
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                      ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm2d {name} has shape {arr.shape}, expected ({c},)")
    shape = (1, c, 1, 1)
    g4, b4 = gamma.data.reshape(shape), beta.data.reshape(shape)
    if training:
        count = x.data.size // c
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.ravel()
        running_var *= 1.0 - momentum
        running_var += momentum * var.ravel() * (count / max(count - 1, 1))

        def backward(g):
            dxhat = g * g4
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv_std / count * (count * dxhat - sum_d - xhat * sum_dx)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(shape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(shape)) * inv_std

        def backward(g):
            return g * g4 * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(xhat * g4 + b4, (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std

    def backward(g):
        dxhat = g * gamma.data
        gx = inv_std / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(x.data - out_k),)

    return make_result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects input features {weight.shape[1]}, got {x.shape[-1]}")
    out = matmul(x, transpose(weight))
    return out + bias if bias is not None else out


def rel_to_abs(x: Tensor) -> Tensor:
    """Gather relative-offset logits into absolute positions.

    ``x`` has shape (..., n, 2n-1) where the last axis indexes the offset
    ``k' - k`` shifted by ``n - 1``; the result has shape (..., n, n) with
    ``out[..., k, k'] = x[..., k, k' - k + n - 1]``.
    """
    n, m = x.shape[-2], x.shape[-1]
    if m != 2 * n - 1:
        raise ShapeError(f"rel_to_abs expects last extent 2n-1={2 * n - 1}, got {m}")
    rows = np.arange(n)
    index = (rows[None, :] - rows[:, None]) + n - 1
    out = np.take_along_axis(x.data, np.broadcast_to(index, x.shape[:-1] + (n,)), axis=-1)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for k in range(n):
            gx[..., k, n - 1 - k : 2 * n - 1 - k] += g[..., k, :]
        return (gx,)

    return make_result(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def _lse_axis(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True)), axis=axis)


def separable_logsumexp(x: Tensor, cost_rows: np.ndarray, cost_cols: np.ndarray) -> Tensor:
    """``out[..., i, j] = log sum_{i', j'} exp(x[..., i', j'] - cost_rows[i, i'] - cost_cols[j, j'])``.

    The sum over a separable (row + column) cost is done one axis at a time, so
    no (H*W) x (H*W) array is ever formed; the backward pass recomputes the
    per-axis weights instead of storing them.  Costs may contain ``+inf``.
    """
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    if cost_rows.shape != (h, h) or cost_cols.shape != (w, w):
        raise ShapeError(f"cost matrices {cost_rows.shape}, {cost_cols.shape} do not match grid {h}x{w}")
    xd = x.data.reshape((-1, h, w))
    cr = cost_rows.astype(xd.dtype)
    cc = cost_cols.astype(xd.dtype)
    t1 = _lse_axis(xd[:, :, None, :] - cc[None, None, :, :], axis=-1)  # (B, H', W)
    out = _lse_axis(t1[:, None, :, :] - cr[None, :, :, None], axis=2)  # (B, H, W)

    def backward(g):
        g3 = g.reshape(out.shape)
        w2 = np.exp(t1[:, None, :, :] - cr[None, :, :, None] - out[:, :, None, :])  # (B, H, H', W)
        gt1 = np.einsum("bij,bikj->bkj", g3, w2)
        w1 = np.exp(xd[:, :, None, :] - cc[None, None, :, :] - t1[:, :, :, None])  # (B, H', W, W')
        gx = np.einsum("bkj,bkjl->bkl", gt1, w1)
        return (gx.reshape(x.shape),)

    return make_result(out.reshape(lead + (h, w)), (x,), backward)
