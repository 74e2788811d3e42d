"""Differentiable primitives on NCHW tensors.

Every op computes its forward result with numpy, then registers a backward
closure on the active tape (if any). Backward closures skip work for inputs
that do not require a gradient, which matters for the first convolution
(image input) and for frozen trunks.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import GeometryError, ShapeError
from .tensor import Tensor, as_tensor, record

__all__ = [
    "output_size",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "batch_norm",
    "relu",
    "dropout",
    "fully_connected",
    "softmax",
    "softmax_cross_entropy",
    "add",
    "sub",
    "mul",
    "channel_concat",
    "channel_scale",
    "flatten",
    "reshape",
    "select",
    "sum",
    "mean",
]


def output_size(size: int, k: int, stride: int, pad: int) -> int:
    """Closed-form spatial size of a sliding-window op."""
    return (size + 2 * pad - k) // stride + 1


def _geometry(H: int, W: int, kh: int, kw: int, stride: int, ph: int, pw: int, what: str):
    if stride < 1:
        raise GeometryError(f"{what}: stride must be >= 1, got {stride}")
    if ph < 0 or pw < 0:
        raise GeometryError(f"{what}: padding must be >= 0, got ({ph}, {pw})")
    Ho = output_size(H, kh, stride, ph)
    Wo = output_size(W, kw, stride, pw)
    if Ho < 1 or Wo < 1 or H + 2 * ph < kh or W + 2 * pw < kw:
        raise GeometryError(
            f"{what}: input {H}x{W} with kernel {kh}x{kw}, stride {stride}, "
            f"pad ({ph}, {pw}) gives empty output {Ho}x{Wo}"
        )
    return Ho, Wo


def _pad(x: np.ndarray, ph: int, pw: int, value=0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _slice_windows(xp: np.ndarray, i: int, j: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """View of the kernel-offset (i, j) element of every window: [N, C, Ho, Wo]."""
    return xp[:, :, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride]


def _scatter_windows(dst: np.ndarray, g: np.ndarray, i: int, j: int, stride: int) -> None:
    """dst[:, :, i + stride*oh, j + stride*ow] += g[:, :, oh, ow]."""
    Ho, Wo = g.shape[2], g.shape[3]
    dst[:, :, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += g


def _unpad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    H, W = x.shape[2], x.shape[3]
    return x[:, :, ph : H - ph, pw : W - pw]


# --------------------------------------------------------------------------- conv


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad_h: int = 0, pad_w: int = 0) -> Tensor:
    """2-D cross-correlation, x: [N, C, H, W], weight: [K, C, kh, kw], bias: [K].

    Columns are laid out [n, C*kh*kw, Ho*Wo] so each GEMM writes NCHW
    directly; 1x1 stride-1 filters skip the column copy entirely.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D [N,C,H,W], got shape {xd.shape}")
    if wd.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D [K,C,kh,kw], got shape {wd.shape}")
    N, C, H, W = xd.shape
    K, Cw, kh, kw = wd.shape
    if Cw != C:
        raise ShapeError(
            f"conv2d: weight expects {Cw} input channels but input has {C} (input {xd.shape}, weight {wd.shape})"
        )
    if bias is not None and bias.data.shape != (K,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} does not match {K} filters")
    Ho, Wo = _geometry(H, W, kh, kw, stride, pad_h, pad_w, "conv2d")
    pointwise = kh == 1 and kw == 1 and pad_h == 0 and pad_w == 0 and stride == 1

    if pointwise:
        return _conv_pointwise(x, weight, bias)
    return _conv_im2col(x, weight, bias, stride, pad_h, pad_w, Ho, Wo)


def _conv_pointwise(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    xd, wd = x.data, weight.data
    N, C, H, W = xd.shape
    K = wd.shape[0]
    w2 = wd.reshape(K, C)
    cols = xd.reshape(N, C, H * W)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    res = Tensor._wrap(out.reshape(N, K, H, W))

    def backward(g: np.ndarray):
        gm = g.reshape(N, K, H * W)
        dx = dw = db = None
        if weight.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            db = gm.sum(axis=(0, 2))
        if x.requires_grad:
            dx = np.matmul(w2.T, gm).reshape(N, C, H, W)
        return (dx, dw, db) if bias is not None else (dx, dw)

    return _record_conv(x, weight, bias, res, backward)


_COL_BUDGET = 1 << 22  # bytes of column buffer per GEMM chunk


def _conv_im2col(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, pad_h: int, pad_w: int,
                 Ho: int, Wo: int) -> Tensor:
    """Chunked im2col: a few samples at a time so the column buffer stays
    cache-sized; columns are rebuilt in backward rather than stored."""
    xd, wd = x.data, weight.data
    N, C, H, W = xd.shape
    K, _, kh, kw = wd.shape
    P = Ho * Wo
    CK = C * kh * kw
    w2 = wd.reshape(K, CK)
    xp = _pad(xd, pad_h, pad_w)
    chunk = max(1, min(N, _COL_BUDGET // (CK * P * xd.itemsize)))
    buf = np.empty((chunk, C, kh, kw, Ho, Wo), dtype=xd.dtype)

    def columns(n0: int, n1: int) -> np.ndarray:
        b = buf[: n1 - n0]
        for i in range(kh):
            for j in range(kw):
                b[:, :, i, j] = _slice_windows(xp[n0:n1], i, j, stride, Ho, Wo)
        return b.reshape(n1 - n0, CK, P)

    out = np.empty((N, K, P), dtype=xd.dtype)
    for n0 in range(0, N, chunk):
        n1 = min(N, n0 + chunk)
        np.matmul(w2, columns(n0, n1), out=out[n0:n1])
    if bias is not None:
        out += bias.data[:, None]
    res = Tensor._wrap(out.reshape(N, K, Ho, Wo))

    def backward(g: np.ndarray):
        gm = g.reshape(N, K, P)
        dx = dw = db = None
        need_w = weight.requires_grad
        if bias is not None and bias.requires_grad:
            db = gm.sum(axis=(0, 2))
        if need_w:
            dw2 = np.zeros((K, CK), dtype=g.dtype)
        if x.requires_grad:
            dxp = np.zeros((N, C, H + 2 * pad_h, W + 2 * pad_w), dtype=g.dtype)
        if need_w or x.requires_grad:
            for n0 in range(0, N, chunk):
                n1 = min(N, n0 + chunk)
                gc = gm[n0:n1]
                if need_w:
                    cols = columns(n0, n1)
                    dw2 += np.matmul(gc, cols.transpose(0, 2, 1)).sum(axis=0)
                if x.requires_grad:
                    dcols = np.matmul(w2.T, gc).reshape(n1 - n0, C, kh, kw, Ho, Wo)
                    dst = dxp[n0:n1]
                    for i in range(kh):
                        for j in range(kw):
                            _scatter_windows(dst, dcols[:, :, i, j], i, j, stride)
        if need_w:
            dw = dw2.reshape(K, C, kh, kw)
        if x.requires_grad:
            dx = _unpad(dxp, pad_h, pad_w)
        return (dx, dw, db) if bias is not None else (dx, dw)

    return _record_conv(x, weight, bias, res, backward)


def _record_conv(x, weight, bias, res, backward):
    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(inputs, res, backward)


# --------------------------------------------------------------------------- pooling


def max_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Max pooling; padded cells hold -inf and never win, ties go to the
    first element in row-major window order."""
    if k < 1:
        raise GeometryError(f"max_pool2d: kernel must be >= 1, got {k}")
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"max_pool2d: input must be 4-D, got shape {xd.shape}")
    N, C, H, W = xd.shape
    if pad >= k:
        raise GeometryError(f"max_pool2d: pad {pad} >= kernel {k} creates all-padding windows")
    Ho, Wo = _geometry(H, W, k, k, stride, pad, pad, "max_pool2d")
    xp = _pad(xd, pad, pad, value=-np.inf)
    y = _slice_windows(xp, 0, 0, stride, Ho, Wo).copy()
    for idx in range(1, k * k):
        i, j = divmod(idx, k)
        np.maximum(y, _slice_windows(xp, i, j, stride, Ho, Wo), out=y)
    res = Tensor._wrap(y)

    def backward(g: np.ndarray):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        taken = np.zeros(y.shape, dtype=bool)
        # visiting offsets in row-major order routes ties to the first maximum
        for idx in range(k * k):
            i, j = divmod(idx, k)
            hit = _slice_windows(xp, i, j, stride, Ho, Wo) == y
            hit &= ~taken
            taken |= hit
            _scatter_windows(dxp, g * hit, i, j, stride)
        return (_unpad(dxp, pad, pad),)

    return record((x,), res, backward)


def avg_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Average pooling over zero-padded input; divisor is always k*k."""
    if k < 1:
        raise GeometryError(f"avg_pool2d: kernel must be >= 1, got {k}")
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"avg_pool2d: input must be 4-D, got shape {xd.shape}")
    N, C, H, W = xd.shape
    Ho, Wo = _geometry(H, W, k, k, stride, pad, pad, "avg_pool2d")
    xp = _pad(xd, pad, pad)
    y = np.zeros((N, C, Ho, Wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            y += _slice_windows(xp, i, j, stride, Ho, Wo)
    y /= k * k
    res = Tensor._wrap(y)

    def backward(g: np.ndarray):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        gs = g / (k * k)
        for i in range(k):
            for j in range(k):
                _scatter_windows(dxp, gs, i, j, stride)
        return (_unpad(dxp, pad, pad),)

    return record((x,), res, backward)


# --------------------------------------------------------------------------- normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Batch normalization over [N, C, H, W] (per channel) or [N, F].

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``; the running
    variance uses the unbiased batch estimate.
    """
    xd = x.data
    if xd.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    elif xd.ndim == 2:
        axes, bshape = (0,), (1, -1)
    else:
        raise ShapeError(f"batch_norm: expected 2-D or 4-D input, got shape {xd.shape}")
    C = xd.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"batch_norm: affine parameters must have shape ({C},)")
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if not training:
        invstd = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)
        scale = g_ * invstd.reshape(bshape)
        xhat = (xd - running_mean.reshape(bshape).astype(xd.dtype)) * invstd.reshape(bshape)
        y = xhat * g_ + b_
        res = Tensor._wrap(y)

        def backward_eval(g: np.ndarray):
            dx = g * scale if x.requires_grad else None
            dg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            db = g.sum(axis=axes) if beta.requires_grad else None
            return dx, dg, db

        return record((x, gamma, beta), res, backward_eval)

    if xd.shape[0] < 2:
        raise ShapeError("batch_norm: training mode needs a batch of at least 2 samples")
    m = xd.size // C
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = np.square(xc).mean(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    y = xc * (g_ * invstd)
    y += b_
    unbiased = var.reshape(C) * (m / max(m - 1, 1))
    running_mean *= momentum
    running_mean += (1 - momentum) * mu.reshape(C)
    running_var *= momentum
    running_var += (1 - momentum) * unbiased
    res = Tensor._wrap(y)

    def backward(g: np.ndarray):
        # with xhat = xc * invstd:
        #   dx = gamma * invstd * (g - mean(g) - xhat * mean(g * xhat))
        g_sum = g.sum(axis=axes, keepdims=True)
        gxc_sum = (g * xc).sum(axis=axes, keepdims=True)
        dg = (gxc_sum * invstd).reshape(C) if gamma.requires_grad else None
        db = g_sum.reshape(C) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            scale = g_ * invstd
            dx = g * scale
            dx -= xc * (scale * invstd * invstd * gxc_sum / m)
            dx -= scale * g_sum / m
        return dx, dg, db

    return record((x, gamma, beta), res, backward)


# --------------------------------------------------------------------------- activations / dense


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    res = Tensor._wrap(y)
    return record((x,), res, lambda g: (g * (y > 0),))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    res = Tensor._wrap(x.data * keep)
    return record((x,), res, lambda g: (g * keep,))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W.T + b with W: [out, in]."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"fully_connected: input {xd.shape} incompatible with weight {wd.shape}")
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data
    res = Tensor._wrap(y)

    def backward(g: np.ndarray):
        dx = g @ wd if x.requires_grad else None
        dw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return dx, dw
        db = g.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(inputs, res, backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the batch."""
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [N, K], got {ld.shape}")
    N, K = ld.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != N:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {N} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        bad = labels[(labels < 0) | (labels >= K)][0]
        raise IndexError(f"label {bad} out of range for {K} classes")
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(N)
    loss = -logp[rows, labels].mean()
    res = Tensor._wrap(np.asarray(loss, dtype=ld.dtype))

    def backward(g: np.ndarray):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / N),)

    return record((logits,), res, backward)


# --------------------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    res = Tensor._wrap(a.data + b.data)
    return record((a, b), res, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    res = Tensor._wrap(a.data - b.data)
    return record((a, b), res, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    res = Tensor._wrap(ad * bd)

    def backward(g: np.ndarray):
        da = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        db = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return da, db

    return record((a, b), res, backward)


def channel_concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1."""
    xs = tuple(xs)
    if not xs:
        raise ShapeError("channel_concat: nothing to concatenate")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"channel_concat: shape {t.shape} incompatible with {ref}")
    res = Tensor._wrap(np.concatenate([t.data for t in xs], axis=1))
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g: np.ndarray):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record(xs, res, backward)


def channel_scale(F: Tensor, alpha: Tensor) -> Tensor:
    """Per-channel scaling ``F[:, j] * alpha[j]`` for F: [N, C, H, W], alpha: [C]."""
    fd, ad = F.data, alpha.data
    if fd.ndim != 4 or ad.shape != (fd.shape[1],):
        raise ShapeError(f"channel_scale: alpha {ad.shape} does not match feature maps {fd.shape}")
    a4 = ad.reshape(1, -1, 1, 1)
    res = Tensor._wrap(fd * a4)

    def backward(g: np.ndarray):
        dF = g * a4 if F.requires_grad else None
        da = (g * fd).sum(axis=(0, 2, 3)) if alpha.requires_grad else None
        return dF, da

    return record((F, alpha), res, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    res = Tensor._wrap(x.data.reshape(shape))
    if res.size != x.size:
        raise ShapeError(f"reshape: cannot map {src} to {shape}")
    return record((x,), res, lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def select(x: Tensor, index: int) -> Tensor:
    """``x[index]`` along the leading axis."""
    res = Tensor._wrap(x.data[index])

    def backward(g: np.ndarray):
        d = np.zeros_like(x.data)
        d[index] = g
        return (d,)

    return record((x,), res, backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    res = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.dtype))
    return record((x,), res, lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    res = Tensor._wrap(np.asarray(x.data.mean(), dtype=x.dtype))
    return record((x,), res, lambda g: (np.broadcast_to(g / n, x.shape),))
