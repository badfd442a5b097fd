"""Differentiable operation catalog.

Every function takes and returns :class:`~mccl.tensor.Tensor` objects and
records a backward rule on the active tape. Broadcasting is limited to
scalar-with-tensor; anything else needs an explicit reshape or concat.
Reductions and normalisation statistics accumulate in float64.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from mccl.tensor import ShapeError, Tensor, make_result

LOG_EPS = 1e-7


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float32), dtype=dtype)


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting allowed)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=t.dtype).reshape(t.shape)


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _binary_shapes("add", a, b)

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return make_result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _binary_shapes("sub", a, b)

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return make_result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    return make_result("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _binary_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _reduce_to(g / bd, a), _reduce_to(-g * out / bd, b)

    return make_result("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (no gradient w.r.t. ``c``)."""
    c = float(c)
    return make_result("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_result("add_scalar", a.data + a.dtype.type(c), (a,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope).astype(x.dtype)
    return make_result("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi).astype(x.dtype)
    return make_result("clamp", out, (x,), lambda g: (g * inside,))


def log(x: Tensor) -> Tensor:
    """Natural log with the input clamped to at least 1e-7."""
    safe = np.maximum(x.data, LOG_EPS)
    passed = x.data >= LOG_EPS
    return make_result("log", np.log(safe).astype(x.dtype), (x,), lambda g: (g * passed / safe,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result("sqrt", out, (x,), lambda g: (g * 0.5 / np.maximum(out, 1e-30),))


# reductions ----------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.mean(x.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return make_result("mean", np.asarray(out), (x,), bw)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all elements, as a scalar tensor."""
    nrm = float(np.sqrt(np.sum(np.square(x.data, dtype=np.float64))))

    def bw(g):
        return ((g * x.data / max(nrm, 1e-12)).astype(x.dtype),)

    return make_result("l2_norm", np.asarray(nrm, dtype=x.dtype), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """B x C x H x W -> B x C."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-d tensor, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def bw(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], x.shape).astype(x.dtype),)

    return make_result("global_avg_pool", out, (x,), bw)


# shape manipulation --------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return make_result("concat", np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result("slice", np.ascontiguousarray(x.data[index]), (x,), bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, axis))
        start += s
    return out


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather along ``axis`` (batch permutation when indices is a permutation)."""
    idx = np.asarray(indices, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return make_result("take", np.take(x.data, idx, axis=axis), (x,), bw)


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return make_result("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for x: B x I, w: I x O, b: O."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    xd, wd = x.data, w.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0, dtype=np.float64).astype(b.dtype)

    return make_result("linear", xd @ wd + b.data, (x, w, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    d = x.data.astype(np.float64)
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    out = p.astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        return ((p * (g64 - (g64 * p).sum(axis=axis, keepdims=True))).astype(x.dtype),)

    return make_result("softmax", out, (x,), bw)


# convolution ---------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: output size ({size}+2*{pad}-{k})/{stride}+1 is not an integer"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x (B,Cin,H,W) with w (Cout,Cin,k,k), optional bias (Cout,)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    B, C, H, W = x.shape
    Co, _, k, _ = w.shape
    Ho = conv_output_size(H, k, stride, pad)
    Wo = conv_output_size(W, k, stride, pad)
    wd = w.data.reshape(Co, C * k * k)

    if k == 1 and pad == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        patches = np.empty((B, Ho, Wo, C, k, k), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                patches[:, :, :, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride].transpose(0, 2, 3, 1)
        cols = patches.reshape(B * Ho * Wo, C * k * k)
    out = cols @ wd.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (g2.T @ cols).reshape(w.shape).astype(w.dtype)
        gb = g2.sum(axis=0, dtype=np.float64).astype(b.dtype) if b is not None else None
        dcols = g2 @ wd
        if k == 1 and pad == 0:
            dxs = dcols.reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
            if stride > 1:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = dxs
            else:
                gx = np.ascontiguousarray(dxs)
        else:
            dpatch = dcols.reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dpatch[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    if b is None:
        return make_result("conv2d", out, inputs, lambda g: bw(g)[:2])
    return make_result("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor, k: Tensor) -> Tensor:
    """Per-channel correlation with a C x 1 x 1 kernel: out[:, c] = k[c] * x[:, c]."""
    if x.ndim != 4 or k.shape != (x.shape[1], 1, 1):
        raise ShapeError(f"depthwise_conv2d: input {x.shape} needs kernel ({x.shape[1]}, 1, 1), got {k.shape}")
    kd = k.data.reshape(1, -1, 1, 1)
    xd = x.data

    def bw(g):
        gk = (g * xd).sum(axis=(0, 2, 3), dtype=np.float64).reshape(k.shape).astype(k.dtype)
        return g * kd, gk

    return make_result("depthwise_conv2d", xd * kd, (x, k), bw)


# resampling ----------------------------------------------------------------

def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (n_out x n_in) matrix of 1-d linear interpolation, half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale_ = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of B x C x H x W maps (align_corners=False convention)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    B, C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return make_result("bilinear_resize", x.data.copy(), (x,), lambda g: (g,))
    ry = interp_matrix(H, out_h, x.dtype)
    rx = interp_matrix(W, out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def bw(g):
        return (np.ascontiguousarray(np.matmul(np.matmul(ry.T, g), rx)),)

    return make_result("bilinear_resize", np.ascontiguousarray(out), (x,), bw)


# normalisation -------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalisation over (B, H, W).

    In training mode batch statistics are used and, when ``update_stats``,
    the running buffers are updated in place with ``momentum`` (unbiased
    variance, as is conventional).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} with affine params {gamma.shape}, {beta.shape}")
    B, C, H, W = x.shape
    n = B * H * W
    xd = x.data.astype(np.float64)
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_stats:
            unbiased = var * n / max(n - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data.astype(np.float64)
    out = (xhat * gd[None, :, None, None] + beta.data[None, :, None, None]).astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        ggamma = (g64 * xhat).sum(axis=(0, 2, 3))
        gbeta = g64.sum(axis=(0, 2, 3))
        gxhat = g64 * gd[None, :, None, None]
        if training:
            gx = (inv[None, :, None, None] / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx.astype(x.dtype), ggamma.astype(gamma.dtype), gbeta.astype(beta.dtype)

    return make_result("batch_norm", out, (x, gamma, beta), bw)
