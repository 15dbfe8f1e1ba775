"""Differentiable primitive ops over :class:`~stylefield.diffcore.tensor.Tensor`.

Dense-array semantics follow numpy; every op validates shapes and names
itself in the error.  Sampling ops (trilinear / bilinear / cubemap) take the
query coordinates as plain ndarrays: coordinates are never functions of
trainable parameters anywhere in this package, so no gradient flows to them.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import Tensor, ShapeError, accumulate, make_node


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64 if arr.dtype == np.int64 else np.float32)
    return Tensor(arr)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b):
    a, b = _t(a), _t(b)
    out = a.data + b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return make_node(out, (a, b), bwd, "add")


def sub(a, b):
    a, b = _t(a), _t(b)
    out = a.data - b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))

    return make_node(out, (a, b), bwd, "sub")


def mul(a, b):
    a, b = _t(a), _t(b)
    out = a.data * b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g * b.data, a.shape))
        accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make_node(out, (a, b), bwd, "mul")


def div(a, b):
    a, b = _t(a), _t(b)
    out = a.data / b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g / b.data, a.shape))
        accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_node(out, (a, b), bwd, "div")


# -- transcendental / activation ---------------------------------------------


def exp(x):
    x = _t(x)
    out = np.exp(x.data)

    def bwd(g):
        accumulate(x, g * out)

    return make_node(out, (x,), bwd, "exp")


def sin(x):
    x = _t(x)
    out = np.sin(x.data)

    def bwd(g):
        accumulate(x, g * np.cos(x.data))

    return make_node(out, (x,), bwd, "sin")


def cos(x):
    x = _t(x)
    out = np.cos(x.data)

    def bwd(g):
        accumulate(x, g * -np.sin(x.data))

    return make_node(out, (x,), bwd, "cos")


def relu(x):
    x = _t(x)
    out = np.maximum(x.data, 0)

    def bwd(g):
        accumulate(x, g * (x.data > 0))

    return make_node(out, (x,), bwd, "relu")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    x = _t(x)
    out = _sigmoid(x.data)

    def bwd(g):
        accumulate(x, g * out * (1.0 - out))

    return make_node(out, (x,), bwd, "sigmoid")


def softplus(x):
    """Numerically stable softplus: max(x, 0) + log1p(exp(-|x|))."""
    x = _t(x)
    out = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))

    def bwd(g):
        accumulate(x, g * _sigmoid(x.data))

    return make_node(out, (x,), bwd, "softplus")


def sqrt(x, grad_floor=1e-12):
    x = _t(x)
    out = np.sqrt(x.data)

    def bwd(g):
        accumulate(x, g * 0.5 / np.maximum(out, grad_floor))

    return make_node(out, (x,), bwd, "sqrt")


def clip(x, lo, hi):
    x = _t(x)
    out = np.clip(x.data, lo, hi)

    def bwd(g):
        accumulate(x, g * ((x.data >= lo) & (x.data <= hi)))

    return make_node(out, (x,), bwd, "clip")


# -- reductions ---------------------------------------------------------------


def _restore_axes(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        shape = list(in_shape)
        for a in sorted(a % len(in_shape) for a in ax):
            shape[a] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def sum_(x, axis=None, keepdims=False):
    x = _t(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        accumulate(x, np.ascontiguousarray(_restore_axes(g, x.shape, axis, keepdims)))

    return make_node(np.asarray(out), (x,), bwd, "sum")


def mean(x, axis=None, keepdims=False):
    x = _t(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / np.asarray(out).size

    def bwd(g):
        accumulate(
            x, np.ascontiguousarray(_restore_axes(g, x.shape, axis, keepdims)) / count
        )

    return make_node(np.asarray(out), (x,), bwd, "mean")


# -- shape manipulation --------------------------------------------------------


def reshape(x, shape):
    x = _t(x)
    out = x.data.reshape(shape)
    in_shape = x.shape

    def bwd(g):
        accumulate(x, g.reshape(in_shape))

    return make_node(out, (x,), bwd, "reshape")


def transpose(x, axes):
    x = _t(x)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd(g):
        accumulate(x, np.ascontiguousarray(g.transpose(inv)))

    return make_node(out, (x,), bwd, "transpose")


def concat(parts, axis=0):
    parts = [_t(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(s, e)
            accumulate(p, np.ascontiguousarray(g[tuple(sl)]))

    return make_node(out, tuple(parts), bwd, "concat")


def take_flat(x, flat_idx, out_shape):
    """Element gather on the flattened tensor; backward scatter-adds."""
    x = _t(x)
    out = x.data.reshape(-1)[flat_idx].reshape(out_shape)
    n = x.data.size
    in_shape = x.shape

    def bwd(g):
        dg = np.bincount(flat_idx.reshape(-1), weights=g.reshape(-1), minlength=n)
        accumulate(x, dg.reshape(in_shape).astype(g.dtype, copy=False))

    return make_node(out, (x,), bwd, "take_flat")


def put_rows(n_rows, idx, rows, fill=0.0):
    """Scatter rows into a (n_rows, C) tensor prefilled with a constant."""
    rows = _t(rows)
    if rows.data.ndim != 2:
        raise ShapeError(f"put_rows: rows must be 2D, got {tuple(rows.shape)}")
    out = np.full((n_rows, rows.shape[1]), fill, dtype=rows.dtype)
    out[idx] = rows.data

    def bwd(g):
        accumulate(rows, np.ascontiguousarray(g[idx]))

    return make_node(out, (rows,), bwd, "put_rows")


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {tuple(a.shape)} x {tuple(b.shape)}"
        )
    out = a.data @ b.data

    def bwd(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return make_node(out, (a, b), bwd, "matmul")


def l2norm(x, grad_floor=1e-12):
    """Euclidean norm of the whole tensor (scalar output)."""
    x = _t(x)
    out = np.asarray(np.sqrt((x.data * x.data).sum()), dtype=x.dtype)

    def bwd(g):
        accumulate(x, g * x.data / max(float(out), grad_floor))

    return make_node(out, (x,), bwd, "l2norm")


def norm_lastaxis(x, keepdims=False, grad_floor=1e-12):
    """Row-wise Euclidean norm over the last axis."""
    x = _t(x)
    out = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=keepdims))

    def bwd(g):
        n = out if keepdims else out[..., None]
        gg = g if keepdims else g[..., None]
        accumulate(x, gg * x.data / np.maximum(n, grad_floor))

    return make_node(out, (x,), bwd, "norm_lastaxis")


def normalize_rows(x, grad_floor=1e-12):
    """x / ||x|| along the last axis (callers must reject degenerate rows)."""
    n = norm_lastaxis(x, keepdims=True, grad_floor=grad_floor)
    return div(x, n)


# -- neural-net building blocks ------------------------------------------------


def conv2d(x, w, b=None):
    """Stride-1 zero-padded 2D convolution: (N,C,H,W) * (O,C,kh,kw) -> (N,O,H,W)."""
    x, w = _t(x), _t(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: incompatible shapes {tuple(x.shape)} and {tuple(w.shape)}"
        )
    bt = _t(b) if b is not None else None
    out = kernels.conv2d_forward(x.data, w.data, bt.data if bt is not None else None)
    kh, kw = w.shape[2], w.shape[3]
    parents = (x, w) if bt is None else (x, w, bt)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            accumulate(x, kernels.conv2d_backward_input(w.data, g))
        if w.requires_grad:
            accumulate(w, kernels.conv2d_backward_weight(x.data, g, kh, kw))
        if bt is not None and bt.requires_grad:
            accumulate(bt, g.sum(axis=(0, 2, 3)))

    return make_node(out, parents, bwd, "conv2d")


def avgpool2(x):
    """2x2 average pooling on (N,C,H,W); H and W must be even."""
    x = _t(x)
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2: odd spatial extents ({H}, {W})")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        accumulate(x, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return make_node(out, (x,), bwd, "avgpool2")


def upsample2(x):
    """Nearest-neighbor 2x upsample on (N,C,H,W)."""
    x = _t(x)
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        accumulate(x, g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)))

    return make_node(out, (x,), bwd, "upsample2")


def channel_stats(x, eps=0.0):
    """Per-channel mean and population std over spatial positions.

    Accepts (C,H,W) or (N,C,H,W); the returned tensors keep singleton
    spatial dims so they broadcast against the input.
    """
    x = _t(x)
    if x.data.ndim == 3:
        axes = (1, 2)
    elif x.data.ndim == 4:
        axes = (2, 3)
    else:
        raise ShapeError(f"channel_stats: expected 3D or 4D input, got {tuple(x.shape)}")
    mu = mean(x, axis=axes, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=axes, keepdims=True)
    if eps:
        var = add(var, eps)
    sd = sqrt(var)
    return mu, sd


# -- sampling ops (coordinates are constants) ----------------------------------


def trilinear(grid, pts):
    """Trilinear interpolation of a (X,Y,Z,C) node grid at (M,3) node coords."""
    grid = _t(grid)
    if grid.data.ndim != 4:
        raise ShapeError(f"trilinear: grid must be (X,Y,Z,C), got {tuple(grid.shape)}")
    pts = np.ascontiguousarray(pts, dtype=grid.dtype)
    out = kernels.trilinear_forward(grid.data, pts)
    shape = grid.shape

    def bwd(g):
        accumulate(
            grid, kernels.trilinear_backward(shape, pts, np.ascontiguousarray(g))
        )

    return make_node(out, (grid,), bwd, "trilinear")


def bilinear(img, ys, xs):
    """Bilinear sample of an (H,W,C) image at pixel-index coordinates."""
    img = _t(img)
    if img.data.ndim != 3:
        raise ShapeError(f"bilinear: image must be (H,W,C), got {tuple(img.shape)}")
    ys = np.ascontiguousarray(ys, dtype=img.dtype)
    xs = np.ascontiguousarray(xs, dtype=img.dtype)
    out = kernels.bilinear_forward(img.data, ys, xs)
    shape = img.shape

    def bwd(g):
        accumulate(img, kernels.bilinear_backward(shape, ys, xs, np.ascontiguousarray(g)))

    return make_node(out, (img,), bwd, "bilinear")


def cubemap_sample_op(faces, face_idx, ys, xs):
    """Per-face-clamped bilinear sample of a (6,F,F,C) face stack."""
    faces = _t(faces)
    if faces.data.ndim != 4 or faces.shape[0] != 6:
        raise ShapeError(
            f"cubemap_sample: faces must be (6,F,F,C), got {tuple(faces.shape)}"
        )
    face_idx = np.ascontiguousarray(face_idx, dtype=np.int64)
    ys = np.ascontiguousarray(ys, dtype=faces.dtype)
    xs = np.ascontiguousarray(xs, dtype=faces.dtype)
    out = kernels.cubemap_sample_forward(faces.data, face_idx, ys, xs)
    shape = faces.shape

    def bwd(g):
        accumulate(
            faces,
            kernels.cubemap_sample_backward(shape, face_idx, ys, xs, np.ascontiguousarray(g)),
        )

    return make_node(out, (faces,), bwd, "cubemap_sample")


def composite(sig, rgb, delta, bg):
    """Emission-absorption compositing along rays (fused kernel).

    sig (R,N) and rgb (R,N,3) may require gradients; delta and bg are
    constants.  Returns (pixel colors Tensor (R,3), weights, transmittances,
    residual transmittance) -- the last three as plain ndarrays, i.e. the
    weights are detached by construction.
    """
    sig, rgb = _t(sig), _t(rgb)
    if sig.data.ndim != 2 or rgb.data.shape != sig.data.shape + (3,):
        raise ShapeError(
            f"composite: need sig (R,N) and rgb (R,N,3), got {tuple(sig.shape)} "
            f"and {tuple(rgb.shape)}"
        )
    delta = np.ascontiguousarray(delta, dtype=sig.dtype)
    bg = np.ascontiguousarray(bg, dtype=sig.dtype)
    out, w, trans, total_trans = kernels.composite_forward(sig.data, delta, rgb.data, bg)

    def bwd(g):
        dsig, drgb = kernels.composite_backward(
            sig.data, delta, rgb.data, bg, w, total_trans, np.ascontiguousarray(g)
        )
        accumulate(sig, dsig)
        accumulate(rgb, drgb)

    node = make_node(out, (sig, rgb), bwd, "composite")
    return node, w, trans, total_trans


def weighted_segment_sum_op(rows, weights, seg, n_seg):
    """out[s] = sum_{i: seg[i]=s} weights[i] * rows[i]; weights are constants."""
    rows = _t(rows)
    weights = np.ascontiguousarray(weights, dtype=rows.dtype)
    seg = np.ascontiguousarray(seg, dtype=np.int64)
    out = kernels.weighted_segment_sum(rows.data, weights, seg, n_seg)

    def bwd(g):
        accumulate(rows, kernels.weighted_segment_sum_backward(weights, seg, np.ascontiguousarray(g)))

    return make_node(out, (rows,), bwd, "weighted_segment_sum")
