"""Differentiable tensor ops.

Backward rules only use ops from this module, so every gradient is itself
differentiable. Masks (ReLU, clamp, max) are separate non-differentiable ops
so they are recomputed when a recorded graph is replayed.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from advcritic.autodiff.node import (
    DTYPE,
    ShapeError,
    apply,
    as_node,
    register,
    wants,
)


def _unbroadcast_shape_check(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- shape plumbing ---------------------------------------------------------


def _sum_to_fwd(a, shape):
    if a.shape == tuple(shape):
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    out = a.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


register(
    "sum_to",
    _sum_to_fwd,
    lambda n, g: (broadcast_to(g, n.parents[0].shape),),
)
register(
    "broadcast_to",
    lambda a, shape: np.broadcast_to(a, shape).copy(),
    lambda n, g: (sum_to(g, n.parents[0].shape),),
)
register(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda n, g: (reshape(g, n.parents[0].shape),),
)
register(
    "transpose",
    lambda a, axes: np.transpose(a, axes),
    lambda n, g: (transpose(g, None if n.attrs["axes"] is None else tuple(np.argsort(n.attrs["axes"]))),),
)


def sum_to(x, shape):
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return apply("sum_to", x, shape=shape)


def broadcast_to(x, shape):
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return apply("broadcast_to", x, shape=shape)


def reshape(x, shape):
    x = as_node(x)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(x.value.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.value.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    if x.shape == shape:
        return x
    return apply("reshape", x, shape=shape)


def transpose(x, axes=None):
    return apply("transpose", x, axes=None if axes is None else tuple(axes))


def flatten(x):
    """(B, ...) -> (B, prod(...))."""
    x = as_node(x)
    return reshape(x, (x.shape[0], -1))


# -- elementwise arithmetic ---------------------------------------------------


def _binary(name, a, b):
    a, b = as_node(a), as_node(b)
    _unbroadcast_shape_check(a, b)
    return apply(name, a, b)


register(
    "add",
    np.add,
    lambda n, g: (sum_to(g, n.parents[0].shape), sum_to(g, n.parents[1].shape)),
)
register(
    "sub",
    np.subtract,
    lambda n, g: (sum_to(g, n.parents[0].shape), sum_to(neg(g), n.parents[1].shape)),
)
def _mul_bwd(n, g):
    a, b = n.parents
    ga = sum_to(g * b, a.shape) if wants(a) else None
    gb = sum_to(g * a, b.shape) if wants(b) else None
    return ga, gb


register("mul", np.multiply, _mul_bwd)


def _div_bwd(n, g):
    a, b = n.parents
    ga = sum_to(g / b, a.shape) if wants(a) else None
    gb = sum_to(neg(g) * n / b, b.shape) if wants(b) else None
    return ga, gb


register("div", np.divide, _div_bwd)
register("neg", np.negative, lambda n, g: (neg(g),))
register("exp", np.exp, lambda n, g: (g * n,))
register("log", np.log, lambda n, g: (g / n.parents[0],))
register(
    "power",
    lambda a, p: np.power(a, p),
    lambda n, g: (g * (n.attrs["p"] * power(n.parents[0], n.attrs["p"] - 1)),),
)


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def div(a, b):
    return _binary("div", a, b)


def neg(a):
    return apply("neg", a)


def exp(a):
    return apply("exp", a)


def log(a):
    return apply("log", a)


def power(a, p):
    p = float(p)
    if p == 1.0:
        return as_node(a)
    return apply("power", a, p=p)


def square(a):
    a = as_node(a)
    return a * a


# -- linear algebra -----------------------------------------------------------


def _matmul_fwd(a, b):
    return a @ b


def _matmul_bwd(n, g):
    a, b = n.parents
    ga = g @ transpose(b) if wants(a) else None
    gb = transpose(a) @ g if wants(b) else None
    return ga, gb


register("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim == 1:
        return reshape(apply("matmul", a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    return apply("matmul", a, b)


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _sum_bwd(n, g):
    a = n.parents[0]
    axes = n.attrs["axis"]
    if not n.attrs["keepdims"]:
        shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        g = reshape(g, shape)
    return (broadcast_to(g, a.shape),)


register(
    "sum",
    lambda a, axis, keepdims: a.sum(axis=axis, keepdims=keepdims),
    _sum_bwd,
)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_node(x)
    return apply("sum", x, axis=_norm_axes(axis, x.ndim), keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    x = as_node(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def _argmax_mask(a, axis):
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    mask = np.zeros_like(a)
    np.put_along_axis(mask, idx, 1.0, axis=axis)
    return mask


register("argmax_mask", _argmax_mask, differentiable=False)


def _max_bwd(n, g):
    a = n.parents[0]
    axis = n.attrs["axis"]
    mask = apply("argmax_mask", a, axis=axis)
    if not n.attrs["keepdims"]:
        g = reshape(g, tuple(1 if i == axis else s for i, s in enumerate(a.shape)))
    return (broadcast_to(g, a.shape) * mask,)


register(
    "max",
    lambda a, axis, keepdims: a.max(axis=axis, keepdims=keepdims),
    _max_bwd,
)


def max(x, axis=-1, keepdims=False):  # noqa: A001
    """Max over a single axis; ties route the gradient to the first maximum."""
    x = as_node(x)
    return apply("max", x, axis=axis % x.ndim, keepdims=keepdims)


# -- activations ----------------------------------------------------------------

register("relu_mask", lambda a: (a > 0).astype(DTYPE), differentiable=False)
register(
    "relu",
    lambda a: np.maximum(a, 0.0),
    lambda n, g: (g * apply("relu_mask", n.parents[0]),),
)


def relu(x):
    return apply("relu", x)


register(
    "leaky_mask",
    lambda a, slope: np.where(a > 0, 1.0, slope),
    differentiable=False,
)
register(
    "leaky_relu",
    lambda a, slope: np.where(a > 0, a, slope * a),
    lambda n, g: (g * apply("leaky_mask", n.parents[0], slope=n.attrs["slope"]),),
)


def leaky_relu(x, slope=0.2):
    return apply("leaky_relu", x, slope=float(slope))


def _sigmoid_fwd(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


register("sigmoid", _sigmoid_fwd, lambda n, g: (g * (n * (1.0 - n)),))
register(
    "softplus",
    lambda a: np.logaddexp(0.0, a),
    lambda n, g: (g * sigmoid(n.parents[0]),),
)


def sigmoid(x):
    return apply("sigmoid", x)


def softplus(x):
    return apply("softplus", x)


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow."""
    return neg(softplus(neg(x)))


def _log_softmax_fwd(a, axis):
    m = a.max(axis=axis, keepdims=True)
    s = a - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def _log_softmax_bwd(n, g):
    axis = n.attrs["axis"]
    return (g - exp(n) * sum(g, axis=axis, keepdims=True),)


register("log_softmax", _log_softmax_fwd, _log_softmax_bwd)


def log_softmax(x, axis=-1):
    x = as_node(x)
    return apply("log_softmax", x, axis=axis % x.ndim)


def softmax(x, axis=-1):
    return exp(log_softmax(x, axis=axis))


# -- indexing -------------------------------------------------------------------


def _pick_fwd(a, index):
    return a[np.arange(a.shape[0]), index]


def _scatter_fwd(a, index, width):
    out = np.zeros((a.shape[0], width), dtype=DTYPE)
    out[np.arange(a.shape[0]), index] = a
    return out


register(
    "pick",
    _pick_fwd,
    lambda n, g: (scatter(g, n.attrs["index"], n.parents[0].shape[1]),),
)
register(
    "scatter",
    _scatter_fwd,
    lambda n, g: (pick(g, n.attrs["index"]),),
)


def pick(x, index):
    """Row-wise gather: out[i] = x[i, index[i]] for a (B, k) node."""
    x = as_node(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"pick needs (B, k) and (B,), got {x.shape}, {index.shape}")
    if np.any(index < 0) or np.any(index >= x.shape[1]):
        raise IndexError("pick index out of range")
    return apply("pick", x, index=index)


def scatter(x, index, width):
    return apply("scatter", x, index=np.asarray(index, dtype=np.int64), width=int(width))


def _put_rows_fwd(a, index, n):
    out = np.zeros((n,) + a.shape[1:], dtype=DTYPE)
    np.add.at(out, index, a)
    return out


register(
    "take_rows",
    lambda a, index: a[index],
    lambda n, g: (put_rows(g, n.attrs["index"], n.parents[0].shape[0]),),
)
register(
    "put_rows",
    _put_rows_fwd,
    lambda n, g: (take_rows(g, n.attrs["index"]),),
)


def take_rows(x, index):
    return apply("take_rows", x, index=np.asarray(index, dtype=np.int64))


def put_rows(x, index, n):
    return apply("put_rows", x, index=np.asarray(index, dtype=np.int64), n=int(n))


# -- bounded ops ----------------------------------------------------------------

register(
    "clamp_mask",
    lambda a, lo, hi: ((a >= lo) & (a <= hi)).astype(DTYPE),
    differentiable=False,
)
register(
    "clamp",
    lambda a, lo, hi: np.clip(a, lo, hi),
    lambda n, g: (g * apply("clamp_mask", n.parents[0], lo=n.attrs["lo"], hi=n.attrs["hi"]),),
)


def clamp(x, lo=-np.inf, hi=np.inf):
    return apply("clamp", x, lo=float(lo), hi=float(hi))


def _safe_recip_fwd(a):
    out = np.zeros_like(a)
    nz = a != 0
    out[nz] = 1.0 / a[nz]
    return out


register("safe_recip", _safe_recip_fwd, lambda n, g: (neg(g) * n * n,))


def safe_recip(x):
    """1/x with 0 mapped to 0 (and zero derivative there)."""
    return apply("safe_recip", x)


def _l2norm_fwd(a):
    return np.sqrt((a * a).sum(axis=1))


def _l2norm_bwd(n, g):
    a = n.parents[0]
    scale = reshape(g * safe_recip(n), (a.shape[0], 1))
    return (a * scale,)


register("l2norm", _l2norm_fwd, _l2norm_bwd)


def l2norm(x):
    """Per-row Euclidean norm of a (B, ...) node; gradient at 0 is 0."""
    return apply("l2norm", flatten(x))


def sq_l2norm(x):
    """Per-row squared Euclidean norm of a (B, ...) node."""
    x = flatten(x)
    return sum(x * x, axis=1)


register("sign", np.sign, differentiable=False)


def sign(x):
    return apply("sign", x)


register("less", lambda a, b: (a < b).astype(DTYPE), differentiable=False)


def less(a, b):
    """Indicator a < b as 0/1 values; carries no gradient."""
    return _binary("less", a, b)


# -- gradient routing -------------------------------------------------------------

register("stop_gradient", lambda a: a, lambda n, g: (None,))
register("reroute", lambda a, s: a, lambda n, g: (None, g))


def stop_gradient(x):
    return apply("stop_gradient", x)


def stop_or_reroute_gradient(node, surrogate=None):
    """Forward ``node``'s value; backpropagate through ``surrogate`` (or nothing)."""
    node = as_node(node)
    if surrogate is None:
        return stop_gradient(node)
    surrogate = as_node(surrogate)
    if surrogate.shape != node.shape:
        raise ShapeError(f"surrogate shape {surrogate.shape} != {node.shape}")
    return apply("reroute", node, surrogate)


def straight_through_indicator(p, threshold, temperature):
    """I(p < threshold) forward, d/dp sigmoid(temperature * (threshold - p)) backward."""
    p = as_node(p)
    hard = less(p, threshold)
    soft = sigmoid(temperature * (threshold - p))
    return stop_or_reroute_gradient(hard, soft)


# -- stochastic -------------------------------------------------------------------


register(
    "gaussian_noise",
    lambda a, std, rng: a + std * rng.standard_normal(a.shape),
    lambda n, g: (g,),
)


def gaussian_noise(x, std, rng):
    """x + std * N(0, 1) drawn from ``rng`` (a numpy Generator)."""
    if std == 0:
        return as_node(x)
    return apply("gaussian_noise", x, std=float(std), rng=rng)


# -- convolution / pooling --------------------------------------------------------


def _im2col_fwd(a, kh, kw):
    # (N, C, H, W) -> (N, OH, OW, C*kh*kw)
    win = sliding_window_view(a, (kh, kw), axis=(2, 3))  # N, C, OH, OW, kh, kw
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)


def _col2im_fwd(a, kh, kw, shape):
    n, c, h, w = shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = a.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros(shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + oh, j : j + ow] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


register(
    "im2col",
    _im2col_fwd,
    lambda n, g: (col2im(g, n.attrs["kh"], n.attrs["kw"], n.parents[0].shape),),
)
register(
    "col2im",
    _col2im_fwd,
    lambda n, g: (im2col(g, n.attrs["kh"], n.attrs["kw"]),),
)


def im2col(x, kh, kw):
    return apply("im2col", x, kh=int(kh), kw=int(kw))


def col2im(x, kh, kw, shape):
    return apply("col2im", x, kh=int(kh), kw=int(kw), shape=tuple(shape))


def conv2d(x, weight, bias=None):
    """Valid, stride-1 cross-correlation.

    x: (N, C, H, W); weight: (F, C, kh, kw); bias: (F,). Returns (N, F, OH, OW).
    """
    x, weight = as_node(x), as_node(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d shape mismatch {x.shape} * {weight.shape}")
    f, c, kh, kw = weight.shape
    n = x.shape[0]
    cols = im2col(x, kh, kw)
    oh, ow = cols.shape[1], cols.shape[2]
    flat = reshape(cols, (n * oh * ow, c * kh * kw))
    out = flat @ transpose(reshape(weight, (f, c * kh * kw)))
    if bias is not None:
        out = out + bias
    return transpose(reshape(out, (n, oh, ow, f)), (0, 3, 1, 2))


def max_pool2d(x, size=2):
    """Non-overlapping max pooling; H and W must be divisible by ``size``."""
    x = as_node(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: {h}x{w} not divisible by {size}")
    t = reshape(x, (n, c, h // size, size, w // size, size))
    t = transpose(t, (0, 1, 2, 4, 3, 5))
    t = reshape(t, (n, c, h // size, w // size, size * size))
    return max(t, axis=-1)

