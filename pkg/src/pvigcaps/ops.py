"""Differentiable tensor operations.

Each op is a ``forward(ctx, *arrays, **attrs)`` registered together with a
``backward(ctx, grad) -> tuple`` rule; the public functions below wrap
:func:`pvigcaps.tensor.apply`.

Broadcasting follows the trailing-axis rule in one direction only: the
second operand may be stretched to the first operand's shape (extents of 1
stretch, missing leading axes are added).  ``add`` and ``mul`` swap their
operands when only the first one is broadcastable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .exceptions import ContractError, DegenerateBatchError, NumericError, ShapeError
from .tensor import Tensor, apply, as_tensor, get_dtype, register, verification_mode

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _broadcastable_to(small, big) -> bool:
    try:
        return np.broadcast_shapes(small, big) == tuple(big)
    except ValueError:
        return False


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    stretched = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if stretched:
        g = g.sum(axis=stretched, keepdims=True)
    return g.reshape(shape)


def _check_binary(a, b, kind):
    if not _broadcastable_to(b.shape, a.shape):
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are incompatible")


# ---------------------------------------------------------------- binary


def _add_bwd(ctx, g):
    return g, _unbroadcast(g, ctx["b_shape"])


@register("add", _add_bwd)
def _add_fwd(ctx, a, b):
    ctx["b_shape"] = b.shape
    return a + b


def _sub_bwd(ctx, g):
    return g, -_unbroadcast(g, ctx["b_shape"])


@register("sub", _sub_bwd)
def _sub_fwd(ctx, a, b):
    ctx["b_shape"] = b.shape
    return a - b


def _mul_bwd(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return g * b, _unbroadcast(g * a, b.shape)


@register("mul", _mul_bwd)
def _mul_fwd(ctx, a, b):
    ctx["a"], ctx["b"] = a, b
    return a * b


def _commutative(kind, a, b):
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcastable_to(b.shape, a.shape) and _broadcastable_to(a.shape, b.shape):
        a, b = b, a
    _check_binary(a, b, kind)
    return apply(kind, a, b)


def add(a, b) -> Tensor:
    return _commutative("add", a, b)


def mul(a, b) -> Tensor:
    return _commutative("mul", a, b)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcastable_to(b.shape, a.shape) and _broadcastable_to(a.shape, b.shape):
        return negate(apply("sub", b, a))
    _check_binary(a, b, "sub")
    return apply("sub", a, b)


def apply_binary(a, b, kind: str) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown binary kind {kind!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------- linear algebra


def _matmul_bwd(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return g @ b.T, a.T @ g


@register("matmul", _matmul_bwd)
def _matmul_fwd(ctx, a, b):
    ctx["a"], ctx["b"] = a, b
    return a @ b


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return apply("matmul", a, b)


def _einsum_bwd(ctx, g):
    sa, sb, so = ctx["subs"]
    a, b = ctx["a"], ctx["b"]
    return (np.einsum(f"{so},{sb}->{sa}", g, b, optimize=True),
            np.einsum(f"{so},{sa}->{sb}", g, a, optimize=True))


@register("einsum", _einsum_bwd)
def _einsum_fwd(ctx, a, b, subs):
    ctx["a"], ctx["b"], ctx["subs"] = a, b, subs
    sa, sb, so = subs
    return np.einsum(f"{sa},{sb}->{so}", a, b, optimize=True)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum with an explicit output, e.g. ``"ij,jk->ik"``.

    Every index of an operand must also appear in the other operand or the
    output, and no operand may repeat an index.
    """
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for mine, other in ((sa, sb), (sb, sa)):
        if len(set(mine)) != len(mine):
            raise ContractError(f"einsum {spec!r}: repeated index within an operand")
        if set(mine) - set(other) - set(out):
            raise ContractError(f"einsum {spec!r}: index summed inside one operand only")
    return apply("einsum", as_tensor(a), as_tensor(b), subs=(sa, sb, out))


def _conv2d_bwd(ctx, g):
    cols, w, stride, pad, xshape = ctx["cols"], ctx["w"], ctx["stride"], ctx["pad"], ctx["xshape"]
    B, C, H, W = xshape
    O, _, kh, kw = w.shape
    Ho, Wo = g.shape[2:]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
    return dx, dw, db


@register("conv2d", _conv2d_bwd)
def _conv2d_fwd(ctx, x, w, bias, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    out = cols @ w.reshape(O, -1).T + bias
    ctx.update(cols=cols, w=w, stride=stride, pad=pad, xshape=x.shape)
    return np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, bias, stride: int = 1, padding: int = 0) -> Tensor:
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects B×C×H×W input and O×C×kh×kw kernel, got {x.shape}, {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = w.shape
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {O} output channels")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}×{kw} larger than padded input {H + 2 * padding}×{W + 2 * padding}")
    return apply("conv2d", x, w, bias, stride=stride, pad=padding)


# ---------------------------------------------------------------- unary


def _gelu_bwd(ctx, g):
    x = ctx["x"]
    return (g * (ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI),)


@register("gelu", _gelu_bwd)
def _gelu_fwd(ctx, x):
    ctx["x"] = x
    return x * ndtr(x)


def _relu_bwd(ctx, g):
    return (g * (ctx["x"] > 0),)


@register("relu", _relu_bwd)
def _relu_fwd(ctx, x):
    ctx["x"] = x
    return np.maximum(x, 0)


def _exp_bwd(ctx, g):
    return (g * ctx["y"],)


@register("exp", _exp_bwd)
def _exp_fwd(ctx, x):
    with np.errstate(over="ignore"):
        y = np.exp(x)
    ctx["y"] = y
    return y


def _log_bwd(ctx, g):
    return (g / ctx["x"],)


@register("log", _log_bwd)
def _log_fwd(ctx, x):
    if verification_mode() and np.any(x <= 0):
        raise NumericError("log of a non-positive value")
    ctx["x"] = x
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x)


def _sqrt_bwd(ctx, g):
    with np.errstate(divide="ignore"):
        return (g * 0.5 / ctx["y"],)


@register("sqrt", _sqrt_bwd)
def _sqrt_fwd(ctx, x):
    if verification_mode() and np.any(x < 0):
        raise NumericError("sqrt of a negative value")
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x)
    ctx["y"] = y
    return y


def _negate_bwd(ctx, g):
    return (-g,)


@register("negate", _negate_bwd)
def _negate_fwd(ctx, x):
    return -x


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    return apply("gelu", as_tensor(x))


def relu(x) -> Tensor:
    return apply("relu", as_tensor(x))


def exp(x) -> Tensor:
    return apply("exp", as_tensor(x))


def log(x) -> Tensor:
    return apply("log", as_tensor(x))


def sqrt(x) -> Tensor:
    return apply("sqrt", as_tensor(x))


def negate(x) -> Tensor:
    return apply("negate", as_tensor(x))


_UNARY = {"gelu": gelu, "relu": relu, "exp": exp, "log": log, "sqrt": sqrt, "negate": negate}


def apply_unary(x, kind: str) -> Tensor:
    try:
        return _UNARY[kind](x)
    except KeyError:
        raise ValueError(f"unknown unary kind {kind!r}") from None


# ---------------------------------------------------------------- reductions


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-D tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def _expand_grad(g, ctx):
    if not ctx["keepdims"]:
        g = np.expand_dims(g, ctx["axes"])
    return g


def _sum_bwd(ctx, g):
    return (np.broadcast_to(_expand_grad(g, ctx), ctx["shape"]).copy(),)


@register("sum", _sum_bwd)
def _sum_fwd(ctx, x, axes, keepdims):
    ctx.update(shape=x.shape, axes=axes, keepdims=keepdims)
    return np.asarray(x.sum(axis=axes, keepdims=keepdims))


def _mean_bwd(ctx, g):
    n = math.prod(ctx["shape"][a] for a in ctx["axes"])
    return (np.broadcast_to(_expand_grad(g, ctx) / n, ctx["shape"]).copy(),)


@register("mean", _mean_bwd)
def _mean_fwd(ctx, x, axes, keepdims):
    ctx.update(shape=x.shape, axes=axes, keepdims=keepdims)
    return np.asarray(x.mean(axis=axes, keepdims=keepdims))


def _max_bwd(ctx, g):
    axes, shape = ctx["axes"], ctx["shape"]
    k = len(axes)
    dest = tuple(range(len(shape) - k, len(shape)))
    moved_shape = ctx["moved_shape"]
    if ctx["keepdims"]:
        g = np.squeeze(g, axis=axes)
    flat = np.zeros(moved_shape[:len(shape) - k] + (math.prod(moved_shape[len(shape) - k:]),), dtype=g.dtype)
    np.put_along_axis(flat, ctx["idx"][..., None], g[..., None], axis=-1)
    return (np.moveaxis(flat.reshape(moved_shape), dest, axes),)


@register("max", _max_bwd)
def _max_fwd(ctx, x, axes, keepdims):
    k = len(axes)
    dest = tuple(range(x.ndim - k, x.ndim))
    moved = np.moveaxis(x, axes, dest)
    flat = moved.reshape(moved.shape[:x.ndim - k] + (-1,))
    # argmax returns the first maximal position: the documented tie rule
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    ctx.update(shape=x.shape, axes=axes, keepdims=keepdims, idx=idx, moved_shape=moved.shape)
    return np.expand_dims(out, axes) if keepdims else out


def reduce(x, kind: str, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when ``None``).

    The max gradient goes to the first maximal element in row-major order
    over the reduced axes.
    """
    if kind not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduction {kind!r}")
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    if kind == "max" and any(x.shape[a] == 0 for a in axes):
        raise ShapeError("max over an empty axis")
    return apply(kind, x, axes=axes, keepdims=keepdims)


def sum(x, axes=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axes, keepdims)


def mean(x, axes=None, keepdims=False) -> Tensor:
    return reduce(x, "mean", axes, keepdims)


def max(x, axes=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce(x, "max", axes, keepdims)


# ---------------------------------------------------------------- shape


def _reshape_bwd(ctx, g):
    return (g.reshape(ctx["shape"]),)


@register("reshape", _reshape_bwd)
def _reshape_fwd(ctx, x, shape):
    ctx["shape"] = x.shape
    return x.reshape(shape)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        np.empty(x.shape, dtype=np.bool_).reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return apply("reshape", x, shape=tuple(shape))


def _transpose_bwd(ctx, g):
    return (np.ascontiguousarray(g.transpose(np.argsort(ctx["perm"]))),)


@register("transpose", _transpose_bwd)
def _transpose_fwd(ctx, x, perm):
    ctx["perm"] = perm
    return np.ascontiguousarray(x.transpose(perm))


def transpose(x, perm) -> Tensor:
    x = as_tensor(x)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {perm} for {x.ndim}-D tensor")
    return apply("transpose", x, perm=tuple(perm))


def _concat_bwd(ctx, g):
    return tuple(np.split(g, ctx["cuts"], axis=ctx["axis"]))


@register("concat", _concat_bwd)
def _concat_fwd(ctx, *xs, axis):
    ctx["axis"] = axis
    ctx["cuts"] = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return np.concatenate(xs, axis=axis)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    return apply("concat", *tensors, axis=axis)


def _gather_rows_bwd(ctx, g):
    idx, shape = ctx["idx"], ctx["shape"]
    B, N, D = shape
    flat = (idx + np.arange(B)[:, None, None] * N).reshape(-1)
    dx = np.zeros((B * N, D), dtype=g.dtype)
    np.add.at(dx, flat, g.reshape(-1, D))
    return (dx.reshape(shape),)


@register("gather_rows", _gather_rows_bwd)
def _gather_rows_fwd(ctx, x, idx):
    ctx["idx"], ctx["shape"] = idx, x.shape
    return x[np.arange(x.shape[0])[:, None, None], idx]


def gather_rows(x, idx) -> Tensor:
    """``x[b, idx[b, i, k]]`` for node features ``x`` of shape B×N×D -> B×N×K×D.

    ``idx`` is a constant integer array; no gradient flows into it.
    """
    x = as_tensor(x)
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: features {x.shape} / indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ContractError("gather_rows: index out of range")
    return apply("gather_rows", x, idx=idx.astype(np.intp))


# ---------------------------------------------------------------- normalisation


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        return cls(np.zeros(channels), np.ones(channels), eps, momentum)


def _batch_norm_bwd(ctx, g):
    xhat, inv_std, gamma, red, bshape = ctx["xhat"], ctx["inv_std"], ctx["gamma"], ctx["red"], ctx["bshape"]
    dgamma = (g * xhat).sum(axis=red)
    dbeta = g.sum(axis=red)
    dxhat = g * gamma.reshape(bshape)
    if ctx["training"]:
        n = ctx["count"]
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=red, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=red, keepdims=True))
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


@register("batch_norm", _batch_norm_bwd)
def _batch_norm_fwd(ctx, x, gamma, beta, state, training, axis):
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = tuple(x.shape[axis] if i == axis else 1 for i in range(x.ndim))
    if training:
        count = math.prod(x.shape[i] for i in red)
        mu = x.mean(axis=red, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=red, keepdims=True)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(-1)
        state.running_var = (1 - m) * state.running_var + m * var.reshape(-1) * count / (count - 1)
        ctx["count"] = count
    else:
        mu = state.running_mean.reshape(bshape).astype(x.dtype)
        var = state.running_var.reshape(bshape).astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mu) * inv_std
    ctx.update(xhat=xhat, inv_std=inv_std, gamma=gamma, red=red, bshape=bshape, training=training)
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool, axis: int = 1) -> Tensor:
    """Per-channel batch normalisation with the channel on ``axis``.

    Training mode normalises with biased batch statistics and folds the
    unbiased variance into the running estimate; eval mode uses the running
    estimates only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: {C} channels but gamma {gamma.shape}, beta {beta.shape}")
    if training and x.size // C < 2:
        raise DegenerateBatchError(f"batch_norm needs at least 2 values per channel in training, got {x.size // C}")
    return apply("batch_norm", x, gamma, beta, state=state, training=training, axis=axis)


def batch_norm2d(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects B×C×H×W, got {x.shape}")
    return batch_norm(x, gamma, beta, state, training, axis=1)


# ---------------------------------------------------------------- capsule and classifier primitives


def _squash_bwd(ctx, g):
    s, n, n2 = ctx["s"], ctx["n"], ctx["n2"]
    f = n / (1.0 + n2)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(n > 0, (1.0 - n2) / (1.0 + n2) ** 2 / n, 0.0)
    return (f * g + coef * (s * g).sum(axis=-1, keepdims=True) * s,)


@register("squash", _squash_bwd)
def _squash_fwd(ctx, s):
    n2 = (s * s).sum(axis=-1, keepdims=True)
    n = np.sqrt(n2)
    ctx.update(s=s, n=n, n2=n2)
    # n / (1 + n^2) equals (n^2 / (1 + n^2)) / n and is 0 at the origin
    return s * (n / (1.0 + n2))


def squash(s) -> Tensor:
    """Capsule non-linearity over the last axis; the zero vector maps to zero."""
    return apply("squash", as_tensor(s))


def _vector_norm_bwd(ctx, g):
    x, n = ctx["x"], ctx["n"]
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(n[..., None] > 0, x / n[..., None], 0.0)
    return (g[..., None] * unit,)


@register("vector_norm", _vector_norm_bwd)
def _vector_norm_fwd(ctx, x):
    n = np.sqrt((x * x).sum(axis=-1))
    ctx.update(x=x, n=n)
    return n


def vector_norm(x) -> Tensor:
    """Euclidean norm over the last axis (gradient 0 at the origin)."""
    return apply("vector_norm", as_tensor(x))


def _softmax_bwd(ctx, g):
    y, axis = ctx["y"], ctx["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@register("softmax", _softmax_bwd)
def _softmax_fwd(ctx, x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    ctx.update(y=y, axis=axis)
    return y


def softmax(x, axis: int = -1) -> Tensor:
    return apply("softmax", as_tensor(x), axis=axis)


def _log_softmax_bwd(ctx, g):
    y, axis = ctx["y"], ctx["axis"]
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


@register("log_softmax", _log_softmax_bwd)
def _log_softmax_fwd(ctx, x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ctx.update(y=y, axis=axis)
    return y


def log_softmax(x, axis: int = -1) -> Tensor:
    return apply("log_softmax", as_tensor(x), axis=axis)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=get_dtype()))
