"""Central finite-difference verification of tape gradients.

:func:`grad_check` compares :func:`pvigcaps.tensor.backward` against
``(f(x + eps) - f(x - eps)) / (2 eps)`` per coordinate, with the relative
error ``|a - n| / max(1, |a|, |n|)``.

:data:`OP_CASES` holds one random-instance factory per registered op; the
suite runner checks that it covers :data:`pvigcaps.tensor.OPS` exactly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .exceptions import ContractError, NumericError
from .tensor import OPS, Tape, Tensor, backward, get_precision


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps the input tensors to a scalar tensor.  Every input is
    checked; ``max_coords`` limits each input to a random coordinate subset
    drawn from ``rng``.
    """
    if get_precision() != "f64":
        raise ContractError("grad_check requires 64-bit precision")
    for t in inputs:
        t.requires_grad = True
    with Tape():
        out = f(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: f is not finite at the base point")
    if out.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    grads = backward(out) if out._tape is not None else {}
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        analytic = grads.get(t.id, np.zeros_like(t.data)) if grads else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = f(*inputs).data.item()
            flat[c] = orig - eps
            down = f(*inputs).data.item()
            flat[c] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("grad_check: f is not finite near the base point")
            numeric = (up - down) / (2 * eps)
            a = float(a_flat[c])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = err if err > worst else worst
    return worst


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(y, Tensor(w)))


def _t(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape))


def _away_from_zero(rng, *shape, gap=0.1):
    x = rng.uniform(gap, 1.5, size=shape)
    return Tensor(x * rng.choice([-1.0, 1.0], size=shape))


def _dims(rng, n, lo=1, hi=6):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


def _binary_case(kind):
    def case(rng):
        shape = _dims(rng, int(rng.integers(1, 4)))
        bshape = tuple(1 if rng.random() < 0.3 else n for n in shape)[int(rng.integers(0, len(shape))):]
        a, b = _t(rng, *shape), _t(rng, *bshape)
        w = rng.normal(size=shape)
        return (lambda a, b: _weighted_sum(ops.apply_binary(a, b, kind), w)), [a, b]
    return case


def _unary_case(kind):
    def case(rng):
        shape = _dims(rng, int(rng.integers(1, 4)))
        if kind in ("log", "sqrt"):
            x = _t(rng, *shape, low=0.2, high=2.0)
        elif kind == "relu":
            x = _away_from_zero(rng, *shape)
        else:
            x = _t(rng, *shape, low=-2.0, high=2.0)
        w = rng.normal(size=shape)
        return (lambda x: _weighted_sum(ops.apply_unary(x, kind), w)), [x]
    return case


def _reduce_case(kind):
    def case(rng):
        shape = _dims(rng, int(rng.integers(1, 4)))
        n_ax = int(rng.integers(1, len(shape) + 1))
        axes = tuple(sorted(rng.choice(len(shape), size=n_ax, replace=False).tolist()))
        keep = bool(rng.random() < 0.5)
        # distinct values keep max away from ties
        x = Tensor(rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape))
        out_shape = ops.reduce(x, kind, axes, keep).shape
        w = rng.normal(size=out_shape)
        return (lambda x: _weighted_sum(ops.reduce(x, kind, axes, keep), w)), [x]
    return case


def _matmul_case(rng):
    m, k, n = _dims(rng, 3)
    a, b = _t(rng, m, k), _t(rng, k, n)
    w = rng.normal(size=(m, n))
    return (lambda a, b: _weighted_sum(ops.matmul(a, b), w)), [a, b]


def _einsum_case(rng):
    specs = ["ij,jk->ik", "bmp,mpd->bmd", "bmc,bmcd->bcd", "bmcd,bcd->bmc", "ij,ij->i"]
    spec = specs[int(rng.integers(len(specs)))]
    lhs, out = spec.split("->")
    sa, sb = lhs.split(",")
    size = {c: int(rng.integers(1, 5)) for c in set(sa + sb)}
    a = _t(rng, *[size[c] for c in sa])
    b = _t(rng, *[size[c] for c in sb])
    w = rng.normal(size=[size[c] for c in out])
    return (lambda a, b: _weighted_sum(ops.einsum(spec, a, b), w)), [a, b]


def _conv2d_case(rng):
    B, C, O = _dims(rng, 3, 1, 3)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    H, W = _dims(rng, 2, max(k, 2), 6)
    x, w, b = _t(rng, B, C, H, W), _t(rng, O, C, k, k), _t(rng, O)
    out_shape = ops.conv2d(x, w, b, stride, pad).shape
    r = rng.normal(size=out_shape)
    return (lambda x, w, b: _weighted_sum(ops.conv2d(x, w, b, stride, pad), r)), [x, w, b]


def _reshape_case(rng):
    shape = _dims(rng, 3)
    new = (shape[0] * shape[1], shape[2])
    r = rng.normal(size=new)
    return (lambda x: _weighted_sum(ops.reshape(x, new), r)), [_t(rng, *shape)]


def _transpose_case(rng):
    shape = _dims(rng, 3)
    perm = tuple(rng.permutation(3).tolist())
    r = rng.normal(size=tuple(shape[p] for p in perm))
    return (lambda x: _weighted_sum(ops.transpose(x, perm), r)), [_t(rng, *shape)]


def _concat_case(rng):
    a_shape = _dims(rng, 2)
    b_shape = (a_shape[0], int(rng.integers(1, 6)))
    r = rng.normal(size=(a_shape[0], a_shape[1] + b_shape[1]))
    return (lambda a, b: _weighted_sum(ops.concat([a, b], axis=1), r)), [_t(rng, *a_shape), _t(rng, *b_shape)]


def _gather_rows_case(rng):
    B, N, D, K = _dims(rng, 4)
    idx = rng.integers(0, N, size=(B, N, K))
    r = rng.normal(size=(B, N, K, D))
    return (lambda x: _weighted_sum(ops.gather_rows(x, idx), r)), [_t(rng, B, N, D)]


def _batch_norm_case(rng):
    B, C, H, W = _dims(rng, 4, 1, 4)
    B = max(B, 2)
    training = bool(rng.random() < 0.7)
    state = ops.BatchNormState.create(C)
    state.running_mean = rng.normal(size=C)
    state.running_var = rng.uniform(0.5, 2.0, size=C)
    x = _t(rng, B, C, H, W, low=-2, high=2)
    g, b = _t(rng, C, low=0.5, high=1.5), _t(rng, C)
    r = rng.normal(size=(B, C, H, W))
    return (lambda x, g, b: _weighted_sum(ops.batch_norm2d(x, g, b, state, training), r)), [x, g, b]


def _squash_case(rng):
    shape = _dims(rng, 2)
    r = rng.normal(size=shape)
    return (lambda s: _weighted_sum(ops.squash(s), r)), [_t(rng, *shape, low=-2, high=2)]


def _vector_norm_case(rng):
    shape = _dims(rng, 2)
    r = rng.normal(size=shape[:-1])
    return (lambda x: _weighted_sum(ops.vector_norm(x), r)), [_away_from_zero(rng, *shape)]


def _softmax_case(rng, name="softmax"):
    shape = _dims(rng, 2)
    axis = int(rng.integers(0, 2))
    fn = ops.softmax if name == "softmax" else ops.log_softmax
    r = rng.normal(size=shape)
    return (lambda x: _weighted_sum(fn(x, axis), r)), [_t(rng, *shape, low=-3, high=3)]


OP_CASES: dict[str, Callable] = {
    "add": _binary_case("add"),
    "sub": _binary_case("sub"),
    "mul": _binary_case("mul"),
    "matmul": _matmul_case,
    "einsum": _einsum_case,
    "conv2d": _conv2d_case,
    "gelu": _unary_case("gelu"),
    "relu": _unary_case("relu"),
    "exp": _unary_case("exp"),
    "log": _unary_case("log"),
    "sqrt": _unary_case("sqrt"),
    "negate": _unary_case("negate"),
    "sum": _reduce_case("sum"),
    "mean": _reduce_case("mean"),
    "max": _reduce_case("max"),
    "reshape": _reshape_case,
    "transpose": _transpose_case,
    "concat": _concat_case,
    "gather_rows": _gather_rows_case,
    "batch_norm": _batch_norm_case,
    "squash": _squash_case,
    "vector_norm": _vector_norm_case,
    "softmax": _softmax_case,
    "log_softmax": lambda rng: _softmax_case(rng, "log_softmax"),
}


def check_op(name: str, instances: int = 20, seed: int = 0, eps: float = 1e-5) -> float:
    """Worst grad_check error of op ``name`` over random small instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        f, inputs = OP_CASES[name](rng)
        worst = max(worst, grad_check(f, inputs, eps=eps))
    return worst


def check_all_ops(instances: int = 20, seed: int = 0) -> dict[str, float]:
    names = [n for n, op in OPS.items() if op.differentiable]
    missing = set(names) - set(OP_CASES)
    if missing:
        raise ContractError(f"no gradient-check case for ops: {sorted(missing)}")
    return {n: check_op(n, instances, seed) for n in names}


# ---------------------------------------------------------------- composite blocks

OP_THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3


def _block_check(module, x: Tensor, call, rng, max_coords: int | None = 40) -> float:
    params = module.parameters()
    out_shape = call(x).shape
    w = rng.normal(size=out_shape)
    return grad_check(lambda *_: _weighted_sum(call(x), w), [x, *params], max_coords=max_coords, rng=rng)


def check_blocks(seed: int = 0) -> dict[str, float]:
    """Gradient check of each composite block at micro-like sizes.

    Neighbour tables are computed once at the base point and then held fixed,
    so the check sees the smooth function of the features.
    """
    from .backbone import FFN, Downsample, GraphCache, Grapher, PoolingHead, Stem
    from .capsule import CapsuleHead, class_norms, margin_loss
    from .model import cross_entropy

    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}

    stem = Stem(rng, 3, (4, 8, 8))
    out["stem"] = _block_check(stem, _t(rng, 2, 3, 8, 8), lambda x: stem(x, True), rng)

    grapher = Grapher(rng, 8, 2, 3, layer=5)
    cache = GraphCache()
    out["grapher"] = _block_check(grapher, _t(rng, 2, 9, 8), lambda x: grapher(x, True, cache), rng)

    ffn = FFN(rng, 8, 4)
    out["ffn"] = _block_check(ffn, _t(rng, 2, 6, 8), lambda x: ffn(x, True), rng)

    down = Downsample(rng, 4, 8)
    out["downsample"] = _block_check(down, _t(rng, 2, 4, 4, 4), lambda x: down(x, True), rng)

    head = CapsuleHead(rng, 16, 3, primary_dim=8, capsule_dim=4, iterations=3, init_std=0.5)
    out["capsule_head"] = _block_check(head, _t(rng, 2, 16, 2, 2), head, rng)

    pool = PoolingHead(rng, 8, 6, 3)
    out["pooling_head"] = _block_check(pool, _t(rng, 2, 8, 2, 2), pool, rng)

    target = np.array([0, 2, 1])
    caps = _t(rng, 3, 3, 4, low=-0.6, high=0.6)
    out["margin_loss"] = grad_check(lambda v: margin_loss(class_norms(v), target), [caps])
    logits = _t(rng, 3, 3, low=-2, high=2)
    out["cross_entropy"] = grad_check(lambda z: cross_entropy(z, target), [logits])
    return out


def check_end_to_end(preset: str = "micro", batch: int = 2, seed: int = 0,
                     coords_per_tensor: int = 4) -> float:
    """Margin-loss gradient of a fresh model w.r.t. input and all parameters.

    A random subset of ``coords_per_tensor`` coordinates is checked in each
    parameter tensor, with graphs frozen at the base point.
    """
    from .backbone import ModelConfig, frozen_graphs
    from .model import PViGNet

    config = ModelConfig.preset(preset)
    model = PViGNet(config, seed)
    rng = np.random.default_rng(seed + 1)
    images = _t(rng, batch, config.in_channels, config.height, config.width)
    target = rng.integers(0, config.num_classes, size=batch)
    params = model.parameters()
    with frozen_graphs(model):
        return grad_check(lambda *_: model.loss(model(images, training=True), target),
                          [images, *params], max_coords=coords_per_tensor, rng=rng)
