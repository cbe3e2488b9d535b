"""Pyramid Vision GNN backbone: stem, Grapher/FFN blocks, downsampling, census."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .exceptions import ConfigError, ContractError, ShapeError
from .graph import NeighborTable, dilation_for_layer, effective_k, knn_indices
from .layers import BatchNorm, ConvBN, Linear, Module
from .tensor import Tensor, as_tensor, parameter

HEAD_KINDS = ("capsule", "pooling-mlp")


@dataclass(frozen=True)
class StageConfig:
    dim: int
    ffn_ratio: int
    k: int
    depth: int
    stride: int


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a pyramid ViG with either head.

    The defaults are the Tiny model; :meth:`micro` is a desk-scale variant
    for fast verification.
    """

    height: int = 256
    width: int = 256
    in_channels: int = 3
    dims: tuple[int, ...] = (48, 96, 240, 384)
    depths: tuple[int, ...] = (2, 2, 6, 2)
    ffn_ratio: int = 4
    k: int = 9
    num_heads: int = 4
    head: str = "capsule"
    num_classes: int = 7
    pos_embed: bool = True
    primary_dim: int = 8
    capsule_dim: int = 16
    routing_iters: int = 3
    mlp_hidden: int = 1024
    stem_channels: tuple[int, ...] | None = None

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        base = cls(height=32, width=32, dims=(8, 16, 24, 32), depths=(2, 2, 2, 2), k=3,
                   num_heads=2, num_classes=3, capsule_dim=8, mlp_hidden=64)
        return replace(base, **overrides)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            return {"tiny": cls.tiny, "micro": cls.micro}[name](**overrides)
        except KeyError:
            raise ConfigError(f"unknown preset {name!r} (expected tiny or micro)") from None

    @property
    def stem_plan(self) -> tuple[int, int, int]:
        if self.stem_channels is not None:
            return tuple(self.stem_channels)
        d = self.dims[0]
        return (max(1, d // 2), d, d)

    @property
    def stages(self) -> list[StageConfig]:
        return [StageConfig(d, self.ffn_ratio, self.k, n, 4 * 2 ** i)
                for i, (d, n) in enumerate(zip(self.dims, self.depths))]

    def stage_hw(self, i: int) -> tuple[int, int]:
        s = 4 * 2 ** i
        return self.height // s, self.width // s

    def validate(self) -> "ModelConfig":
        if self.height <= 0 or self.width <= 0 or self.height % 32 or self.width % 32:
            raise ConfigError(f"input {self.height}×{self.width} must be positive multiples of 32")
        if len(self.dims) != 4 or len(self.depths) != 4:
            raise ConfigError("a pyramid needs exactly four stage dims and depths")
        if any(d <= 0 for d in self.dims) or any(n < 1 for n in self.depths):
            raise ConfigError("stage dims must be positive and depths at least 1")
        if self.num_heads < 1 or any(d % self.num_heads for d in self.dims):
            raise ConfigError(f"head count {self.num_heads} must divide every stage dim {self.dims}")
        if self.num_classes < 2:
            raise ConfigError("at least two classes are required")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if self.k < 1 or self.ffn_ratio < 1:
            raise ConfigError("K and the FFN ratio must be positive")
        if self.head == "capsule":
            if self.dims[-1] % self.primary_dim:
                raise ConfigError(f"last stage dim {self.dims[-1]} not divisible by primary capsule dim {self.primary_dim}")
            if self.routing_iters < 1 or self.capsule_dim < 1:
                raise ConfigError("routing iterations and capsule dim must be positive")
        if len(self.stem_plan) != 3 or self.stem_plan[-1] != self.dims[0]:
            raise ConfigError("stem plan needs three convolutions ending at the first stage dim")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("dims", "depths", "stem_channels"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------- functional pieces


def max_relative_aggregate(X, nbrs) -> Tensor:
    """Rows ``[x_i, max_j (x_j - x_i)]`` over the neighbours of each node.

    ``X`` is N×D with a :class:`NeighborTable`, or B×N×D with a B×N×K index
    array.  An empty neighbourhood contributes zeros.
    """
    X = as_tensor(X)
    idx = nbrs.indices if isinstance(nbrs, NeighborTable) else np.asarray(nbrs)
    single = X.ndim == 2
    if single:
        X = ops.reshape(X, (1,) + X.shape)
        idx = idx[None]
    B, N, D = X.shape
    if idx.ndim != 3 or idx.shape[:2] != (B, N):
        raise ContractError(f"neighbour table {idx.shape[-2:]} built for a different node set than {N} nodes")
    if idx.shape[2] == 0:
        rel = Tensor(np.zeros((B, N, D), dtype=X.data.dtype))
    else:
        diff = ops.sub(ops.gather_rows(X, idx), ops.reshape(X, (B, N, 1, D)))
        rel = ops.max(diff, axes=2)
    out = ops.concat([X, rel], axis=-1)
    return ops.reshape(out, (N, 2 * D)) if single else out


def multi_head_update(X2, head_weights) -> Tensor:
    """Split rows of width 2D into h contiguous chunks, map each by its own matrix.

    ``head_weights`` is h×(2D/h)×(D/h); the output width is D.
    """
    X2, head_weights = as_tensor(X2), as_tensor(head_weights)
    h, chunk, out = head_weights.shape
    width = X2.shape[-1]
    if width % h or width // h != chunk:
        raise ShapeError(f"cannot split width {width} into {h} heads of width {chunk}")
    lead = X2.shape[:-1]
    rows = ops.reshape(X2, (-1, h, chunk))
    y = ops.einsum("nhi,hio->nho", rows, head_weights)
    return ops.reshape(y, lead + (h * out,))


def to_nodes(F) -> Tensor:
    """B×C×H×W feature map -> B×(H·W)×C node matrix (row-major positions)."""
    B, C, H, W = F.shape
    return ops.reshape(ops.transpose(F, (0, 2, 3, 1)), (B, H * W, C))


def to_map(X, H: int, W: int) -> Tensor:
    B, N, C = X.shape
    return ops.transpose(ops.reshape(X, (B, H, W, C)), (0, 3, 1, 2))


# ---------------------------------------------------------------- blocks


class GraphCache:
    """Holds neighbour indices per layer so repeated forwards reuse one graph."""

    def __init__(self):
        self.tables: dict[int, np.ndarray] = {}


class Grapher(Module):
    def __init__(self, rng, dim: int, heads: int, k: int, layer: int):
        self.w_in = Linear(rng, dim, dim)
        self.bn_in = BatchNorm(dim, axis=-1)
        chunk = 2 * dim // heads
        self.head_weights = parameter(rng.normal(0.0, math.sqrt(1.0 / chunk), size=(heads, chunk, dim // heads)))
        self.w_out = Linear(rng, dim, dim)
        self.bn_out = BatchNorm(dim, axis=-1)
        self.k, self.layer = k, layer
        self.dilation = dilation_for_layer(layer)

    def neighbors(self, h: np.ndarray, cache: GraphCache | None) -> np.ndarray:
        if cache is not None and self.layer in cache.tables:
            return cache.tables[self.layer]
        B, N, _ = h.shape
        idx = knn_indices(h, self.k, self.dilation) if N > 1 else np.zeros((B, N, 0), dtype=np.intp)
        if cache is not None:
            cache.tables[self.layer] = idx
        return idx

    def __call__(self, X, training: bool, cache: GraphCache | None = None) -> Tensor:
        h = self.bn_in(self.w_in(X), training)
        idx = self.neighbors(h.data, cache)
        g = multi_head_update(max_relative_aggregate(h, idx), self.head_weights)
        y = self.bn_out(self.w_out(ops.gelu(g)), training)
        return ops.add(y, X)


class FFN(Module):
    def __init__(self, rng, dim: int, ratio: int):
        self.fc1 = Linear(rng, dim, dim * ratio)
        self.bn1 = BatchNorm(dim * ratio, axis=-1)
        self.fc2 = Linear(rng, dim * ratio, dim)
        self.bn2 = BatchNorm(dim, axis=-1)

    def __call__(self, Y, training: bool) -> Tensor:
        hidden = ops.gelu(self.bn1(self.fc1(Y), training))
        return ops.add(self.bn2(self.fc2(hidden), training), Y)


class Stem(Module):
    def __init__(self, rng, in_channels: int, plan):
        c1, c2, c3 = plan
        self.convs = [ConvBN(rng, in_channels, c1, 2), ConvBN(rng, c1, c2, 2), ConvBN(rng, c2, c3, 1)]

    def __call__(self, image, training: bool) -> Tensor:
        image = as_tensor(image)
        if image.ndim != 4 or image.shape[2] % 4 or image.shape[3] % 4:
            raise ShapeError(f"stem needs B×C×H×W with H, W divisible by 4, got {image.shape}")
        x = image
        for conv in self.convs:
            x = conv(x, training)
        return x


class Downsample(Module):
    def __init__(self, rng, cin: int, cout: int):
        self.conv = ConvBN(rng, cin, cout, 2, act=False)

    def __call__(self, F, training: bool) -> Tensor:
        if F.shape[2] % 2 or F.shape[3] % 2:
            raise ShapeError(f"downsample needs even spatial extents, got {F.shape[2:]}")
        return self.conv(F, training)


class Block(Module):
    def __init__(self, rng, stage: StageConfig, heads: int, layer: int):
        self.grapher = Grapher(rng, stage.dim, heads, stage.k, layer)
        self.ffn = FFN(rng, stage.dim, stage.ffn_ratio)

    def __call__(self, X, training, cache=None) -> Tensor:
        return self.ffn(self.grapher(X, training, cache), training)


class Backbone(Module):
    """Stem -> [blocks] -> Down -> [blocks] -> Down -> [blocks] -> Down -> [blocks]."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.stem = Stem(rng, config.in_channels, config.stem_plan)
        h1, w1 = config.stage_hw(0)
        self.pos_embed = parameter(np.zeros((h1 * w1, config.dims[0]))) if config.pos_embed else None
        self.stages: list[Module] = []
        self.downsamples: list[Module] = []
        layer = 0
        for i, stage in enumerate(config.stages):
            if i:
                self.downsamples.append(Downsample(rng, config.dims[i - 1], stage.dim))
            blocks = _Stage()
            for _ in range(stage.depth):
                layer += 1
                blocks.blocks.append(Block(rng, stage, config.num_heads, layer))
            self.stages.append(blocks)

    def __call__(self, image, training: bool, cache: GraphCache | None = None,
                 shapes: list | None = None) -> Tensor:
        F = self.stem(image, training)
        if shapes is not None:
            shapes.append(("stem", F.shape))
        for i, stage in enumerate(self.stages):
            if i:
                F = self.downsamples[i - 1](F, training)
            _, _, H, W = F.shape
            X = to_nodes(F)
            if i == 0 and self.pos_embed is not None:
                X = ops.add(X, self.pos_embed)
            for block in stage.blocks:
                X = block(X, training, cache)
            F = to_map(X, H, W)
            if shapes is not None:
                shapes.append((f"stage{i + 1}", F.shape))
        return F


class _Stage(Module):
    def __init__(self):
        self.blocks: list[Block] = []


class PoolingHead(Module):
    """Global average pool -> linear(hidden) -> GELU -> linear(classes)."""

    def __init__(self, rng, channels: int, hidden: int, num_classes: int):
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, num_classes)

    def __call__(self, F, training: bool = True) -> Tensor:
        pooled = ops.mean(F, axes=(2, 3))
        return self.fc2(ops.gelu(self.fc1(pooled)))


@contextmanager
def frozen_graphs(model):
    """Reuse the neighbour tables of the first forward inside this block."""
    old = getattr(model, "graph_cache", None)
    model.graph_cache = GraphCache()
    try:
        yield model.graph_cache
    finally:
        model.graph_cache = old


# ---------------------------------------------------------------- accounting


@dataclass
class CensusEntry:
    name: str
    params: int
    flops: int
    output_shape: tuple[int, ...]


@dataclass
class Census:
    entries: list[CensusEntry] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def flops(self) -> int:
        return sum(e.flops for e in self.entries)

    def table(self) -> str:
        lines = [f"{'part':<10} {'output':<16} {'params':>12} {'GFLOPs':>10}"]
        for e in self.entries:
            shape = "×".join(map(str, e.output_shape))
            lines.append(f"{e.name:<10} {shape:<16} {e.params:>12,d} {e.flops / 1e9:>10.4f}")
        lines.append(f"{'total':<10} {'':<16} {self.params:>12,d} {self.flops / 1e9:>10.4f}")
        return "\n".join(lines)


def _conv_cost(cin, cout, k, ho, wo):
    params = cout * cin * k * k + cout + 2 * cout
    return params, 2 * cout * cin * k * k * ho * wo


def count_params_flops(config: ModelConfig) -> Census:
    """Exact parameter census and FLOPs (2 × multiply-accumulates) per part.

    FLOPs cover convolutions, linear maps, the per-Grapher KNN distance
    matrix and the capsule prediction/routing products; normalisation,
    activations and the max aggregation are not counted.
    """
    config.validate()
    census = Census()
    H, W = config.height, config.width
    params = flops = 0
    cin, h, w = config.in_channels, H, W
    for cout, stride in zip(config.stem_plan, (2, 2, 1)):
        h, w = h // stride, w // stride
        p, f = _conv_cost(cin, cout, 3, h, w)
        params, flops, cin = params + p, flops + f, cout
    census.entries.append(CensusEntry("stem", params, flops, (config.dims[0], h, w)))
    for i, stage in enumerate(config.stages):
        params = flops = 0
        h, w = config.stage_hw(i)
        n, d = h * w, stage.dim
        if i:
            params, flops = _conv_cost(config.dims[i - 1], d, 3, h, w)
        elif config.pos_embed:
            params += n * d
        e = d * stage.ffn_ratio
        grapher_p = 2 * (d * d + d + 2 * d) + 2 * d * (d // config.num_heads)
        grapher_f = 2 * (2 * n * d * d + n * n * d + n * 2 * d * (d // config.num_heads))
        ffn_p = d * e + e + 2 * e + e * d + d + 2 * d
        ffn_f = 2 * 2 * n * d * e
        params += stage.depth * (grapher_p + ffn_p)
        flops += stage.depth * (grapher_f + ffn_f)
        census.entries.append(CensusEntry(f"stage{i + 1}", params, flops, (d, h, w)))
    h, w = config.stage_hw(3)
    c, last = config.num_classes, config.dims[-1]
    if config.head == "pooling-mlp":
        hid = config.mlp_hidden
        p = last * hid + hid + hid * c + c
        f = 2 * (last * hid + hid * c)
        census.entries.append(CensusEntry("head", p, f, (c,)))
    else:
        types, pd, d = last // config.primary_dim, config.primary_dim, config.capsule_dim
        m = types * h * w
        p = types * c * pd * d
        macs = m * c * pd * d + config.routing_iters * m * c * d + (config.routing_iters - 1) * m * c * d
        census.entries.append(CensusEntry("head", p, 2 * macs, (c, d)))
    return census
