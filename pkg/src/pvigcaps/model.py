"""Full network: pyramid ViG backbone with a pooling-MLP or capsule head."""

from __future__ import annotations

import numpy as np

from . import ops
from .backbone import Backbone, GraphCache, ModelConfig, PoolingHead
from .capsule import CapsuleHead, class_norms, margin_loss
from .exceptions import ConfigError, ContractError
from .layers import Module
from .tensor import Tensor, as_tensor


def cross_entropy(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over the batch."""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = ops.reshape(logits, (1, -1))
    target = np.atleast_1d(np.asarray(target))
    B, c = logits.shape
    if target.shape != (B,) or np.any((target < 0) | (target >= c)):
        raise ContractError(f"expected {B} targets in [0, {c}), got {target!r}")
    onehot = np.zeros((B, c))
    onehot[np.arange(B), target] = 1.0
    picked = ops.sum(ops.mul(ops.log_softmax(logits, axis=-1), onehot), axes=1)
    return ops.negate(ops.mean(picked))


class PViGNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(config, rng)
        if config.head == "capsule":
            self.head = CapsuleHead(rng, config.dims[-1], config.num_classes, config.primary_dim,
                                    config.capsule_dim, config.routing_iters)
        else:
            self.head = PoolingHead(rng, config.dims[-1], config.mlp_hidden, config.num_classes)
        self.graph_cache: GraphCache | None = None

    def __call__(self, images, training: bool = True) -> Tensor:
        """Head output: B×c×d class capsules, or B×c logits for the pooling head."""
        return self.head(self.backbone(images, training, self.graph_cache), training)

    def scores(self, out: Tensor) -> Tensor:
        """Per-class scores used for prediction: capsule norms or logits."""
        return class_norms(out) if self.config.head == "capsule" else out

    def default_loss(self) -> str:
        return "margin" if self.config.head == "capsule" else "cross-entropy"

    def loss(self, out: Tensor, target, kind: str | None = None, margins=(0.9, 0.1, 0.5)) -> Tensor:
        kind = kind or self.default_loss()
        if kind == "margin":
            if self.config.head != "capsule":
                raise ConfigError("margin loss needs the capsule head")
            return margin_loss(class_norms(out), target, *margins)
        if kind == "cross-entropy":
            return cross_entropy(self.scores(out), target)
        raise ConfigError(f"unknown loss kind {kind!r}")

    def stage_shapes(self, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
        """Run a forward pass on zeros and report each stage's output shape."""
        cfg = self.config
        shapes: list = []
        images = np.zeros((batch, cfg.in_channels, cfg.height, cfg.width))
        out = self.head(self.backbone(images, False, None, shapes), False)
        shapes.append(("head", out.shape))
        return shapes
