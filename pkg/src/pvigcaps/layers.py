"""Minimal parameter containers shared by the backbone and heads."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .ops import BatchNormState
from .tensor import Tensor, get_dtype, parameter


class Module:
    """Parameters, batch-norm buffers and child modules, named by attribute.

    Names follow attribute insertion order, so two models built from the
    same config always enumerate parameters identically.
    """

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, BatchNormState):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, bn in self.named_buffers():
            state[f"{name}.running_mean"] = bn.running_mean
            state[f"{name}.running_var"] = bn.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .exceptions import CheckpointMismatchError

        own = self.state_dict()
        if set(own) != set(state):
            extra, missing = sorted(set(state) - set(own)), sorted(set(own) - set(state))
            raise CheckpointMismatchError(f"state keys differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            if own[name].shape != np.shape(arr):
                raise CheckpointMismatchError(f"{name}: expected shape {own[name].shape}, got {np.shape(arr)}")
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.data = np.array(state[name], dtype=get_dtype())
        for name, bn in self.named_buffers():
            bn.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))


class BatchNorm(Module):
    def __init__(self, channels: int, axis: int = 1):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.state = BatchNormState.create(channels)
        self.axis = axis

    def __call__(self, x, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.state, training, axis=self.axis)


class ConvBN(Module):
    """3×3 (or k×k) convolution followed by batch norm and an optional GELU."""

    def __init__(self, rng, cin: int, cout: int, stride: int, kernel: int = 3, act: bool = True):
        self.weight = he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel)
        self.bias = parameter(np.zeros(cout))
        self.bn = BatchNorm(cout)
        self.stride, self.padding, self.act = stride, kernel // 2, act

    def __call__(self, x, training: bool) -> Tensor:
        y = self.bn(ops.conv2d(x, self.weight, self.bias, self.stride, self.padding), training)
        return ops.gelu(y) if self.act else y


class Linear(Module):
    """Affine map on the last axis of a (..., in) tensor."""

    def __init__(self, rng, fan_in: int, fan_out: int, bias: bool = True):
        self.weight = he_normal(rng, (fan_in, fan_out), fan_in)
        self.bias = parameter(np.zeros(fan_out)) if bias else None
        self.fan_in, self.fan_out = fan_in, fan_out

    def __call__(self, x) -> Tensor:
        lead = x.shape[:-1]
        y = ops.matmul(ops.reshape(x, (-1, self.fan_in)), self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return ops.reshape(y, lead + (self.fan_out,))
