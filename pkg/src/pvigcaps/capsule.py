"""Capsule classification head: primary capsules, routing-by-agreement, margin loss."""

from __future__ import annotations

import numpy as np

from . import ops
from .exceptions import ConfigError, ContractError, ShapeError
from .layers import Module
from .tensor import Tensor, as_tensor, parameter

M_PLUS, M_MINUS, LAMBDA = 0.9, 0.1, 0.5


def squash(s) -> Tensor:
    """Rescale each vector (last axis) to norm ``|s|^2 / (1 + |s|^2)``."""
    return ops.squash(s)


def primary_capsules(features, capsule_dim: int = 8) -> Tensor:
    """Cut B×C×h×w features into squashed capsules of shape B×(C/dim·h·w)×dim.

    Capsules are ordered position-major: all capsule types of spatial
    location 0 come first.
    """
    features = as_tensor(features)
    B, C, h, w = features.shape
    if C % capsule_dim:
        raise ConfigError(f"{C} channels cannot be split into capsules of dim {capsule_dim}")
    u = ops.transpose(features, (0, 2, 3, 1))
    u = ops.reshape(u, (B, h * w * (C // capsule_dim), capsule_dim))
    return ops.squash(u)


def predictions(u, W) -> Tensor:
    """Per-pair predictions ``u_hat[b, i, j] = u[b, i] @ W[i, j]``.

    ``u`` is B×M×p (or M×p), ``W`` is M×c×p×d; the result is B×M×c×d.
    """
    u, W = as_tensor(u), as_tensor(W)
    if u.ndim == 2:
        u = ops.reshape(u, (1,) + u.shape)
    if W.ndim != 4 or W.shape[0] != u.shape[1] or W.shape[2] != u.shape[2]:
        raise ShapeError(f"capsule transform {W.shape} does not fit inputs {u.shape}")
    return ops.einsum("bmq,mcqd->bmcd", u, W)


def route(u_hat, iterations: int = 3, trace: list | None = None) -> Tensor:
    """Routing-by-agreement over predictions ``u_hat`` (B×M×c×d) -> B×c×d.

    Logits start at zero.  Each iteration takes a softmax over classes for
    every input capsule, squashes the coupling-weighted prediction sums, and
    raises each logit by the agreement ``u_hat . v``.  The logit update after
    the last iteration cannot change the output and is skipped.  Couplings
    of every iteration are appended to ``trace`` when given.
    """
    if iterations < 1:
        raise ConfigError(f"routing needs at least one iteration, got {iterations}")
    u_hat = as_tensor(u_hat)
    B, M, c, _ = u_hat.shape
    logits = Tensor(np.zeros((B, M, c), dtype=u_hat.data.dtype))
    for r in range(iterations):
        coupling = ops.softmax(logits, axis=-1)
        if trace is not None:
            trace.append(coupling.data)
        v = ops.squash(ops.einsum("bmc,bmcd->bcd", coupling, u_hat))
        if r + 1 < iterations:
            logits = ops.add(logits, ops.einsum("bmcd,bcd->bmc", u_hat, v))
    return v


def dynamic_routing(primary, W, iterations: int = 3, trace: list | None = None) -> Tensor:
    """Class capsules from primary capsules ``primary`` (M×p or B×M×p)."""
    primary = as_tensor(primary)
    out = route(predictions(primary, W), iterations, trace)
    return ops.reshape(out, out.shape[1:]) if primary.ndim == 2 else out


def class_norms(V) -> Tensor:
    return ops.vector_norm(V)


def predict(norms) -> np.ndarray:
    """Index of the largest norm along the last axis; ties go to the lowest index."""
    norms = norms.data if isinstance(norms, Tensor) else np.asarray(norms)
    return np.argmax(norms, axis=-1)


def margin_loss(norms, target, m_plus: float = M_PLUS, m_minus: float = M_MINUS,
                lam: float = LAMBDA) -> Tensor:
    """Margin loss summed over classes and averaged over the batch.

    ``norms`` is c or B×c; ``target`` a class index or B indices.
    """
    norms = as_tensor(norms)
    if norms.ndim == 1:
        norms = ops.reshape(norms, (1, -1))
    target = np.atleast_1d(np.asarray(target))
    B, c = norms.shape
    if target.shape != (B,) or not np.issubdtype(target.dtype, np.integer):
        raise ContractError(f"expected {B} integer targets, got {target!r}")
    if np.any((target < 0) | (target >= c)):
        raise ContractError(f"target out of range for {c} classes: {target}")
    onehot = np.zeros((B, c))
    onehot[np.arange(B), target] = 1.0
    present = ops.relu(ops.sub(m_plus, norms))
    absent = ops.relu(ops.sub(norms, m_minus))
    per = ops.add(ops.mul(ops.mul(present, present), onehot),
                  ops.mul(ops.mul(absent, absent), lam * (1.0 - onehot)))
    return ops.mean(ops.sum(per, axes=1))


class CapsuleHead(Module):
    """Primary capsules from the last stage, routed to one capsule per class.

    The transform ``weight`` (T×c×p×d) is indexed by capsule type and class
    and shared across spatial positions.
    """

    def __init__(self, rng, channels: int, num_classes: int, primary_dim: int = 8,
                 capsule_dim: int = 16, iterations: int = 3, init_std: float = 0.1):
        if channels % primary_dim:
            raise ConfigError(f"{channels} channels cannot be split into capsules of dim {primary_dim}")
        if iterations < 1:
            raise ConfigError(f"routing needs at least one iteration, got {iterations}")
        self.types = channels // primary_dim
        self.weight = parameter(rng.normal(0.0, init_std, size=(self.types, num_classes, primary_dim, capsule_dim)))
        self.primary_dim, self.iterations = primary_dim, iterations

    def __call__(self, features, training: bool = True, trace: list | None = None) -> Tensor:
        u = primary_capsules(features, self.primary_dim)
        B, M, p = u.shape
        positions = M // self.types
        u = ops.reshape(u, (B, positions, self.types, p))
        u_hat = ops.einsum("bptq,tcqd->bptcd", u, self.weight)
        _, _, _, c, d = u_hat.shape
        return route(ops.reshape(u_hat, (B, M, c, d)), self.iterations, trace)
