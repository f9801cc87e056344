"""Standardization and rescaling stages, plus the four baseline normalizers.

``standardize`` maps a feature tensor to zero mean and unit variance per
partition; ``rescale`` restores representational freedom with a learned
per-channel affine map. BN/LN/IN/GN differ only in the partition over which
the statistics are taken.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import PartitionError, ShapeError


@dataclass(frozen=True)
class PartitionScheme:
    """Rule mapping tensor elements to statistic groups."""

    kind: str  # 'batch' | 'layer' | 'instance' | 'group'
    num_groups: int | None = None

    def __post_init__(self):
        if self.kind not in ("batch", "layer", "instance", "group"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.kind == "group" and (self.num_groups is None or self.num_groups < 1):
            raise PartitionError("group scheme needs a positive group count")

    @classmethod
    def batch(cls):
        return cls("batch")

    @classmethod
    def layer(cls):
        return cls("layer")

    @classmethod
    def instance(cls):
        return cls("instance")

    @classmethod
    def group(cls, num_groups: int):
        return cls("group", num_groups)

    @property
    def instance_level(self) -> bool:
        return self.kind in ("layer", "instance", "group")


@dataclass
class NormStats:
    """Per-partition moments used by the standardization stage."""

    mu: np.ndarray
    gamma: np.ndarray
    epsilon: float


@dataclass
class AffineParams:
    """Per-channel rescaling weight and bias (also the ILM base parameters)."""

    omega: Variable
    beta: Variable

    @classmethod
    def init(cls, channels: int, dtype=np.float64) -> "AffineParams":
        return cls(
            omega=Variable(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Variable(np.zeros(channels, dtype=dtype), requires_grad=True),
        )


@dataclass
class RunningStats:
    """Exponential moving average of BN batch statistics for eval mode."""

    running_mu: np.ndarray | None = None
    running_gamma: np.ndarray | None = None
    momentum: float = 0.1
    initialized: bool = False

    def update(self, mu: np.ndarray, gamma: np.ndarray) -> None:
        if not self.initialized:
            self.running_mu = mu.copy()
            self.running_gamma = gamma.copy()
            self.initialized = True
        else:
            m = self.momentum
            self.running_mu = (1 - m) * self.running_mu + m * mu
            self.running_gamma = (1 - m) * self.running_gamma + m * gamma


def _as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(np.asarray(x))


def _group_count(scheme: PartitionScheme, channels: int) -> int:
    if scheme.kind == "layer":
        return 1
    if scheme.kind == "instance":
        return channels
    g = scheme.num_groups
    if channels % g != 0:
        raise PartitionError(f"{g} groups do not divide C={channels}")
    return g


def standardize(x, scheme: PartitionScheme, epsilon: float = 1e-5):
    """Eq.-style standardization: xs = (x - mu)/sqrt(gamma + eps) per partition.

    Returns (xs, NormStats). Differentiable when x is a Variable on an active
    tape.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = _as_variable(x)
    if x.value.ndim != 4:
        raise ShapeError(f"expected NCHW tensor, got shape {x.shape}")
    b, c, h, w = x.shape
    if scheme.kind == "batch":
        if b == 0:
            raise ShapeError("batch standardization needs at least one instance")
        mu = ad.vmean(x, axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        gamma = ad.vmean(centered * centered, axis=(0, 2, 3), keepdims=True)
        xs = centered / ad.sqrt(gamma + epsilon)
        return xs, NormStats(mu.value.reshape(c), gamma.value.reshape(c), epsilon)
    g = _group_count(scheme, c)
    xg = ad.reshape(x, (b, g, (c // g) * h * w))
    mu = ad.vmean(xg, axis=2, keepdims=True)
    centered = xg - mu
    gamma = ad.vmean(centered * centered, axis=2, keepdims=True)
    xs = ad.reshape(centered / ad.sqrt(gamma + epsilon), (b, c, h, w))
    return xs, NormStats(mu.value.reshape(b, g), gamma.value.reshape(b, g), epsilon)


def rescale(xs, params: AffineParams):
    """x_n[b,c,h,w] = omega[c] * xs[b,c,h,w] + beta[c]."""
    xs = _as_variable(xs)
    c = xs.shape[1]
    if params.omega.shape != (c,) or params.beta.shape != (c,):
        raise ShapeError(f"affine parameters must have length C={c}")
    omega = ad.reshape(params.omega, (1, c, 1, 1))
    beta = ad.reshape(params.beta, (1, c, 1, 1))
    return omega * xs + beta


def norm_layer_forward(x, scheme: PartitionScheme, params: AffineParams,
                       mode: str = "train", running: RunningStats | None = None,
                       epsilon: float = 1e-5):
    """One baseline normalization layer: standardize then rescale.

    BN in eval mode standardizes with the running statistics; instance-level
    kinds behave identically in train and eval.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    x = _as_variable(x)
    if scheme.kind == "batch" and mode == "eval":
        if running is None or not running.initialized:
            raise ValueError("BN eval mode requires initialized running statistics")
        c = x.shape[1]
        mu = Variable(running.running_mu.reshape(1, c, 1, 1).astype(x.dtype))
        gamma = Variable(running.running_gamma.reshape(1, c, 1, 1).astype(x.dtype))
        xs = (x - mu) / ad.sqrt(gamma + epsilon)
        return rescale(xs, params)
    xs, stats = standardize(x, scheme, epsilon)
    if scheme.kind == "batch" and mode == "train" and running is not None:
        running.update(np.asarray(stats.mu, dtype=np.float64),
                       np.asarray(stats.gamma, dtype=np.float64))
    return rescale(xs, params)
