"""Implicit-Euler feature block and its explicit residual counterpart.

The implicit step ``x_next = x + eta * f(x_next)`` is approximated by a
fixed number of weight-shared Picard iterations ``g <- x + eta * f(g)``
starting from ``g = x``. The vector field ``f`` is the multi-level
extraction (MLE) block: two dilated convolutions, each followed by
instance normalisation, with a ReLU in between.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import Conv2dParams, InstanceNormParams, conv2d, instance_norm
from .tensor import NonFiniteError, Tensor, relu


@dataclass
class MLEParams:
    conv1: Conv2dParams
    norm1: InstanceNormParams
    conv2: Conv2dParams
    norm2: InstanceNormParams

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, dilation: int, dtype=np.float64) -> "MLEParams":
        def conv():
            return Conv2dParams.init(rng, channels, channels, 3, dilation=dilation, padding=dilation, dtype=dtype)

        return cls(conv(), InstanceNormParams.init(channels, dtype), conv(), InstanceNormParams.init(channels, dtype))

    @property
    def dilation(self) -> int:
        return self.conv1.dilation[0]


@dataclass
class IMBlockConfig:
    T: int = 12
    eta: float = 1.0
    dilation: int = 1

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"recursion count T must be >= 1, got {self.T}")
        if not self.eta > 0:
            raise ValueError(f"step eta must be positive, got {self.eta}")


@dataclass
class IMBlockTrace:
    """Per-iteration convergence diagnostics of one block.

    ``residuals[k] = |g_{k+1} - g_k| / max(|g_k|, 1e-12)`` and
    ``step_norms[k] = |g_{k+1} - g_k|`` (Euclidean norms over the batch).
    """

    residuals: list[float] = field(default_factory=list)
    step_norms: list[float] = field(default_factory=list)

    @property
    def final(self) -> float:
        return self.residuals[-1] if self.residuals else 0.0


def mle_forward(x: Tensor, p: MLEParams) -> Tensor:
    c = p.conv1.weight.shape[1]
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"MLE expects {c} channels, got shape {x.shape}")
    h = relu(instance_norm(conv2d(x, p.conv1), p.norm1))
    return instance_norm(conv2d(h, p.conv2), p.norm2)


def picard_iterate(
    g0: Tensor, field_fn: Callable[[Tensor], Tensor], T: int, eta: float = 1.0
) -> tuple[Tensor, IMBlockTrace]:
    """Run ``g <- g0 + eta * field_fn(g)`` exactly ``T`` times from ``g = g0``.

    Every iteration is recorded, so gradients flow through the whole unrolled
    recursion.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    trace = IMBlockTrace()
    g = g0
    for k in range(T):
        g_next = g0 + eta * field_fn(g)
        if not np.all(np.isfinite(g_next.data)):
            raise NonFiniteError(f"non-finite value at Picard iteration {k}")
        step = float(np.linalg.norm((g_next.data - g.data).ravel()))
        base = float(np.linalg.norm(g.data.ravel()))
        trace.step_norms.append(step)
        trace.residuals.append(step / max(base, 1e-12))
        g = g_next
    return g, trace


def im_block_forward(x: Tensor, p: MLEParams, cfg: IMBlockConfig) -> tuple[Tensor, IMBlockTrace]:
    return picard_iterate(x, lambda g: mle_forward(g, p), cfg.T, cfg.eta)


def resblock_forward(x: Tensor, p: MLEParams, eta: float = 1.0) -> Tensor:
    out = x + eta * mle_forward(x, p)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("non-finite value in resblock output")
    return out


def resblock_chain_forward(x: Tensor, blocks: list[MLEParams], eta: float = 1.0) -> Tensor:
    """Explicit baseline with one unshared residual block per step."""
    for p in blocks:
        x = resblock_forward(x, p, eta)
    return x
