"""Differentiable convolutional building blocks.

Convolution is cross-correlation on (N, C, H, W) tensors with zero padding.
Kernels are unfolded into strided window views (no copies until the
contraction), so every kernel keeps a fixed loop and reduction order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, relu, sigmoid  # noqa: F401  (re-exported activations)

IN_EPS = 1e-5


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(size: int, k: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def transposed_output_size(
    size: int, k: int, stride: int = 1, dilation: int = 1, padding: int = 0, output_padding: int = 0
) -> int:
    return stride * (size - 1) + dilation * (k - 1) + 1 - 2 * padding + output_padding


# -- raw numpy kernels ---------------------------------------------------------


def _windows(xp: np.ndarray, kh, kw, ho, wo, stride, dilation) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    sh, sw = stride
    dh, dw = dilation
    return as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2 * dh, s3 * dw),
        writeable=False,
    )


def _pad(x: np.ndarray, padding) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _conv_forward(x, w, stride, dilation, padding, groups) -> np.ndarray:
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride[0], dilation[0], padding[0])
    wo = conv_output_size(wd, kw, stride[1], dilation[1], padding[1])
    cols = _windows(_pad(x, padding), kh, kw, ho, wo, stride, dilation)
    og = o // groups
    outs = []
    for g in range(groups):
        part = np.tensordot(cols[:, g * cg : (g + 1) * cg], w[g * og : (g + 1) * og], axes=([1, 4, 5], [1, 2, 3]))
        outs.append(part)
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=3)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_grad_input(gy, w, x_shape, stride, dilation, padding, groups) -> np.ndarray:
    n, c, h, wd = x_shape
    o, cg, kh, kw = w.shape
    ph, pw = padding
    sh, sw = stride
    dh, dw = dilation
    ho, wo = gy.shape[2], gy.shape[3]
    og = o // groups
    gxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=gy.dtype)
    for g in range(groups):
        # (N, Ho, Wo, Cg, kh, kw)
        dcols = np.tensordot(gy[:, g * og : (g + 1) * og], w[g * og : (g + 1) * og], axes=([1], [0]))
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        for i in range(kh):
            for j in range(kw):
                gxp[
                    :,
                    g * cg : (g + 1) * cg,
                    i * dh : i * dh + sh * (ho - 1) + 1 : sh,
                    j * dw : j * dw + sw * (wo - 1) + 1 : sw,
                ] += dcols[:, :, i, j]
    if ph or pw:
        gxp = gxp[:, :, ph : ph + h, pw : pw + wd]
    return np.ascontiguousarray(gxp)


def _conv_grad_weight(x, gy, w_shape, stride, dilation, padding, groups) -> np.ndarray:
    o, cg, kh, kw = w_shape
    ho, wo = gy.shape[2], gy.shape[3]
    cols = _windows(_pad(x, padding), kh, kw, ho, wo, stride, dilation)
    og = o // groups
    parts = [
        np.tensordot(gy[:, g * og : (g + 1) * og], cols[:, g * cg : (g + 1) * cg], axes=([0, 2, 3], [0, 2, 3]))
        for g in range(groups)
    ]
    return parts[0] if groups == 1 else np.concatenate(parts, axis=0)


# -- parameter containers --------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


@dataclass
class Conv2dParams:
    """Weights of a 2-D convolution.

    For :func:`conv2d` ``weight`` is ``(C_out, C_in/groups, kh, kw)``. For
    :func:`transposed_conv2d` the same tensor is read as the adjoint of that
    convolution, i.e. ``(C_in_t, C_out_t/groups, kh, kw)``.
    """

    weight: Tensor
    bias: Tensor | None
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1
    output_padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.dilation = _pair(self.dilation)
        self.padding = _pair(self.padding)
        self.output_padding = _pair(self.output_padding)
        if min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0 or self.groups < 1:
            raise ValueError("invalid stride/dilation/padding/groups")

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        k: int = 3,
        stride=1,
        dilation=1,
        padding=0,
        groups: int = 1,
        dtype=np.float64,
    ) -> "Conv2dParams":
        if c_in % groups or c_out % groups:
            raise ValueError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        w = kaiming_uniform(rng, (c_out, c_in // groups, k, k), (c_in // groups) * k * k, dtype)
        b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        return cls(w, b, stride, dilation, padding, groups)

    @classmethod
    def init_transposed(
        cls,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        k: int = 3,
        stride=1,
        padding=0,
        output_padding=0,
        dtype=np.float64,
    ) -> "Conv2dParams":
        w = kaiming_uniform(rng, (c_in, c_out, k, k), c_in * k * k, dtype)
        b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        return cls(w, b, stride, 1, padding, 1, output_padding)


@dataclass
class InstanceNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = IN_EPS

    @classmethod
    def init(cls, channels: int, dtype=np.float64) -> "InstanceNormParams":
        return cls(
            Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        )


@dataclass
class LinearParams:
    weight: Tensor  # (out, in)
    bias: Tensor | None

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float64) -> "LinearParams":
        return cls(
            kaiming_uniform(rng, (n_out, n_in), n_in, dtype),
            Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True),
        )


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every learnable tensor, in field order."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            sub = getattr(obj, f.name)
            yield from named_parameters(sub, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, sub in enumerate(obj):
            yield from named_parameters(sub, f"{prefix}.{i}" if prefix else str(i))


def parameter_count(obj) -> int:
    return sum(t.size for _, t in named_parameters(obj))


# -- differentiable layers ---------------------------------------------------------


def _add_bias(y: np.ndarray, bias: Tensor | None) -> np.ndarray:
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)
    return y


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (N, C, H, W), got {x.shape}")
    w = p.weight
    c_in = w.shape[1] * p.groups
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d expects {c_in} input channels, got {x.shape[1]}")
    kh, kw = w.shape[2:]
    ho = conv_output_size(x.shape[2], kh, p.stride[0], p.dilation[0], p.padding[0])
    wo = conv_output_size(x.shape[3], kw, p.stride[1], p.dilation[1], p.padding[1])
    if ho < 1 or wo < 1:
        raise ValueError(f"input {x.shape[2:]} too small for kernel {kh}x{kw} (dilation {p.dilation})")
    args = (p.stride, p.dilation, p.padding, p.groups)
    y = _add_bias(_conv_forward(x.data, w.data, *args), p.bias)
    parents = (x, w) if p.bias is None else (x, w, p.bias)

    def bw(g):
        gx = _conv_grad_input(g, w.data, x.shape, *args) if x.requires_grad else None
        gw = _conv_grad_weight(x.data, g, w.shape, *args) if w.requires_grad else None
        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(y, parents, bw, "conv2d")


def transposed_conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Fractionally-strided convolution, the adjoint of :func:`conv2d`.

    Output size per axis is ``stride*(H-1) + dilation*(k-1) + 1 - 2*pad + output_padding``.
    """
    if x.ndim != 4:
        raise ValueError(f"transposed_conv2d expects (N, C, H, W), got {x.shape}")
    w = p.weight
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"transposed_conv2d expects {w.shape[0]} input channels, got {x.shape[1]}")
    kh, kw = w.shape[2:]
    ho = transposed_output_size(x.shape[2], kh, p.stride[0], p.dilation[0], p.padding[0], p.output_padding[0])
    wo = transposed_output_size(x.shape[3], kw, p.stride[1], p.dilation[1], p.padding[1], p.output_padding[1])
    if ho < 1 or wo < 1:
        raise ValueError("transposed_conv2d output would be empty")
    out_shape = (x.shape[0], w.shape[1] * p.groups, ho, wo)
    args = (p.stride, p.dilation, p.padding, p.groups)
    y = _add_bias(_conv_grad_input(x.data, w.data, out_shape, *args), p.bias)
    parents = (x, w) if p.bias is None else (x, w, p.bias)

    def bw(g):
        gx = _conv_forward(g, w.data, *args) if x.requires_grad else None
        gw = _conv_grad_weight(g, x.data, w.shape, *args) if w.requires_grad else None
        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(y, parents, bw, "transposed_conv2d")


def instance_norm(x: Tensor, p: InstanceNormParams) -> Tensor:
    """Per-sample, per-channel normalisation over H x W with biased variance."""
    if x.shape[2] * x.shape[3] < 1:
        raise ValueError("instance_norm needs at least one spatial element")
    d = x.data
    mu = d.mean(axis=(2, 3), keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    gamma = p.gamma.data.reshape(1, -1, 1, 1)
    y = xhat * gamma + p.beta.data.reshape(1, -1, 1, 1)

    def bw(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma
            gx = inv * (
                gxhat
                - gxhat.mean(axis=(2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
            )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._from_op(y, (x, p.gamma, p.beta), bw, "instance_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3), keepdims=True)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape (N, in)."""
    w = p.weight
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear expects (N, {w.shape[1]}), got {x.shape}")
    y = x.data @ w.data.T
    if p.bias is not None:
        y = y + p.bias.data
    parents = (x, w) if p.bias is None else (x, w, p.bias)

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data
        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor._from_op(y, parents, bw, "linear")
