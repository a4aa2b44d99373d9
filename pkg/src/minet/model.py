"""Multi-level implicit dehazing network.

Pipeline: encoder -> three cascaded IM-blocks (dilations 1, 2, 5) whose
outputs are fused per pixel by a group-convolution weighting (MLF) ->
residual channel attention (RCA) -> decoder back to RGB.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .imblock import IMBlockConfig, IMBlockTrace, MLEParams, im_block_forward, resblock_chain_forward
from .layers import (
    Conv2dParams,
    InstanceNormParams,
    LinearParams,
    conv2d,
    global_avg_pool,
    instance_norm,
    linear,
    named_parameters,
    transposed_conv2d,
)
from .tensor import Tensor, concat, relu, sigmoid, softmax

BLOCK_KINDS = ("im", "res1", "resT")


@dataclass
class MINetConfig:
    trunk_channels: int = 64
    dilations: tuple[int, int, int] = (1, 2, 5)
    recursions: tuple[int, int, int] = (12, 12, 12)
    eta: float = 1.0
    rca_reduction: int = 16
    downsample: bool = True
    block: str = "im"  # "im" | "res1" | "resT"
    use_mlf: bool = True
    use_rca: bool = True
    mlf_norm: str = "softmax"  # "softmax" | "linear"

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        self.recursions = tuple(int(t) for t in self.recursions)
        if len(self.dilations) != 3 or len(self.recursions) != 3:
            raise ValueError("dilations and recursions must have three entries")
        for i in range(3):
            for j in range(i + 1, 3):
                if math.gcd(self.dilations[i], self.dilations[j]) != 1:
                    raise ValueError(f"dilations {self.dilations} are not pairwise coprime")
        if min(self.recursions) < 1:
            raise ValueError("all recursion counts must be >= 1")
        if self.trunk_channels % self.rca_reduction:
            raise ValueError("trunk_channels must be divisible by rca_reduction")
        if self.block not in BLOCK_KINDS:
            raise ValueError(f"block must be one of {BLOCK_KINDS}, got {self.block!r}")
        if self.mlf_norm not in ("softmax", "linear"):
            raise ValueError(f"mlf_norm must be 'softmax' or 'linear', got {self.mlf_norm!r}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        d["recursions"] = list(self.recursions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MINetConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class RCAParams:
    conv: Conv2dParams
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class MINetParams:
    encoder: Conv2dParams
    encoder_norm: InstanceNormParams
    blocks: list[list[MLEParams]]
    mlf: Conv2dParams | None
    rca: RCAParams | None
    decoder_up: Conv2dParams
    decoder_out: Conv2dParams
    config: MINetConfig = field(repr=False, default_factory=MINetConfig)

    def named_parameters(self):
        return named_parameters(self)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in named_parameters(self)]


def init_minet(cfg: MINetConfig, seed: int = 0, dtype=np.float64) -> MINetParams:
    rng = np.random.default_rng(seed)
    c = cfg.trunk_channels
    s = 2 if cfg.downsample else 1
    encoder = Conv2dParams.init(rng, 3, c, 3, stride=s, padding=1, dtype=dtype)
    blocks = []
    for d, t in zip(cfg.dilations, cfg.recursions):
        n = t if cfg.block == "resT" else 1
        blocks.append([MLEParams.init(rng, c, d, dtype) for _ in range(n)])
    mlf = Conv2dParams.init(rng, 3 * c, 3, 3, padding=1, groups=3, dtype=dtype) if cfg.use_mlf else None
    rca = None
    if cfg.use_rca:
        hidden = c // cfg.rca_reduction
        rca = RCAParams(
            Conv2dParams.init(rng, c, c, 1, dtype=dtype),
            LinearParams.init(rng, c, hidden, dtype),
            LinearParams.init(rng, hidden, c, dtype),
        )
    decoder_up = Conv2dParams.init_transposed(rng, c, c, 3, stride=s, padding=1, output_padding=s - 1, dtype=dtype)
    decoder_out = Conv2dParams.init(rng, c, 3, 3, padding=1, dtype=dtype)
    return MINetParams(
        encoder, InstanceNormParams.init(c, dtype), blocks, mlf, rca, decoder_up, decoder_out, cfg
    )


def encode(image: Tensor, params: MINetParams) -> Tensor:
    cfg = params.config
    if cfg.downsample and (image.shape[2] % 2 or image.shape[3] % 2):
        raise ValueError(f"spatial dims must be even when downsampling, got {image.shape[2:]}")
    return relu(instance_norm(conv2d(image, params.encoder), params.encoder_norm))


def mlf_fuse(x1: Tensor, x2: Tensor, x3: Tensor, p: Conv2dParams, norm: str = "softmax") -> Tensor:
    """Per-pixel weighted sum of three same-shaped feature maps.

    A group convolution over ``[x1, x2, x3]`` gives one weight map per level;
    with ``norm="softmax"`` the maps are normalised across levels so the
    result is a convex combination.
    """
    if not (x1.shape == x2.shape == x3.shape):
        raise ValueError(f"MLF inputs differ in shape: {x1.shape}, {x2.shape}, {x3.shape}")
    logits = conv2d(concat([x1, x2, x3], axis=1), p)
    w = softmax(logits, axis=1) if norm == "softmax" else logits
    return w[:, 0:1] * x1 + w[:, 1:2] * x2 + w[:, 2:3] * x3


def rca_attention(x: Tensor, p: RCAParams) -> Tensor:
    """Channel weights in (0, 1), shape (N, C, 1, 1)."""
    n, c = x.shape[:2]
    desc = global_avg_pool(conv2d(x, p.conv)).reshape(n, c)
    psi = sigmoid(linear(relu(linear(desc, p.fc1)), p.fc2))
    return psi.reshape(n, c, 1, 1)


def rca_forward(x: Tensor, p: RCAParams) -> Tensor:
    if x.shape[1] != p.conv.weight.shape[1]:
        raise ValueError(f"RCA expects {p.conv.weight.shape[1]} channels, got {x.shape[1]}")
    return rca_attention(x, p) * x + x


def decode(features: Tensor, params: MINetParams) -> Tensor:
    if features.shape[1] != params.decoder_up.weight.shape[0]:
        raise ValueError(f"decoder expects {params.decoder_up.weight.shape[0]} channels, got {features.shape[1]}")
    h = relu(transposed_conv2d(features, params.decoder_up))
    return sigmoid(conv2d(h, params.decoder_out))


def trunk_forward(feat: Tensor, params: MINetParams) -> tuple[list[Tensor], list[IMBlockTrace]]:
    cfg = params.config
    taps, traces = [], []
    x = feat
    for level, (d, t) in enumerate(zip(cfg.dilations, cfg.recursions)):
        mles = params.blocks[level]
        if cfg.block == "im":
            x, tr = im_block_forward(x, mles[0], IMBlockConfig(t, cfg.eta, d))
        else:
            x = resblock_chain_forward(x, mles, cfg.eta)
            tr = IMBlockTrace()
        taps.append(x)
        traces.append(tr)
    return taps, traces


def minet_forward(hazy: Tensor, params: MINetParams) -> tuple[Tensor, list[IMBlockTrace]]:
    """Dehaze a (N, 3, H, W) batch; also return the three block traces.

    Residual baselines have no fixed-point recursion and return empty traces.
    """
    cfg = params.config
    if hazy.ndim != 4 or hazy.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) input, got {hazy.shape}")
    taps, traces = trunk_forward(encode(hazy, params), params)
    x = mlf_fuse(*taps, params.mlf, cfg.mlf_norm) if cfg.use_mlf else taps[2]
    if cfg.use_rca:
        x = rca_forward(x, params.rca)
    return decode(x, params), traces
