"""Implicit-Euler ODE network for single-image dehazing."""

from .model import MINetConfig, MINetParams, init_minet, minet_forward
from .tensor import Tensor, backward, no_grad

__all__ = ["MINetConfig", "MINetParams", "Tensor", "backward", "init_minet", "minet_forward", "no_grad"]
__version__ = "0.1.0"
