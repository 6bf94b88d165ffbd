from .adam import AdamState, adam_step, init_adam
from .checkpoint import load_network, load_params, read_manifest, save_network
from .layers import (
    ConvSame,
    Dense,
    MaxPool2,
    ReLU,
    ResidualBlock,
    softmax,
    softmax_xent,
)
from .network import Network, forward, gradients

__all__ = [
    "AdamState",
    "adam_step",
    "init_adam",
    "save_network",
    "load_network",
    "load_params",
    "read_manifest",
    "ConvSame",
    "Dense",
    "MaxPool2",
    "ReLU",
    "ResidualBlock",
    "softmax",
    "softmax_xent",
    "Network",
    "forward",
    "gradients",
]
