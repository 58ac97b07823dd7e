"""Frozen convolutional feature extractor over log-Mel segments.

Six blocks of 3x3 convolutions (two per block for the first five, one for the
sixth), each followed by 2x2 max pooling, plus one final convolution without
pooling: 12 convolution layers in total.  Each convolution is followed by
batch normalization in inference mode and a ReLU.  The network is never
trained here, so batch-norm statistics are part of the stored weights and the
whole forward pass runs on plain float32 arrays.

Two widths are provided: the full-scale channel progression and a `desk`
preset with every width divided by 8, small enough to exercise the complete
pipeline quickly on a laptop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import conv2d_forward, maxpool2d_forward
from .errors import ModelError

FULL_WIDTHS = (16, 16, 32, 32, 64, 64, 128, 128, 256, 256, 512, 1024)

# (layer name, has a pool after it) in forward order.
_LAYERS = (
    ("b1c1", False), ("b1c2", True),
    ("b2c1", False), ("b2c2", True),
    ("b3c1", False), ("b3c2", True),
    ("b4c1", False), ("b4c2", True),
    ("b5c1", False), ("b5c2", True),
    ("b6c1", True),
    ("f1c1", False),
)

_BN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = FULL_WIDTHS

    def __post_init__(self):
        if len(self.widths) != len(_LAYERS):
            raise ValueError(f"expected {len(_LAYERS)} layer widths, got {len(self.widths)}")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")

    @classmethod
    def full_scale(cls) -> "BackboneConfig":
        return cls(FULL_WIDTHS)

    @classmethod
    def desk_scale(cls) -> "BackboneConfig":
        return cls(tuple(w // 8 for w in FULL_WIDTHS))

    @property
    def mac_dim(self) -> int:
        return sum(self.widths)


def layer_names() -> tuple[str, ...]:
    return tuple(name for name, _ in _LAYERS)


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-initialized kernels, zero biases, identity batch-norm statistics."""
    tensors: dict[str, np.ndarray] = {}
    c_in = 1
    for (name, _), c_out in zip(_LAYERS, config.widths):
        std = np.sqrt(2.0 / (c_in * 9))
        tensors[f"backbone/{name}/kernel"] = rng.normal(0.0, std, size=(c_out, c_in, 3, 3)).astype(np.float32)
        tensors[f"backbone/{name}/bias"] = np.zeros(c_out, dtype=np.float32)
        tensors[f"backbone/{name}/bn_mean"] = np.zeros(c_out, dtype=np.float32)
        tensors[f"backbone/{name}/bn_var"] = np.ones(c_out, dtype=np.float32)
        tensors[f"backbone/{name}/bn_gamma"] = np.ones(c_out, dtype=np.float32)
        tensors[f"backbone/{name}/bn_beta"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    return tensors


def infer_config(tensors: dict[str, np.ndarray]) -> BackboneConfig:
    """Recover layer widths from stored kernel shapes and sanity-check them."""
    widths = []
    c_in = 1
    for name, _ in _LAYERS:
        key = f"backbone/{name}/kernel"
        if key not in tensors:
            raise ModelError(f"model is missing tensor {key}")
        kernel = tensors[key]
        if kernel.ndim != 4 or kernel.shape[1] != c_in or kernel.shape[2:] != (3, 3):
            raise ModelError(f"tensor {key} has unexpected shape {kernel.shape}")
        widths.append(int(kernel.shape[0]))
        c_in = kernel.shape[0]
    return BackboneConfig(tuple(widths))


def backbone_forward(tensors: dict[str, np.ndarray], segments: np.ndarray) -> list[np.ndarray]:
    """Run a batch of segments (N, frames, bands) through all layers.

    Returns the 12 post-ReLU activation maps, taken before each pooling step
    so later global pooling sees the full spatial extent.
    """
    if segments.ndim != 3:
        raise ValueError("expected a batch of 2-D segments")
    x = np.ascontiguousarray(segments[:, None, :, :], dtype=np.float32)
    maps: list[np.ndarray] = []
    for name, pooled in _LAYERS:
        kernel = np.asarray(tensors[f"backbone/{name}/kernel"], dtype=np.float32)
        bias = np.asarray(tensors[f"backbone/{name}/bias"], dtype=np.float32)
        x = conv2d_forward(x, kernel, bias, padding=1)
        mean = tensors[f"backbone/{name}/bn_mean"]
        var = tensors[f"backbone/{name}/bn_var"]
        gamma = tensors[f"backbone/{name}/bn_gamma"]
        beta = tensors[f"backbone/{name}/bn_beta"]
        scale = (gamma / np.sqrt(var + _BN_EPS)).astype(np.float32)
        shift = (beta - mean * scale).astype(np.float32)
        x *= scale[None, :, None, None]
        x += shift[None, :, None, None]
        np.maximum(x, 0.0, out=x)
        maps.append(x)
        if pooled:
            x, _ = maxpool2d_forward(x)
    return maps
