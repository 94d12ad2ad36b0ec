"""Small convolutional feature extractor producing (G, G, C) maps.

Each stage is a 3x3 same-padded convolution, ReLU, and optionally a 2x
average pool. Enough leading stages pool so the input side reduces to
exactly the grid side. Datasets that already carry feature maps skip
this module entirely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KERNEL_SIDE = 3


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture sizes for the feature extractor.

    widths are the per-stage output channels; the last entry is the
    feature channel count C handed to the parser.
    """

    input_size: int = 32
    input_channels: int = 1
    widths: tuple = (16, 32, 16)
    grid: int = 8

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("widths must be non-empty")
        if self.widths[-1] < 8:
            raise ValueError(f"output channels must be >= 8, got {self.widths[-1]}")
        if self.grid < 5:
            raise ValueError(f"grid side must be >= 5, got {self.grid}")
        if self.input_size % self.grid != 0:
            raise ValueError(
                f"input size {self.input_size} is not a multiple of grid {self.grid}"
            )
        ratio = self.input_size // self.grid
        if ratio & (ratio - 1) != 0:
            raise ValueError(
                f"input/grid ratio must be a power of two, got {ratio}"
            )
        n_pools = ratio.bit_length() - 1
        if n_pools > len(self.widths):
            raise ValueError(
                f"need {n_pools} pooling stages but only {len(self.widths)} stages exist"
            )
        object.__setattr__(self, "n_pools", n_pools)

    @property
    def channels(self) -> int:
        return self.widths[-1]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 3x3 convolution over a (Cin, H, W) stack.

    kernel is (Cout, Cin, 3, 3), bias is (Cout,); returns (Cout, H, W).
    """
    cin, h, w = x.data.shape
    s = kernel.data.shape[-1]
    r = s // 2
    padded = np.pad(x.data, ((0, 0), (r, r), (r, r)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (s, s), axis=(1, 2))
    out = np.einsum("chwab,ocab->ohw", windows, kernel.data, optimize=True)
    out += bias.data[:, None, None]

    def fn(g):
        dk = np.einsum("ohw,chwab->ocab", g, windows, optimize=True)
        db = g.sum(axis=(1, 2))
        dpad = np.zeros_like(padded)
        kd = kernel.data
        for a in range(s):
            for b in range(s):
                dpad[:, a:a + h, b:b + w] += np.einsum(
                    "ohw,oc->chw", g, kd[:, :, a, b], optimize=True
                )
        return dpad[:, r:r + h, r:r + w], dk, db

    return ad.make_op(out, (x, kernel, bias), fn)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over a (C, H, W) stack."""
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"pooling needs even extents, got {(h, w)}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def fn(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return ad.make_op(out, (x,), fn)


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> list:
    """Fan-in scaled uniform kernels and zero biases for every stage.

    Each kernel entry is uniform on [-b, b] with b = sqrt(6 / fan_in),
    giving an empirical std of sqrt(2 / fan_in). Returns a flat list of
    leaf tensors [kernel0, bias0, kernel1, bias1, ...].
    """
    params = []
    cin = config.input_channels
    for cout in config.widths:
        fan_in = cin * KERNEL_SIDE * KERNEL_SIDE
        bound = np.sqrt(6.0 / fan_in)
        k = rng.uniform(-bound, bound, size=(cout, cin, KERNEL_SIDE, KERNEL_SIDE))
        params.append(ad.parameter(k))
        params.append(ad.parameter(np.zeros(cout)))
        cin = cout
    return params


def extract_features(image, params: list, config: BackboneConfig) -> Tensor:
    """Map an (H, H, ch) image to a (G, G, C) feature tensor."""
    t = image if isinstance(image, Tensor) else ad.tensor(image)
    expected = (config.input_size, config.input_size, config.input_channels)
    if t.data.shape != expected:
        raise ValueError(f"image shape {t.data.shape} does not match config {expected}")
    x = ad.transpose(t, (2, 0, 1))
    for stage in range(len(config.widths)):
        x = ad.relu(conv2d(x, params[2 * stage], params[2 * stage + 1]))
        if stage < config.n_pools:
            x = avg_pool2(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("non-finite activations in the feature extractor")
    return ad.transpose(x, (1, 2, 0))


def named_parameters(params: list) -> dict:
    """Checkpoint-ready name -> array mapping for backbone parameters."""
    out = {}
    for stage in range(len(params) // 2):
        out[f"backbone.{stage}.kernel"] = params[2 * stage].data
        out[f"backbone.{stage}.bias"] = params[2 * stage + 1].data
    return out
