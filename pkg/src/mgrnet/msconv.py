"""Shallow feature mining: the same input convolved at several kernel extents at once."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, StructuralError
from .init import conv_kernel, zeros
from .tensor import Tensor


@dataclass
class ConvScale:
    """Kernels and biases for one extent ``k``; one entry per stacked layer."""

    k: int
    weights: list[Tensor]
    biases: list[Tensor]


def conv_layer_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """ReLU(conv(x, weight) + bias) with ``same`` padding."""
    return T.relu(T.conv2d(x, weight, bias, padding="same"))


class MultiScaleConv:
    """Parallel conv branches, one per kernel extent, ordered by ascending extent.

    ``depth`` stacks that many conv+ReLU layers inside each branch.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int = 32,
        kernel_sizes: Sequence[int] = (1, 3, 5),
        depth: int = 1,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if not kernel_sizes:
            raise ConfigurationError("at least one kernel size is required")
        if len(set(kernel_sizes)) != len(kernel_sizes):
            raise ConfigurationError(f"duplicate kernel sizes in {tuple(kernel_sizes)}")
        if any(k < 1 or k % 2 == 0 for k in kernel_sizes):
            raise ConfigurationError(f"kernel sizes must be odd, got {tuple(kernel_sizes)}")
        if depth < 1:
            raise ConfigurationError("conv depth must be at least 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.scales: list[ConvScale] = []
        for k in sorted(kernel_sizes):
            weights, biases = [], []
            for layer in range(depth):
                prefix = f"msconv.k{k}" if layer == 0 else f"msconv.k{k}.l{layer}"
                c_in = in_channels if layer == 0 else out_channels
                weights.append(conv_kernel(rng, out_channels, c_in, k, dtype, f"{prefix}.weight"))
                biases.append(zeros((out_channels,), dtype, f"{prefix}.bias"))
            self.scales.append(ConvScale(k, weights, biases))

    @property
    def kernel_sizes(self) -> tuple[int, ...]:
        return tuple(s.k for s in self.scales)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for scale in self.scales:
            for w, b in zip(scale.weights, scale.biases):
                out[w.name] = w
                out[b.name] = b
        return out

    def __call__(self, x: Tensor) -> dict[int, Tensor]:
        return multiscale_conv_forward(x, self)


def multiscale_conv_forward(x: Tensor, params: MultiScaleConv) -> dict[int, Tensor]:
    """Apply every branch independently; keys are kernel extents in ascending order."""
    channel_axis = x.ndim - 3
    if x.ndim not in (3, 4) or x.shape[channel_axis] != params.in_channels:
        raise StructuralError(f"expected {params.in_channels}-channel patches, got {x.shape}")
    features = {}
    for scale in params.scales:
        h = x
        for w, b in zip(scale.weights, scale.biases):
            h = conv_layer_forward(h, w, b)
        features[scale.k] = h
    return features
