"""Cross fusion of pooled graph streams, residual mining and the softmax head."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import StructuralError
from .init import conv_kernel, glorot_uniform, zeros
from .msgraph import POOLED_SIDE, nodes_to_grid
from .tensor import Tensor


def cross_fuse(s1: Tensor, s2: Tensor, s3: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Pairwise channel concatenation of three ``[..., 16, C]`` streams onto the 4x4 grid.

    Returns ``(s1|s2, s1|s3, s2|s3)``, each ``[..., 2C, 4, 4]``.
    """
    expected = POOLED_SIDE * POOLED_SIDE
    for s in (s2, s3):
        if s.shape != s1.shape:
            raise StructuralError(f"streams must share a shape, got {s1.shape} and {s.shape}")
    if s1.shape[-2] != expected:
        raise StructuralError(f"streams must have {expected} nodes, got {s1.shape[-2]}")
    g1, g2, g3 = (nodes_to_grid(s) for s in (s1, s2, s3))
    return (
        T.concat_channels([g1, g2], axis=-3),
        T.concat_channels([g1, g3], axis=-3),
        T.concat_channels([g2, g3], axis=-3),
    )


class ResidualBlock:
    """``relu(conv3(relu(conv3(x))) + proj1x1(x))``; the projection has no bias."""

    def __init__(self, in_channels: int, out_channels: int, rng, dtype=np.float32, prefix: str = "fuse.res1"):
        self.in_channels = in_channels
        self.conv1_weight = conv_kernel(rng, out_channels, in_channels, 3, dtype, f"{prefix}.conv1.weight")
        self.conv1_bias = zeros((out_channels,), dtype, f"{prefix}.conv1.bias")
        self.conv2_weight = conv_kernel(rng, out_channels, out_channels, 3, dtype, f"{prefix}.conv2.weight")
        self.conv2_bias = zeros((out_channels,), dtype, f"{prefix}.conv2.bias")
        self.proj_weight = conv_kernel(rng, out_channels, in_channels, 1, dtype, f"{prefix}.proj.weight")

    def named_parameters(self) -> dict[str, Tensor]:
        ps = (self.conv1_weight, self.conv1_bias, self.conv2_weight, self.conv2_bias, self.proj_weight)
        return {p.name: p for p in ps}

    def __call__(self, x: Tensor) -> Tensor:
        return residual_block_forward(x, self)


def residual_block_forward(x: Tensor, params: ResidualBlock) -> Tensor:
    h = T.relu(T.conv2d(x, params.conv1_weight, params.conv1_bias, padding="same"))
    mapped = T.conv2d(h, params.conv2_weight, params.conv2_bias, padding="same")
    skip = T.conv2d(x, params.proj_weight, padding="same")
    return T.relu(T.add(mapped, skip))


class PlainBlock:
    """Single conv3x3 + ReLU with no skip path (the no-residual ablation)."""

    def __init__(self, in_channels: int, out_channels: int, rng, dtype=np.float32, prefix: str = "fuse.res1"):
        self.weight = conv_kernel(rng, out_channels, in_channels, 3, dtype, f"{prefix}.conv.weight")
        self.bias = zeros((out_channels,), dtype, f"{prefix}.conv.bias")

    def named_parameters(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(T.conv2d(x, self.weight, self.bias, padding="same"))


def final_fuse(f1: Tensor, f2: Tensor, f3: Tensor) -> Tensor:
    if not f1.shape == f2.shape == f3.shape:
        raise StructuralError(f"final fusion needs equal shapes, got {f1.shape}, {f2.shape}, {f3.shape}")
    return T.concat_channels([f1, f2, f3], axis=-3)


class ClassifierHead:
    """Flatten, affine map to class logits, softmax."""

    def __init__(self, in_features: int, num_classes: int, rng, dtype=np.float32):
        self.weight = glorot_uniform(rng, (in_features, num_classes), in_features, num_classes, dtype, "head.weight")
        self.bias = zeros((num_classes,), dtype, "head.bias")

    def named_parameters(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def logits(self, fused: Tensor) -> Tensor:
        batched = fused.ndim == 4
        flat_size = int(np.prod(fused.shape[-3:]))
        if flat_size != self.weight.shape[0]:
            raise StructuralError(f"head expects {self.weight.shape[0]} features, got {flat_size}")
        flat = T.reshape(fused, (fused.shape[0], flat_size) if batched else (flat_size,))
        return T.linear(flat, self.weight, self.bias)

    def __call__(self, fused: Tensor) -> Tensor:
        return classify_head(fused, self)


def classify_head(fused: Tensor, head: ClassifierHead) -> Tensor:
    return T.softmax(head.logits(fused))
