"""Grid graphs at several node counts, graph convolution and node pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, StructuralError
from .init import glorot_uniform, zeros
from .tensor import Tensor

POOLED_SIDE = 4


@dataclass(frozen=True)
class GraphScaleSpec:
    """A square ``side x side`` grid of nodes with 8-connected neighbours plus a self-loop."""

    node_count: int

    def __post_init__(self):
        side = math.isqrt(self.node_count)
        if self.node_count < 1 or side * side != self.node_count:
            raise ConfigurationError(f"node count must be a perfect square, got {self.node_count}")

    @property
    def side(self) -> int:
        return math.isqrt(self.node_count)


@lru_cache(maxsize=None)
def _adjacency(side: int) -> np.ndarray:
    k = side * side
    a = np.zeros((k, k))
    for r in range(side):
        for c in range(side):
            nbrs = [
                rr * side + cc
                for rr in range(max(0, r - 1), min(side, r + 2))
                for cc in range(max(0, c - 1), min(side, c + 2))
            ]
            a[r * side + c, nbrs] = 1.0 / len(nbrs)
    a.flags.writeable = False
    return a


def build_adjacency(spec: GraphScaleSpec) -> np.ndarray:
    """Row-normalised coefficient table: ``a[i, j] = 1/deg(i)`` for each neighbour ``j`` of ``i``."""
    return _adjacency(spec.side)


def grid_to_nodes(grid: Tensor) -> Tensor:
    """``[..., C, s, s]`` -> ``[..., s*s, C]`` with nodes in row-major grid order."""
    *lead, c, h, w = grid.shape
    flat = T.reshape(grid, (*lead, c, h * w))
    n = flat.ndim
    return T.transpose(flat, (*range(n - 2), n - 1, n - 2))


def nodes_to_grid(nodes: Tensor) -> Tensor:
    """Inverse of :func:`grid_to_nodes`."""
    *lead, k, c = nodes.shape
    side = math.isqrt(k)
    if side * side != k:
        raise StructuralError(f"{k} nodes do not form a square grid")
    n = nodes.ndim
    chan_first = T.transpose(nodes, (*range(n - 2), n - 1, n - 2))
    return T.reshape(chan_first, (*lead, c, side, side))


def build_grid_nodes(features: Tensor, spec: GraphScaleSpec) -> Tensor:
    """Pool a ``[..., C, p, p]`` map to ``side x side`` cells and return them as ``[..., k, C]`` nodes."""
    p = min(features.shape[-2:])
    if spec.side > p:
        raise ConfigurationError(f"a {spec.side}x{spec.side} node grid does not fit a {p}x{p} feature map")
    return grid_to_nodes(T.adaptive_avg_pool(features, spec.side))


def graph_conv_forward(nodes: Tensor, weight: Tensor, bias: Tensor, coeffs: np.ndarray) -> Tensor:
    """``g_i = ReLU(sum_j a_ij f(j) W + b)``.

    Aggregation runs before the channel transform; both are linear, so the
    order does not change the result.
    """
    if nodes.shape[-1] != weight.shape[0]:
        raise StructuralError(f"nodes carry {nodes.shape[-1]} channels, weight expects {weight.shape[0]}")
    return T.relu(T.linear(T.graph_aggregate(nodes, coeffs), weight, bias))


def pool_nodes(nodes: Tensor, side: int = POOLED_SIDE) -> Tensor:
    """Average-pool a square node grid down to ``side x side`` nodes (identity when already there)."""
    k = nodes.shape[-2]
    current = math.isqrt(k)
    if current * current != k:
        raise StructuralError(f"{k} nodes do not form a square grid")
    if current < side:
        raise ConfigurationError(f"cannot pool a {current}x{current} grid up to {side}x{side}")
    if current == side:
        return nodes
    return grid_to_nodes(T.adaptive_avg_pool(nodes_to_grid(nodes), side))


class GraphLayer:
    """One graph convolution at a fixed node count."""

    def __init__(self, spec: GraphScaleSpec, in_channels: int, out_channels: int, rng, dtype=np.float32):
        self.spec = spec
        self.coeffs = build_adjacency(spec)
        prefix = f"msgraph.k{spec.node_count}"
        self.weight = glorot_uniform(rng, (in_channels, out_channels), in_channels, out_channels, dtype, f"{prefix}.weight")
        self.bias = zeros((out_channels,), dtype, f"{prefix}.bias")

    def named_parameters(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, features: Tensor) -> Tensor:
        """Feature map in, pooled 16-node stream out."""
        nodes = build_grid_nodes(features, self.spec)
        return pool_nodes(graph_conv_forward(nodes, self.weight, self.bias, self.coeffs))


class MultiScaleGraph:
    def __init__(
        self,
        in_channels: int,
        out_channels: int = 64,
        node_counts: Sequence[int] = (16, 36, 64),
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if not node_counts:
            raise ConfigurationError("at least one graph scale is required")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = [GraphLayer(GraphScaleSpec(k), in_channels, out_channels, rng, dtype) for k in node_counts]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            out.update(layer.named_parameters())
        return out

    def __call__(self, features: Tensor) -> list[Tensor]:
        return [layer(features) for layer in self.layers]
