"""Full network assembly and the ablation variants."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, StructuralError
from .fusion import ClassifierHead, PlainBlock, ResidualBlock, cross_fuse, final_fuse, classify_head
from .msconv import MultiScaleConv
from .msgraph import POOLED_SIDE, MultiScaleGraph, grid_to_nodes
from .tensor import Tensor


class AblationVariant(str, enum.Enum):
    FULL = "FULL"
    NC = "NC"  # no multi-scale convolution
    NG = "NG"  # no multi-scale graph convolution
    NR = "NR"  # no residual blocks
    G16 = "G16"
    G36 = "G36"
    G64 = "G64"

    @classmethod
    def parse(cls, value) -> "AblationVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ConfigurationError(f"unknown variant {value!r}; choose from {[v.value for v in cls]}") from None


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    num_classes: int
    patch_size: int = 11
    kernel_sizes: tuple[int, ...] = (1, 3, 5)
    conv_channels: int = 32
    conv_depth: int = 1
    graph_scales: tuple[int, ...] = (16, 36, 64)
    graph_channels: int = 64
    residual_channels: int = 64
    variant: AblationVariant = AblationVariant.FULL
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigurationError("in_channels and num_classes must be positive")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigurationError(f"patch size must be odd, got {self.patch_size}")
        object.__setattr__(self, "variant", AblationVariant.parse(self.variant))


class MgrnetModel:
    """Patch ``[N, d, p, p]`` (or ``[d, p, p]``) in, class probabilities out."""

    def __init__(self, config: ModelConfig):
        self.config = config
        variant = config.variant
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)

        self.conv = None
        shallow_channels = config.in_channels
        if variant is not AblationVariant.NC:
            self.conv = MultiScaleConv(
                config.in_channels, config.conv_channels, config.kernel_sizes, config.conv_depth, rng, dtype
            )
            shallow_channels = config.conv_channels * len(config.kernel_sizes)

        self.graph = None
        if variant is AblationVariant.NG:
            if len(config.kernel_sizes) != 3:
                raise ConfigurationError("the NG variant substitutes exactly three conv scales for the graph streams")
            stream_channels = config.conv_channels
        else:
            scales = {
                AblationVariant.G16: (16,),
                AblationVariant.G36: (36,),
                AblationVariant.G64: (64,),
            }.get(variant, tuple(config.graph_scales))
            if len(scales) not in (1, 3):
                raise ConfigurationError(f"need one or three graph scales, got {scales}")
            if any(int(np.sqrt(k)) > config.patch_size for k in scales):
                raise ConfigurationError(f"graph scales {scales} do not fit {config.patch_size}x{config.patch_size} patches")
            self.graph = MultiScaleGraph(shallow_channels, config.graph_channels, scales, rng, dtype)
            stream_channels = config.graph_channels

        block = PlainBlock if variant is AblationVariant.NR else ResidualBlock
        self.blocks = [
            block(2 * stream_channels, config.residual_channels, rng, dtype, prefix=f"fuse.res{i}") for i in (1, 2, 3)
        ]
        self.head = ClassifierHead(3 * config.residual_channels * POOLED_SIDE**2, config.num_classes, rng, dtype)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in (self.conv, self.graph, *self.blocks, self.head):
            if part is not None:
                out.update(part.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def streams(self, x: Tensor) -> list[Tensor]:
        """The three pooled 16-node streams that feed cross fusion."""
        expected = (self.config.in_channels, self.config.patch_size, self.config.patch_size)
        if x.ndim not in (3, 4) or tuple(x.shape[-3:]) != expected:
            raise StructuralError(f"model expects patches of shape {expected}, got {x.shape}")
        if self.graph is None:
            features = self.conv(x)
            return [grid_to_nodes(T.adaptive_avg_pool(f, POOLED_SIDE)) for f in features.values()]
        if self.conv is None:
            shallow = x
        else:
            shallow = T.concat_channels(list(self.conv(x).values()), axis=-3)
        streams = self.graph(shallow)
        return streams if len(streams) == 3 else streams * 3

    def fused(self, x: Tensor) -> Tensor:
        outs = cross_fuse(*self.streams(x))
        return final_fuse(*(block(o) for block, o in zip(self.blocks, outs)))

    def logits(self, x: Tensor) -> Tensor:
        return self.head.logits(self.fused(x))

    def __call__(self, x: Tensor) -> Tensor:
        return classify_head(self.fused(x), self.head)

    def predict(self, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Arg-max class (0-based) for each patch; runs without a tape."""
        preds = []
        for start in range(0, len(patches), batch_size):
            chunk = Tensor(np.asarray(patches[start:start + batch_size], dtype=self.dtype))
            preds.append(np.argmax(self.logits(chunk).data, axis=-1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise StructuralError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise StructuralError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype)


def build_variant(variant, base: ModelConfig) -> MgrnetModel:
    return MgrnetModel(replace(base, variant=AblationVariant.parse(variant)))
