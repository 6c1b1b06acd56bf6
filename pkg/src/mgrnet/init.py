"""Parameter initialisers."""

import numpy as np

from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype, name: str) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True, name=name)


def conv_kernel(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype, name: str) -> Tensor:
    return glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k, dtype, name)


def zeros(shape, dtype, name: str) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
