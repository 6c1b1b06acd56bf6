"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive below computes its forward result with numpy and, when a
:class:`Tape` is active and at least one input is tracked, appends a node
holding the backward rule.  Nodes are appended as they execute, so the tape is
topologically ordered by construction and :func:`backward` simply walks it in
reverse.

Spatial ops accept either an unbatched ``[C, H, W]`` tensor or a batched
``[N, C, H, W]`` one; the batch axis is an extra leading dimension only.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, StructuralError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "neg",
    "scale",
    "absolute",
    "relu",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "linear",
    "graph_aggregate",
    "conv2d",
    "adaptive_avg_pool",
    "pooling_windows",
    "concat_channels",
    "softmax",
    "log",
    "pick",
]

_tape_ids = itertools.count(1)
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional array plus the bookkeeping needed for backprop.

    ``requires_grad`` marks a leaf (a parameter) that accumulates into
    ``grad``.  Tensors produced by a recorded op carry ``tape`` and
    ``tape_id`` pointing at the node that made them.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim == 0 and arr.size != 1:
            raise StructuralError("empty tensor")
        if any(extent < 1 for extent in arr.shape):
            raise StructuralError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.tape: Optional[Tape] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


@dataclass
class _Node:
    op: str
    inputs: tuple
    needs: tuple
    output: Tensor
    backward_fn: Callable


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; ops executed inside it are recorded.  A tape is
    meant to be used from a single thread (the active-tape stack is
    thread-local).
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t.tape is self

    def record(self, op: str, inputs: Sequence[Tensor], needs: tuple, output: Tensor, backward_fn) -> None:
        output.tape = self
        output.tape_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), needs, output, backward_fn))


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        needs = tuple(tape.tracks(t) for t in inputs)
        if any(needs):
            tape.record(op, inputs, needs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked leaf that ``loss`` depends on.

    Gradients accumulate across calls; call ``zero_grad`` on parameters to
    reset.
    """
    if loss.size != 1:
        raise StructuralError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.tape_id is None:
        raise UsageError("loss was not produced on an active tape")
    pending: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for idx in range(loss.tape_id, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        input_grads = node.backward_fn(g, node.needs)
        for inp, need, ig in zip(node.inputs, node.needs, input_grads):
            if not need or ig is None:
                continue
            if inp.tape is tape and inp.tape_id is not None:
                prev = pending.get(inp.tape_id)
                pending[inp.tape_id] = ig if prev is None else prev + ig
            elif inp.requires_grad:
                ig = np.asarray(ig, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig


# --------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise StructuralError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g, needs: (g, g))


def neg(x: Tensor) -> Tensor:
    return _emit("neg", (x,), -x.data, lambda g, needs: (-g,))


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return _emit("scale", (x,), x.data * f, lambda g, needs: (g * f,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _emit("abs", (x,), np.abs(x.data), lambda g, needs: (g * sign,))


def relu(x: Tensor) -> Tensor:
    # gradient is 0 at exactly 0
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g, needs: (g * mask,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g, needs: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _emit("mean", (x,), out, lambda g, needs: (np.broadcast_to(g / n, shape).astype(x.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise StructuralError(str(exc)) from None
    return _emit("reshape", (x,), out, lambda g, needs: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("transpose", (x,), out, lambda g, needs: (g.transpose(inverse),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x[..., in] @ weight[in, out] + bias[out]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise StructuralError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise StructuralError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    def back(g, needs):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g @ weight.data.T).reshape(x.shape) if needs[0] else None
        gw = x2.T @ g2 if needs[1] else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if needs[2] else None)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", inputs, out, back)


def graph_aggregate(x: Tensor, coeffs: np.ndarray) -> Tensor:
    """Mix node rows with a fixed coefficient table: ``out[i] = sum_j coeffs[i, j] x[j]``.

    ``x`` is ``[..., nodes, channels]``; ``coeffs`` is a constant ``[nodes, nodes]``
    array and receives no gradient.
    """
    k = coeffs.shape[0]
    if coeffs.shape != (k, k) or x.ndim < 2 or x.shape[-2] != k:
        raise StructuralError(f"graph_aggregate: nodes {x.shape} vs coefficients {coeffs.shape}")
    a = np.asarray(coeffs, dtype=x.dtype)
    return _emit("graph_aggregate", (x,), a @ x.data, lambda g, needs: (a.T @ g,))


# --------------------------------------------------------------------------
# convolution and pooling


def _as_batch(x: Tensor, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise StructuralError(f"{what} expects [C, H, W] or [N, C, H, W], got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: str = "same") -> Tensor:
    """Cross-correlation ``out[o, y, x] = bias[o] + sum input[c, y+dy, x+dx] kernel[o, c, dy, dx]``.

    ``padding="same"`` zero-pads by ``k // 2`` on each side; ``"valid"`` does not pad.
    """
    X, batched = _as_batch(x, "conv2d")
    if kernel.ndim != 4:
        raise StructuralError(f"kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    n_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"kernel extent must be square and odd, got {kh}x{kw}")
    if c_in != X.shape[1]:
        raise StructuralError(f"conv2d: input has {X.shape[1]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (n_out,):
        raise StructuralError(f"conv2d: bias {bias.shape} does not match {n_out} output channels")
    if padding == "same":
        pad = kh // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ConfigurationError(f"unknown padding mode {padding!r}")
    n, _, h, w = X.shape
    k = kh
    if k > min(h, w) + 2 * pad:
        raise ConfigurationError(f"kernel extent {k} exceeds padded input {h}x{w}")

    Xp = np.pad(X, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else X
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = sliding_window_view(Xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    kmat = kernel.data.reshape(n_out, c_in * k * k)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, n_out).transpose(0, 3, 1, 2))
    if not batched:
        out = out[0]

    def back(g, needs):
        G = g if batched else g[None]
        gm = G.transpose(0, 2, 3, 1).reshape(-1, n_out)
        gx = gk = gb = None
        if needs[0]:
            dcols = (gm @ kmat).reshape(n, ho, wo, c_in, k, k)
            dXp = np.zeros_like(Xp)
            for dy in range(k):
                for dx in range(k):
                    dXp[:, :, dy:dy + ho, dx:dx + wo] += dcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            gx = dXp[:, :, pad:pad + h, pad:pad + w] if pad else dXp
            if not batched:
                gx = gx[0]
        if needs[1]:
            gk = (gm.T @ cols).reshape(kernel.shape)
        if bias is not None and needs[2]:
            gb = gm.sum(axis=0)
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, back)


def pooling_windows(size: int, out_size: int) -> list[tuple[int, int]]:
    """Half-open windows ``[floor(i*size/out), ceil((i+1)*size/out))`` for each output index."""
    return [((i * size) // out_size, -((-(i + 1) * size) // out_size)) for i in range(out_size)]


def _pooling_matrix(size: int, out_size: int, dtype) -> np.ndarray:
    P = np.zeros((out_size, size), dtype=dtype)
    for i, (start, stop) in enumerate(pooling_windows(size, out_size)):
        P[i, start:stop] = 1.0 / (stop - start)
    return P


def adaptive_avg_pool(x: Tensor, out_size: int) -> Tensor:
    """Average the trailing two axes down to ``out_size x out_size`` windows."""
    if x.ndim < 2:
        raise StructuralError(f"adaptive_avg_pool needs at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    if out_size < 1 or out_size > min(h, w):
        raise ConfigurationError(f"cannot pool {h}x{w} to {out_size}x{out_size}")
    if (h, w) == (out_size, out_size):
        return _emit("adaptive_avg_pool", (x,), x.data.copy(), lambda g, needs: (g,))
    ph = _pooling_matrix(h, out_size, x.dtype)
    pw = _pooling_matrix(w, out_size, x.dtype)
    out = ph @ x.data @ pw.T
    return _emit("adaptive_avg_pool", (x,), out, lambda g, needs: (ph.T @ g @ pw,))


def concat_channels(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` in argument order; all other extents must agree."""
    if not parts:
        raise StructuralError("concat_channels needs at least one part")
    ref = parts[0].shape
    axis = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(p.shape, ref)) if i != axis):
            raise StructuralError(f"concat_channels: {p.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g, needs):
        return [np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis) if need else None
                for i, need in enumerate(needs)]

    return _emit("concat", tuple(parts), out, back)


# --------------------------------------------------------------------------
# classification


def softmax(x: Tensor) -> Tensor:
    """Max-shifted softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), s, back)


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    shifted = x.data + x.dtype.type(eps)
    return _emit("log", (x,), np.log(shifted), lambda g, needs: (g / shifted,))


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[n, index[n]]`` from a ``[N, C]`` tensor (or ``x[index]`` from ``[C]``)."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim == 1:
        if index.ndim != 0:
            raise StructuralError("pick on a vector takes a scalar index")
        rows = ()
    elif x.ndim == 2 and index.shape == (x.shape[0],):
        rows = (np.arange(x.shape[0]),)
    else:
        raise StructuralError(f"pick: index {index.shape} does not match {x.shape}")
    if np.any(index < 0) or np.any(index >= x.shape[-1]):
        raise UsageError(f"pick: index out of range for {x.shape[-1]} entries")
    sel = rows + (index,)

    def back(g, needs):
        gx = np.zeros_like(x.data)
        gx[sel] = g
        return (gx,)

    return _emit("pick", (x,), np.asarray(x.data[sel]), back)
