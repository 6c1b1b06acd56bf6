"""Independent oracles shared by the test modules."""

import numpy as np

from mgrnet import tensor as T
from mgrnet.tensor import Tape, Tensor


def param(array):
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


def project(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar loss ``sum(out * R)`` for a fixed random ``R``."""
    n = out.size
    weights = Tensor(rng.standard_normal((n, 1)))
    return T.sum(T.linear(T.reshape(out, (1, n)), weights))


def gradient_error(loss_fn, params, h=1e-5, max_entries=None, rng=None):
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over (a sample of) parameter entries.

    Numeric derivatives are central differences computed without a tape.
    """
    for p in params:
        p.zero_grad()
    with Tape():
        loss = loss_fn()
        T.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        entries = list(np.ndindex(p.shape))
        if max_entries is not None and len(entries) > max_entries:
            pick = (rng or np.random.default_rng(0)).choice(len(entries), max_entries, replace=False)
            entries = [entries[i] for i in pick]
        for idx in entries:
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss_fn().item()
            p.data[idx] = orig - h
            down = loss_fn().item()
            p.data[idx] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(a[idx] - numeric) / max(1.0, abs(numeric)))
    return worst


def naive_conv2d(x, kernel, bias, pad):
    """Direct nested-loop cross-correlation of one ``[C, H, W]`` image."""
    c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for y in range(ho):
            for xx in range(wo):
                acc = bias[o] if bias is not None else 0.0
                for c in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            acc += xp[c, y + dy, xx + dx] * kernel[o, c, dy, dx]
                out[o, y, xx] = acc
    return out


def window_mean_1d(values, out):
    """Adaptive-average windows written out by hand from the floor/ceil rule."""
    n = len(values)
    res = []
    for i in range(out):
        start = (i * n) // out
        stop = -((-(i + 1) * n) // out)
        res.append(sum(values[start:stop]) / (stop - start))
    return res


def kappa_from_pairs(true, pred, num_classes):
    """OA, AA and Kappa recounted from raw label pairs with plain Python loops."""
    n = len(true)
    correct = sum(1 for t, p in zip(true, pred) if t == p)
    recalls = []
    for c in range(num_classes):
        members = [p for t, p in zip(true, pred) if t == c]
        if members:
            recalls.append(sum(1 for p in members if p == c) / len(members))
    p_o = correct / n
    p_e = sum(sum(1 for t in true if t == c) * sum(1 for p in pred if p == c) for c in range(num_classes)) / n**2
    kappa = 1.0 if p_e == 1 else (p_o - p_e) / (1 - p_e)
    return p_o, sum(recalls) / len(recalls), kappa
