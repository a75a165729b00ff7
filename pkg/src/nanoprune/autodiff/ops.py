"""Forward kernels with their reverse-mode rules.

Shapes are strict: elementwise binary ops require equal shapes, except that
a right operand may match the trailing dims of the left one (per-channel
scales). Anything else needs an explicit reshape.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, attach


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


def _check_trailing(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ValueError(f"{name}: shapes {a.shape} and {b.shape} are not compatible")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a, b, "add")
    return attach(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a, b, "sub")
    return attach(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a, b, "mul")
    ad, bd = a.data, b.data
    return attach(ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return attach(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if bd.ndim == 2:

        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    elif bd.shape[:-2] == ad.shape[:-2]:

        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    else:
        raise ValueError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    return attach(ad @ bd, (a, b), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return attach(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return attach(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return attach(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def split(a: Tensor, sizes: list[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of size {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(take_slice(a, start, start + n, axis))
        start += n
    return out


def take_slice(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % a.ndim
    idx = (slice(None),) * axis + (slice(start, stop),)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return attach(a.data[idx], (a,), backward)


def repeat(a: Tensor, n: int, axis: int) -> Tensor:
    """Repeat each slice along ``axis`` ``n`` times consecutively (np.repeat)."""
    axis = axis % a.ndim
    shape = a.shape

    def backward(g):
        gs = g.reshape(shape[:axis] + (shape[axis], n) + shape[axis + 1:])
        return (gs.sum(axis=axis + 1),)

    return attach(np.repeat(a.data, n, axis=axis), (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return attach(y, (a,), lambda g: (g * y,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return attach(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return attach(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),)
    )


def squared_relu(a: Tensor) -> Tensor:
    r = np.maximum(a.data, 0)
    return attach(r * r, (a,), lambda g: (2 * r * g,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1 / (1 + np.exp(-x))
    return attach(x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0, x)
    return attach(y, (a,), lambda g: (g / (1 + np.exp(-x)),))


def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gamma.

    gamma must match the trailing dims of x; a 2-D gamma ``[heads, dim]``
    gives each head its own scale while still normalizing per head.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    k = gamma.ndim
    if k < 1 or x.shape[x.ndim - k:] != gamma.shape:
        raise ValueError(f"rmsnorm: gamma {gamma.shape} does not match {x.shape}")
    xd, gd = x.data, gamma.data
    ms = np.mean(xd * xd, axis=-1, keepdims=True) + eps
    if np.any(ms == 0):
        raise ValueError("degenerate norm: zero vector with eps = 0")
    inv = 1 / np.sqrt(ms)
    xhat = xd * inv
    n = xd.shape[-1]

    def backward(g):
        gx_hat = g * gd
        dot = np.sum(gx_hat * xhat, axis=-1, keepdims=True)
        gx = inv * (gx_hat - xhat * dot / n)
        return gx, _unbroadcast(g * xhat, gd.shape)

    return attach(xhat * gd, (x, gamma), backward)


def softmax(a: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis; ``causal`` masks key j > query i on the last two axes."""
    x = a.data
    if causal:
        s_q, s_k = x.shape[-2], x.shape[-1]
        mask = np.triu(np.ones((s_q, s_k), dtype=bool), k=1 + s_k - s_q)
        x = np.where(mask, -np.inf, x)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return attach(y, (a,), backward)


def causal_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Depthwise causal convolution: ``y[t, c] = sum_k w[c, k] * x[t - W + 1 + k, c]``.

    x is ``[..., seq, channels]``, w is ``[channels, window]``.
    """
    xd, wd = x.data, w.data
    c, width = wd.shape
    if xd.shape[-1] != c:
        raise ValueError(f"conv: {c} kernels for {xd.shape[-1]} channels")
    s = xd.shape[-2]
    pad = [(0, 0)] * (xd.ndim - 2) + [(width - 1, 0), (0, 0)]
    xp = np.pad(xd, pad)
    y = np.zeros_like(xd)
    for k in range(width):
        y += xp[..., k:k + s, :] * wd[:, k]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, s, c)
        xp2 = xp.reshape(-1, s + width - 1, c)
        for k in range(width):
            gxp[..., k:k + s, :] += g * wd[:, k]
            gw[:, k] = np.einsum("bsc,bsc->c", g2, xp2[:, k:k + s, :])
        return gxp[..., width - 1:, :], gw

    return attach(y, (x, w), backward)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"token id out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return attach(table.data[ids], (table,), backward)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    return x - m - np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood over all positions."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    lp = _log_softmax(logits.data).reshape(-1, v)
    t = targets.reshape(-1)
    n = t.size
    loss = -lp[np.arange(n), t].mean()

    def backward(g):
        p = np.exp(lp)
        p[np.arange(n), t] -= 1
        return ((g / n) * p.reshape(logits.shape),)

    return attach(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def kl_div(student_logits: Tensor, teacher_logits: np.ndarray) -> Tensor:
    """Mean over positions of KL(softmax(teacher) || softmax(student)).

    The teacher enters as plain data, so no gradient flows to it.
    """
    t = np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise ValueError(f"kl_div: shape mismatch {student_logits.shape} vs {t.shape}")
    v = t.shape[-1]
    lpt = _log_softmax(t).reshape(-1, v)
    lps = _log_softmax(student_logits.data).reshape(-1, v)
    pt = np.exp(lpt)
    n = pt.shape[0]
    loss = np.sum(pt * (lpt - lps)) / n

    def backward(g):
        return ((g / n) * (np.exp(lps) - pt).reshape(student_logits.shape),)

    return attach(np.asarray(loss, dtype=student_logits.dtype), (student_logits,), backward)
