"""Selective state-space scan with per-head scalar decay.

For head h in group g, with head state ``H`` of shape ``[head_dim, state_dim]``::

    a_t = exp(-dt_t * exp(A_log))
    H_t = a_t * H_{t-1} + dt_t * outer(x_t, B_t[g])
    y_t = H_t @ C_t[g] + D * x_t

Two forward paths are provided: a plain sequential recurrence and a chunked
form that evaluates each chunk as a masked quadratic product and only carries
state across chunk boundaries. They agree to rounding error.
"""

from __future__ import annotations

import numpy as np

from .autodiff.tensor import Tensor, attach


def _expand_groups(v: np.ndarray, n_heads: int) -> np.ndarray:
    """``[b, s, G, N] -> [b, s, H, N]`` with contiguous heads per group."""
    return np.repeat(v, n_heads // v.shape[2], axis=2)


def _fold_groups(v: np.ndarray, n_groups: int) -> np.ndarray:
    b, s, h, n = v.shape
    return v.reshape(b, s, n_groups, h // n_groups, n).sum(axis=3)


def scan_sequential(x, dt, a_log, b, c, d, return_states: bool = False):
    """Reference recurrence. Shapes: x [b,s,H,P], dt [b,s,H], b/c [b,s,G,N]."""
    bsz, s, h, p = x.shape
    bh = _expand_groups(b, h)
    ch = _expand_groups(c, h)
    decay = np.exp(-dt * np.exp(a_log))
    state = np.zeros((bsz, h, p, bh.shape[-1]), dtype=x.dtype)
    y = np.empty_like(x)
    states = np.empty((bsz, s, h, p, bh.shape[-1]), dtype=x.dtype) if return_states else None
    for t in range(s):
        state = decay[:, t, :, None, None] * state + (
            dt[:, t, :, None, None] * x[:, t, :, :, None] * bh[:, t, :, None, :]
        )
        y[:, t] = np.einsum("bhpn,bhn->bhp", state, ch[:, t]) + d[:, None] * x[:, t]
        if return_states:
            states[:, t] = state
    return (y, states) if return_states else y


def scan_chunked(x, dt, a_log, b, c, d, chunk: int = 16):
    """Chunked evaluation of the same recurrence."""
    bsz, s, h, p = x.shape
    bh = _expand_groups(b, h)
    ch = _expand_groups(c, h)
    log_a = -dt * np.exp(a_log)  # [b,s,H]
    u = dt[..., None] * x  # [b,s,H,P]
    n = bh.shape[-1]
    state = np.zeros((bsz, h, p, n), dtype=x.dtype)
    y = np.empty_like(x)
    for start in range(0, s, chunk):
        sl = slice(start, min(start + chunk, s))
        q = sl.stop - sl.start
        cum = np.cumsum(log_a[:, sl], axis=1)  # [b,q,H]
        # seg[b,H,t,r] = sum_{r < k <= t} log a_k for r <= t
        seg = cum.transpose(0, 2, 1)[..., :, None] - cum.transpose(0, 2, 1)[..., None, :]
        causal = np.tril(np.ones((q, q), dtype=bool))
        weights = np.where(causal, np.exp(np.where(causal, seg, 0.0)), 0.0)
        scores = np.einsum("bthn,brhn->bhtr", ch[:, sl], bh[:, sl]) * weights
        intra = np.einsum("bhtr,brhp->bthp", scores, u[:, sl])
        carry = np.exp(cum)[..., None] * np.einsum("bhpn,bthn->bthp", state, ch[:, sl])
        y[:, sl] = intra + carry + d[:, None] * x[:, sl]
        tail = np.exp(cum[:, -1:, :] - cum)  # decay from each step to chunk end
        state = np.exp(cum[:, -1])[..., None, None] * state + np.einsum(
            "brh,brhp,brhn->bhpn", tail, u[:, sl], bh[:, sl]
        )
    return y


def selective_scan(
    x: Tensor, dt: Tensor, a_log: Tensor, b: Tensor, c: Tensor, d: Tensor,
    method: str = "chunked", chunk: int = 16,
) -> Tensor:
    """Differentiable scan; the reverse pass runs the adjoint recurrence."""
    xd, dtd, ad, bd, cd, dd = (t.data for t in (x, dt, a_log, b, c, d))
    if method == "chunked":
        y = scan_chunked(xd, dtd, ad, bd, cd, dd, chunk=chunk)
    elif method == "sequential":
        y = scan_sequential(xd, dtd, ad, bd, cd, dd)
    else:
        raise ValueError(f"unknown scan method {method!r}")

    def backward(gy):
        return _scan_backward(gy, xd, dtd, ad, bd, cd, dd)

    return attach(y, (x, dt, a_log, b, c, d), backward)


def _scan_backward(gy, x, dt, a_log, b, c, d):
    bsz, s, h, p = x.shape
    g = b.shape[2]
    _, states = scan_sequential(x, dt, a_log, b, c, d, return_states=True)
    bh = _expand_groups(b, h)
    ch = _expand_groups(c, h)
    ea = np.exp(a_log)
    decay = np.exp(-dt * ea)

    gx = gy * d[:, None]
    gd = np.einsum("bshp,bshp->h", gy, x)
    gdt = np.zeros_like(dt)
    ga_log = np.zeros_like(a_log)
    gbh = np.zeros_like(bh)
    gch = np.einsum("bshpn,bshp->bshn", states, gy)

    gstate = np.zeros((bsz, h, p, bh.shape[-1]), dtype=x.dtype)
    for t in range(s - 1, -1, -1):
        gstate = gstate + gy[:, t, :, :, None] * ch[:, t, :, None, :]
        prev = states[:, t - 1] if t > 0 else np.zeros_like(gstate)
        g_decay = np.einsum("bhpn,bhpn->bh", gstate, prev)
        gb_x = np.einsum("bhpn,bhn->bhp", gstate, bh[:, t])  # dL/d(dt*x)
        gx[:, t] += dt[:, t, :, None] * gb_x
        gdt[:, t] = np.einsum("bhp,bhp->bh", gb_x, x[:, t])
        gbh[:, t] = dt[:, t, :, None] * np.einsum("bhpn,bhp->bhn", gstate, x[:, t])
        # a = exp(-dt * e^A)
        da = g_decay * decay[:, t]
        gdt[:, t] -= da * ea
        ga_log -= np.einsum("bh,bh->h", da, dt[:, t]) * ea
        gstate = decay[:, t, :, None, None] * gstate
    return gx, gdt, ga_log, _fold_groups(gbh, g), _fold_groups(gch, g), gd
