"""Hybrid decoder: parameter schema, initialization and forward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import resolve_dtype
from .config import LayerKind, ModelConfig
from .ssm import selective_scan


def layer_shapes(cfg: ModelConfig, kind: LayerKind) -> dict[str, tuple[int, ...]]:
    """Tensor shapes owned by one layer of ``kind`` (names relative to the layer)."""
    d = cfg.d_model
    shapes = {"norm": (d,)}
    if kind is LayerKind.FFN:
        shapes.update({"ffn.w1": (cfg.d_ffn, d), "ffn.w2": (cfg.d_ffn, d)})
    elif kind is LayerKind.ATTENTION:
        q = cfg.n_q_heads * cfg.attn_head_dim
        kv = cfg.n_kv_heads * cfg.attn_head_dim
        shapes.update({
            "attn.wq": (d, q), "attn.wk": (d, kv), "attn.wv": (d, kv), "attn.wo": (q, d),
        })
    else:
        gn = cfg.mamba_groups * cfg.mamba_state_dim
        h = cfg.mamba_n_heads
        shapes.update({
            "mamba.w_x": (d, cfg.d_inner),
            "mamba.w_z": (d, cfg.d_inner),
            "mamba.w_b": (d, gn),
            "mamba.w_c": (d, gn),
            "mamba.w_dt": (d, h),
            "mamba.conv": (cfg.conv_channels, cfg.conv_window),
            "mamba.a_log": (h,),
            "mamba.d_skip": (h,),
            "mamba.norm": (cfg.d_inner,),
            "mamba.w_o": (cfg.d_inner, d),
        })
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Full checkpoint schema in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {"embedding": (cfg.vocab_size, cfg.d_model)}
    for i, kind in enumerate(cfg.pattern):
        for name, shape in layer_shapes(cfg, kind).items():
            shapes[f"layers.{i}.{name}"] = shape
    shapes["final_norm"] = (cfg.d_model,)
    if not cfg.tied_embeddings:
        shapes["lm_head"] = (cfg.vocab_size, cfg.d_model)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Named tensor store for one model; validated against its config."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        expected = param_shapes(self.config)
        missing = expected.keys() - self.tensors.keys()
        extra = self.tensors.keys() - expected.keys()
        if missing or extra:
            raise CheckpointError(f"tensor set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise CheckpointError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def layer(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, precision) -> "Checkpoint":
        dt = resolve_dtype(precision)
        return Checkpoint(self.config, {k: v.astype(dt) for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_checkpoint(cfg: ModelConfig, seed: int = 0, precision="float64") -> Checkpoint:
    """Random initialization: scaled normals for projections, unit norms, Mamba-2 style decays."""
    rng = np.random.default_rng(seed)
    dt = resolve_dtype(precision)
    depth_scale = 1 / math.sqrt(2 * max(cfg.n_layers, 1))
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("norm", "final_norm"):
            arr = np.ones(shape)
        elif leaf == "a_log":
            arr = np.log(rng.uniform(1, 16, size=shape))
        elif leaf == "d_skip":
            arr = np.ones(shape)
        elif leaf == "conv":
            arr = rng.normal(0, 1 / math.sqrt(shape[1]), size=shape)
        elif leaf in ("embedding", "lm_head"):
            arr = rng.normal(0, 1.0 if leaf == "embedding" else 1 / math.sqrt(shape[1]), size=shape)
        else:
            fan_in = shape[1] if leaf in ("w1",) else shape[0]
            std = 1 / math.sqrt(fan_in)
            if leaf in ("w2", "wo", "w_o"):
                std *= depth_scale
            arr = rng.normal(0, std, size=shape)
        tensors[name] = arr.astype(dt)
    return Checkpoint(cfg, tensors)


@dataclass
class Masks:
    """Zero-masks that emulate pruning on an unpruned model.

    ``channels`` marks live d_model channels; RMSNorm over the residual stream
    then averages over live channels only, which is exactly what a sliced
    model computes.
    """

    channels: np.ndarray | None = None
    ffn: dict[int, np.ndarray] = field(default_factory=dict)
    mamba_heads: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class Capture:
    """Activations recorded during a forward pass for importance scoring."""

    norm_out: dict = field(default_factory=dict)  # layer index or "final" -> [b,s,d]
    ffn_act: dict = field(default_factory=dict)  # layer -> [b,s,d_ffn]
    mamba_xproj: dict = field(default_factory=dict)  # layer -> [b,s,H,P]


def _masked_rmsnorm(x: Tensor, gamma: Tensor, eps: float, live: np.ndarray | None) -> Tensor:
    if live is None:
        return ops.rmsnorm(x, gamma, eps)
    n_live = live.sum()
    d = live.size
    # rescaling eps keeps mean(x^2) + eps identical to the sliced computation
    y = ops.rmsnorm(x, gamma, eps * n_live / d)
    return ops.scale(y, math.sqrt(n_live / d))


def _params(ckpt: Checkpoint, track: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=track) for k, v in ckpt.tensors.items()}


def ffn_forward(x: Tensor, w1: Tensor, w2: Tensor, mask: np.ndarray | None = None,
                capture: dict | None = None) -> Tensor:
    """``squared_relu(x @ w1.T) @ w2``."""
    act = ops.squared_relu(ops.matmul(x, ops.transpose(w1)))
    if mask is not None:
        act = ops.mul(act, Tensor(mask.astype(act.dtype)))
    if capture is not None:
        capture["act"] = act.data
    return ops.matmul(act, w2)


def gqa_attention_forward(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                          n_q: int, n_kv: int, head_dim: int) -> Tensor:
    """Causal grouped-query attention without position embeddings.

    Query head i reads KV head ``i * n_kv // n_q``.
    """
    b, s, _ = x.shape
    q = ops.transpose(ops.reshape(ops.matmul(x, wq), (b, s, n_q, head_dim)), (0, 2, 1, 3))
    k = ops.transpose(ops.reshape(ops.matmul(x, wk), (b, s, n_kv, head_dim)), (0, 2, 3, 1))
    v = ops.transpose(ops.reshape(ops.matmul(x, wv), (b, s, n_kv, head_dim)), (0, 2, 1, 3))
    if n_q != n_kv:
        k = ops.repeat(k, n_q // n_kv, axis=1)
        v = ops.repeat(v, n_q // n_kv, axis=1)
    scores = ops.scale(ops.matmul(q, k), 1 / math.sqrt(head_dim))
    probs = ops.softmax(scores, causal=True)
    out = ops.transpose(ops.matmul(probs, v), (0, 2, 1, 3))
    return ops.matmul(ops.reshape(out, (b, s, n_q * head_dim)), wo)


def mamba2_forward(x: Tensor, p: dict[str, Tensor], cfg: ModelConfig,
                   head_mask: np.ndarray | None = None, capture: dict | None = None,
                   scan_method: str = "chunked") -> Tensor:
    b, s, _ = x.shape
    h, hd = cfg.mamba_n_heads, cfg.mamba_head_dim
    g, n = cfg.mamba_groups, cfg.mamba_state_dim
    xs = ops.matmul(x, p["w_x"])
    if capture is not None:
        capture["xproj"] = xs.data.reshape(b, s, h, hd)
    z = ops.matmul(x, p["w_z"])
    xbc = ops.concat([xs, ops.matmul(x, p["w_b"]), ops.matmul(x, p["w_c"])], axis=-1)
    xbc = ops.silu(ops.causal_conv1d(xbc, p["conv"]))
    xs, bs, cs = ops.split(xbc, [cfg.d_inner, g * n, g * n], axis=-1)
    dt = ops.softplus(ops.matmul(x, p["w_dt"]))
    y = selective_scan(
        ops.reshape(xs, (b, s, h, hd)), dt, p["a_log"],
        ops.reshape(bs, (b, s, g, n)), ops.reshape(cs, (b, s, g, n)), p["d_skip"],
        method=scan_method,
    )
    y = ops.mul(y, ops.silu(ops.reshape(z, (b, s, h, hd))))
    # gated norm is per head, so heads stay independent under pruning
    y = ops.rmsnorm(y, ops.reshape(p["norm"], (h, hd)), cfg.norm_eps)
    if head_mask is not None:
        y = ops.mul(y, Tensor(np.repeat(head_mask, hd).reshape(h, hd).astype(y.dtype)))
    return ops.matmul(ops.reshape(y, (b, s, h * hd)), p["w_o"])


def model_forward(
    tokens,
    ckpt: Checkpoint,
    *,
    skip: frozenset[int] | set[int] = frozenset(),
    masks: Masks | None = None,
    capture: Capture | None = None,
    params: dict[str, Tensor] | None = None,
    scan_method: str = "chunked",
) -> Tensor:
    """Logits ``[b, s, vocab]`` for integer ``tokens`` ``[b, s]``.

    ``params`` lets a trainer pass tracked tensors; otherwise the checkpoint
    arrays are wrapped untracked. Layers in ``skip`` pass the residual through.
    """
    cfg = ckpt.config
    tokens = np.atleast_2d(np.asarray(tokens))
    if params is None:
        params = _params(ckpt, track=False)
    live = None if masks is None else masks.channels
    if live is not None:
        live = np.asarray(live, dtype=bool)

    h = ops.embedding(tokens, params["embedding"])
    chan = None if live is None else Tensor(live.astype(h.dtype))
    if chan is not None:
        h = ops.mul(h, chan)
    for i, kind in enumerate(cfg.pattern):
        if i in skip:
            continue
        pre = f"layers.{i}."
        xn = _masked_rmsnorm(h, params[pre + "norm"], cfg.norm_eps, live)
        if capture is not None:
            capture.norm_out[i] = xn.data
        if kind is LayerKind.FFN:
            cap = {} if capture is not None else None
            out = ffn_forward(xn, params[pre + "ffn.w1"], params[pre + "ffn.w2"],
                              None if masks is None else masks.ffn.get(i), cap)
            if cap is not None:
                capture.ffn_act[i] = cap["act"]
        elif kind is LayerKind.ATTENTION:
            out = gqa_attention_forward(
                xn, params[pre + "attn.wq"], params[pre + "attn.wk"], params[pre + "attn.wv"],
                params[pre + "attn.wo"], cfg.n_q_heads, cfg.n_kv_heads, cfg.attn_head_dim,
            )
        else:
            mp = {k[len(pre) + 6:]: v for k, v in params.items() if k.startswith(pre + "mamba.")}
            cap = {} if capture is not None else None
            out = mamba2_forward(xn, mp, cfg, None if masks is None else masks.mamba_heads.get(i),
                                 cap, scan_method)
            if cap is not None:
                capture.mamba_xproj[i] = cap["xproj"]
        if chan is not None:
            out = ops.mul(out, chan)
        h = ops.add(h, out)
    h = _masked_rmsnorm(h, params["final_norm"], cfg.norm_eps, live)
    if capture is not None:
        capture.norm_out["final"] = h.data
    head = params["embedding"] if cfg.tied_embeddings else params["lm_head"]
    return ops.matmul(h, ops.transpose(head))


def logits(tokens, ckpt: Checkpoint, **kw) -> np.ndarray:
    return model_forward(tokens, ckpt, **kw).data
