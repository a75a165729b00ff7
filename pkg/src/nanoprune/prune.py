"""Structural pruning: each transform returns a smaller, self-consistent checkpoint."""

from __future__ import annotations

import numpy as np

from .config import LayerKind
from .model import Checkpoint, Masks


class PruneError(ValueError):
    pass


def _check_keep(keep, size: int, what: str) -> np.ndarray:
    keep = np.asarray(sorted(keep), dtype=np.int64)
    if keep.size == 0:
        raise PruneError(f"{what}: keep set is empty")
    if keep[0] < 0 or keep[-1] >= size:
        raise PruneError(f"{what}: index out of range [0, {size})")
    if np.unique(keep).size != keep.size:
        raise PruneError(f"{what}: duplicate indices")
    return keep


def prune_layers(ckpt: Checkpoint, remove, min_attention: int = 0) -> Checkpoint:
    """Delete whole layers; survivors are renumbered and keep their exact weights.

    At least ``min_attention`` attention layers (capped at the original count)
    must survive.
    """
    cfg = ckpt.config
    remove = set(int(i) for i in remove)
    if any(i < 0 or i >= cfg.n_layers for i in remove):
        raise PruneError("layer index out of range")
    if len(remove) == cfg.n_layers:
        raise PruneError("cannot remove all layers")
    kept = [i for i in range(cfg.n_layers) if i not in remove]
    pattern = tuple(cfg.pattern[i] for i in kept)
    floor = min(cfg.n_attn, min_attention)
    if pattern.count(LayerKind.ATTENTION) < floor:
        raise PruneError(f"pruning would leave fewer than {floor} attention layers")
    tensors = {k: v for k, v in ckpt.tensors.items() if not k.startswith("layers.")}
    for new, old in enumerate(kept):
        for name, arr in ckpt.layer(old).items():
            tensors[f"layers.{new}.{name}"] = arr
    return Checkpoint(cfg.with_(pattern=pattern), tensors)


def prune_ffn(ckpt: Checkpoint, keep: dict[int, list[int]]) -> Checkpoint:
    """Keep the listed neurons in every FFN layer; all layers must keep the same count."""
    cfg = ckpt.config
    ffn_layers = [i for i, k in enumerate(cfg.pattern) if k is LayerKind.FFN]
    if set(keep) != set(ffn_layers):
        raise PruneError(f"keep sets must cover exactly the FFN layers {ffn_layers}")
    sizes = {len(v) for v in keep.values()}
    if len(sizes) > 1:
        raise PruneError("every FFN layer must keep the same number of neurons")
    tensors = dict(ckpt.tensors)
    new_ffn = cfg.d_ffn
    for i, idx in keep.items():
        idx = _check_keep(idx, cfg.d_ffn, f"ffn layer {i}")
        new_ffn = idx.size
        for w in ("w1", "w2"):
            name = f"layers.{i}.ffn.{w}"
            tensors[name] = ckpt.tensors[name][idx]
    return Checkpoint(cfg.with_(d_ffn=new_ffn), tensors)


# tensors with a d_model axis and which axis it is
_D_MODEL_AXES = {
    "embedding": 1, "lm_head": 1, "final_norm": 0, "norm": 0,
    "ffn.w1": 1, "ffn.w2": 1,
    "attn.wq": 0, "attn.wk": 0, "attn.wv": 0, "attn.wo": 1,
    "mamba.w_x": 0, "mamba.w_z": 0, "mamba.w_b": 0, "mamba.w_c": 0, "mamba.w_dt": 0,
    "mamba.w_o": 1,
}


def _d_model_axis(name: str) -> int | None:
    if name.startswith("layers."):
        name = name.split(".", 2)[2]
    return _D_MODEL_AXES.get(name)


def prune_embedding(ckpt: Checkpoint, keep) -> Checkpoint:
    """Slice every d_model axis down to ``keep`` channels; norms are not rescaled."""
    cfg = ckpt.config
    idx = _check_keep(keep, cfg.d_model, "embedding")
    tensors = {}
    for name, arr in ckpt.tensors.items():
        axis = _d_model_axis(name)
        tensors[name] = arr if axis is None else np.take(arr, idx, axis=axis)
    return Checkpoint(cfg.with_(d_model=int(idx.size)), tensors)


def prune_mamba_heads(ckpt: Checkpoint, keep: dict[int, list[list[int]]]) -> Checkpoint:
    """Keep listed heads per Mamba layer, given as one list per group.

    Head indices are global. Every group keeps the same number of heads and
    a head may only be listed under its own group. B/C projections and their
    conv channels are shared by the group and stay untouched.
    """
    cfg = ckpt.config
    mamba_layers = [i for i, k in enumerate(cfg.pattern) if k is LayerKind.MAMBA]
    if set(keep) != set(mamba_layers):
        raise PruneError(f"keep sets must cover exactly the Mamba layers {mamba_layers}")
    hpg, hd = cfg.heads_per_group, cfg.mamba_head_dim
    counts = {len(g) for groups in keep.values() for g in groups}
    if len(counts) != 1:
        raise PruneError("unequal per-group keep counts")
    per = counts.pop()
    if per < 1:
        raise PruneError("each group must keep at least one head")
    tensors = dict(ckpt.tensors)
    for i, groups in keep.items():
        if len(groups) != cfg.mamba_groups:
            raise PruneError(f"layer {i}: expected {cfg.mamba_groups} groups")
        heads = []
        for g, members in enumerate(groups):
            members = _check_keep(members, cfg.mamba_n_heads, f"mamba layer {i} group {g}")
            if members[0] < g * hpg or members[-1] >= (g + 1) * hpg:
                raise PruneError(f"layer {i}: head listed outside group {g}")
            heads.extend(members.tolist())
        heads = np.asarray(heads)
        chans = (heads[:, None] * hd + np.arange(hd)).reshape(-1)
        conv_rows = np.concatenate([chans, np.arange(cfg.d_inner, cfg.conv_channels)])
        p = f"layers.{i}.mamba."
        tensors[p + "w_x"] = ckpt.tensors[p + "w_x"][:, chans]
        tensors[p + "w_z"] = ckpt.tensors[p + "w_z"][:, chans]
        tensors[p + "w_dt"] = ckpt.tensors[p + "w_dt"][:, heads]
        tensors[p + "conv"] = ckpt.tensors[p + "conv"][conv_rows]
        tensors[p + "a_log"] = ckpt.tensors[p + "a_log"][heads]
        tensors[p + "d_skip"] = ckpt.tensors[p + "d_skip"][heads]
        tensors[p + "norm"] = ckpt.tensors[p + "norm"][chans]
        tensors[p + "w_o"] = ckpt.tensors[p + "w_o"][chans]
    return Checkpoint(cfg.with_(mamba_n_heads=per * cfg.mamba_groups), tensors)


# selection helpers ---------------------------------------------------------

def top_k_indices(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, sorted ascending; ties keep lower indices."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return sorted(int(i) for i in order[:k])


def ffn_keep_from_scores(scores: dict[int, np.ndarray], new_dim: int) -> dict[int, list[int]]:
    return {i: top_k_indices(s, new_dim) for i, s in scores.items()}


def mamba_keep_from_rankings(rankings: dict[int, list[list[int]]], per_group: int) -> dict[int, list[list[int]]]:
    """Drop the lowest-ranked heads of each group (rankings are least important first)."""
    return {i: [sorted(r[len(r) - per_group:]) for r in groups] for i, groups in rankings.items()}


def masks_for(ckpt: Checkpoint, *, ffn_keep=None, channel_keep=None, head_keep=None) -> Masks:
    """Zero-masks equivalent to the given keep sets (the oracle for the pruners)."""
    cfg = ckpt.config
    m = Masks()
    if channel_keep is not None:
        m.channels = np.zeros(cfg.d_model, dtype=bool)
        m.channels[list(channel_keep)] = True
    for i, idx in (ffn_keep or {}).items():
        mask = np.zeros(cfg.d_ffn)
        mask[list(idx)] = 1
        m.ffn[i] = mask
    for i, groups in (head_keep or {}).items():
        mask = np.zeros(cfg.mamba_n_heads)
        mask[[h for g in groups for h in g]] = 1
        m.mamba_heads[i] = mask
    return m
