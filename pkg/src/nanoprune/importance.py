"""Forward-pass-only importance scores for layers, FFN neurons, channels and Mamba heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import LayerKind
from .model import Capture, Checkpoint, logits, model_forward

AGGREGATIONS = ("mean", "l2")


@dataclass
class CalibrationSet:
    tokens: np.ndarray  # [n, seq_len] int
    seed: int = 0

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        if self.tokens.shape[0] < 1 or self.tokens.shape[1] < 1:
            raise ValueError("empty calibration set")

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    def batches(self, batch_size: int):
        for i in range(0, self.n, batch_size):
            yield self.tokens[i:i + batch_size]


def aggregate(values: np.ndarray, agg: str, axis=0) -> np.ndarray:
    """``mean`` is (1/n) * sum |v|; ``l2`` is sqrt(sum v^2)."""
    if agg == "mean":
        return np.mean(np.abs(values), axis=axis)
    if agg == "l2":
        return np.sqrt(np.sum(values * values, axis=axis))
    raise ValueError(f"unknown aggregation {agg!r}; expected one of {AGGREGATIONS}")


class _Accumulator:
    """Streams per-row statistics so batches can be scored one at a time."""

    def __init__(self, agg: str):
        if agg not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {agg!r}; expected one of {AGGREGATIONS}")
        self.agg, self.total, self.n = agg, None, 0

    def add(self, rows: np.ndarray) -> None:
        rows = rows.astype(np.float64)
        part = np.abs(rows).sum(axis=0) if self.agg == "mean" else (rows * rows).sum(axis=0)
        self.total = part if self.total is None else self.total + part
        self.n += rows.shape[0]

    def result(self) -> np.ndarray:
        return self.total / self.n if self.agg == "mean" else np.sqrt(self.total)


def _forward_capture(ckpt: Checkpoint, calib: CalibrationSet, batch_size: int):
    for batch in calib.batches(batch_size):
        cap = Capture()
        model_forward(batch, ckpt, capture=cap)
        yield cap


def logit_mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def layer_importance_iterative(ckpt: Checkpoint, calib: CalibrationSet, target_depth: int,
                               candidates=None, min_attention: int = 0,
                               batch_size: int = 64) -> list[tuple[int, float]]:
    """Greedy depth reduction by logit MSE against the full model.

    Each round skips every remaining candidate in turn, keeps the removal with
    the smallest MSE (lowest index on ties) and records ``(index, mse)``.
    ``candidates`` restricts which layers may be removed; attention layers are
    never dropped below ``min_attention``.
    """
    cfg = ckpt.config
    if not 0 <= target_depth < cfg.n_layers:
        raise ValueError(f"target_depth must be in [0, {cfg.n_layers})")
    pool = list(range(cfg.n_layers)) if candidates is None else sorted(candidates)
    batches = list(calib.batches(batch_size))
    reference = [logits(b, ckpt) for b in batches]

    def mse_without(removed: set[int]) -> float:
        sq, count = 0.0, 0
        for b, ref in zip(batches, reference):
            diff = logits(b, ckpt, skip=removed) - ref
            sq += float(np.sum(diff * diff))
            count += diff.size
        return sq / count

    removed: set[int] = set()
    order = []
    for _ in range(cfg.n_layers - target_depth):
        attn_left = sum(1 for i, k in enumerate(cfg.pattern)
                        if k is LayerKind.ATTENTION and i not in removed)
        live = [i for i in pool if i not in removed
                and (cfg.pattern[i] is not LayerKind.ATTENTION or attn_left > min_attention)]
        if not live:
            raise ValueError("ran out of removable layers before reaching target depth")
        scores = [(mse_without(removed | {i}), i) for i in live]
        best_mse, best = min(scores)
        removed.add(best)
        order.append((best, best_mse))
    return order


def ffn_neuron_importance(ckpt: Checkpoint, calib: CalibrationSet, agg: str = "l2",
                          batch_size: int = 64) -> dict[int, np.ndarray]:
    """Score each FFN neuron by aggregating its activations over batch and sequence."""
    accs: dict[int, _Accumulator] = {}
    for cap in _forward_capture(ckpt, calib, batch_size):
        for i, act in cap.ffn_act.items():
            accs.setdefault(i, _Accumulator(agg)).add(act.reshape(-1, act.shape[-1]))
    return {i: acc.result() for i, acc in sorted(accs.items())}


def embedding_channel_importance(ckpt: Checkpoint, calib: CalibrationSet, agg: str = "l2",
                                 batch_size: int = 64) -> np.ndarray:
    """Per-channel aggregate of every RMSNorm output, summed over norm layers."""
    accs: dict = {}
    for cap in _forward_capture(ckpt, calib, batch_size):
        for key, out in cap.norm_out.items():
            accs.setdefault(key, _Accumulator(agg)).add(out.reshape(-1, out.shape[-1]))
    total = np.zeros(ckpt.config.d_model)
    for acc in accs.values():
        total += acc.result()
    return total


@dataclass
class MambaHeadScores:
    channel_scores: np.ndarray  # [d_head] s_d
    head_scores: np.ndarray  # [H] f_h
    group_rankings: list[list[int]]  # per group, least important first


def rank_within_groups(head_scores: np.ndarray, n_groups: int) -> list[list[int]]:
    """Ascending argsort per contiguous head group; ties go to the lower index."""
    per = len(head_scores) // n_groups
    out = []
    for g in range(n_groups):
        idx = np.arange(g * per, (g + 1) * per)
        out.append([int(i) for i in idx[np.argsort(head_scores[idx], kind="stable")]])
    return out


def mamba_head_importance(ckpt: Checkpoint, calib: CalibrationSet, agg: str = "l2",
                          batch_size: int = 64) -> dict[int, MambaHeadScores]:
    """Nested scoring on the ``W_x`` projection output.

    Activations ``s[h, d]`` are aggregated over batch and sequence; channel d
    scores ``||A[:, d]||_2``, head h scores ``||A[h, :]||_2``, and heads are
    ranked within their group.
    """
    cfg = ckpt.config
    accs: dict[int, _Accumulator] = {}
    for cap in _forward_capture(ckpt, calib, batch_size):
        for i, xp in cap.mamba_xproj.items():
            accs.setdefault(i, _Accumulator(agg)).add(xp.reshape(-1, cfg.mamba_n_heads, cfg.mamba_head_dim))
    out = {}
    for i, acc in sorted(accs.items()):
        a = acc.result()  # [H, P]
        f_h = np.sqrt(np.sum(a * a, axis=1))
        out[i] = MambaHeadScores(
            channel_scores=np.sqrt(np.sum(a * a, axis=0)),
            head_scores=f_h,
            group_rankings=rank_within_groups(f_h, cfg.mamba_groups),
        )
    return out


@dataclass
class ImportanceReport:
    layer_removal_order: list[tuple[int, float]] = field(default_factory=list)
    ffn_scores: dict[str, dict[int, list[float]]] = field(default_factory=dict)  # agg -> layer -> scores
    channel_scores: dict[str, list[float]] = field(default_factory=dict)  # agg -> scores
    mamba_head_scores: dict[int, dict] = field(default_factory=dict)
    aggregations: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["layer_removal_order"] = [[int(i), float(m)] for i, m in self.layer_removal_order]
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ImportanceReport":
        d = json.loads(text)
        return cls(
            layer_removal_order=[(int(i), float(m)) for i, m in d["layer_removal_order"]],
            ffn_scores={a: {int(k): v for k, v in per.items()} for a, per in d["ffn_scores"].items()},
            channel_scores=d["channel_scores"],
            mamba_head_scores={int(k): v for k, v in d["mamba_head_scores"].items()},
            aggregations=d["aggregations"],
        )

    def ffn(self, agg: str = "l2") -> dict[int, np.ndarray]:
        return {i: np.asarray(v) for i, v in self.ffn_scores[agg].items()}

    def channels(self, agg: str = "l2") -> np.ndarray:
        return np.asarray(self.channel_scores[agg])

    def mamba_rankings(self) -> dict[int, list[list[int]]]:
        return {i: v["group_rankings"] for i, v in self.mamba_head_scores.items()}


def build_report(ckpt: Checkpoint, calib: CalibrationSet, aggs=AGGREGATIONS,
                 target_depth: int | None = None, min_attention: int = 0,
                 batch_size: int = 64) -> ImportanceReport:
    """Run every scorer; both aggregations are kept, consumers default to l2."""
    rep = ImportanceReport(aggregations=list(aggs))
    if target_depth is not None:
        rep.layer_removal_order = layer_importance_iterative(
            ckpt, calib, target_depth, min_attention=min_attention, batch_size=batch_size)
    for agg in aggs:
        rep.ffn_scores[agg] = {i: v.tolist() for i, v in
                               ffn_neuron_importance(ckpt, calib, agg, batch_size).items()}
        rep.channel_scores[agg] = embedding_channel_importance(ckpt, calib, agg, batch_size).tolist()
    if LayerKind.MAMBA in ckpt.config.pattern:
        for i, sc in mamba_head_importance(ckpt, calib, "l2", batch_size).items():
            rep.mamba_head_scores[i] = {
                "channel_scores": sc.channel_scores.tolist(),
                "head_scores": sc.head_scores.tolist(),
                "group_rankings": sc.group_rankings,
            }
    return rep
