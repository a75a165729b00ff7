"""Inference-memory model for hybrid decoders and budgeted candidate search."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

from .config import ModelConfig, build_layer_pattern
from .model import count_params

GIB = 1024**3


@dataclass(frozen=True)
class MemoryEstimate:
    weight_bytes: int
    kv_cache_bytes: int
    ssm_state_bytes: int
    seq_len: int
    batch: int
    bytes_per_elem: int

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.kv_cache_bytes + self.ssm_state_bytes

    @property
    def total_gib(self) -> float:
        return self.total_bytes / GIB

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_bytes"] = self.total_bytes
        return d


def kv_cache_elems(cfg: ModelConfig, seq_len: int, batch: int) -> int:
    return 2 * cfg.n_attn * cfg.n_kv_heads * cfg.attn_head_dim * seq_len * batch


def ssm_state_elems(cfg: ModelConfig, batch: int) -> int:
    """Recurrent state per Mamba layer: SSM state plus the conv window buffer."""
    per_layer = (cfg.mamba_n_heads * cfg.mamba_head_dim * cfg.mamba_state_dim
                 + cfg.conv_window * cfg.conv_channels)
    return cfg.n_mamba * batch * per_layer


def estimate_memory(cfg: ModelConfig, seq_len: int, batch: int = 1,
                    bytes_per_elem: int = 2) -> MemoryEstimate:
    if seq_len < 1 or batch < 1 or bytes_per_elem < 1:
        raise ValueError("seq_len, batch and bytes_per_elem must be positive")
    return MemoryEstimate(
        weight_bytes=count_params(cfg) * bytes_per_elem,
        kv_cache_bytes=kv_cache_elems(cfg, seq_len, batch) * bytes_per_elem,
        ssm_state_bytes=ssm_state_elems(cfg, batch) * bytes_per_elem,
        seq_len=seq_len, batch=batch, bytes_per_elem=bytes_per_elem,
    )


def derive_budget(gpu_bytes: float, framework_buffer_fraction: float, reserved_bytes: float) -> float:
    """``gpu * (1 - buffer_fraction) - reserved``."""
    if not 0 <= framework_buffer_fraction < 1:
        raise ValueError("framework_buffer_fraction must be in [0, 1)")
    budget = gpu_bytes * (1 - framework_buffer_fraction) - reserved_bytes
    if budget < 0:
        raise ValueError(f"negative budget: {budget}")
    return budget


@dataclass
class SearchSpace:
    depths: list[int]
    d_models: list[int]
    d_ffns: list[int]
    mamba_heads: list[int]
    n_attn: int = 4

    def __post_init__(self):
        for name in ("depths", "d_models", "d_ffns", "mamba_heads"):
            if not getattr(self, name):
                raise ValueError(f"search axis {name} is empty")

    @property
    def size(self) -> int:
        return len(self.depths) * len(self.d_models) * len(self.d_ffns) * len(self.mamba_heads)

    def configs(self, base: ModelConfig, pattern=None):
        """Grid configs in axis order; ``pattern`` pins the layer layout (depth must match)."""
        if pattern is not None and any(dep != len(pattern) for dep in self.depths):
            raise ValueError("a fixed pattern needs every searched depth to equal its length")
        for depth, d, f, h in itertools.product(self.depths, self.d_models, self.d_ffns,
                                                self.mamba_heads):
            pat = tuple(pattern) if pattern is not None else build_layer_pattern(depth, self.n_attn)
            yield base.with_(pattern=pat, d_model=d, d_ffn=f, mamba_n_heads=h)

    @classmethod
    def from_ranges(cls, depth=(52, 56), d_model=(4480, 5120, 320), d_ffn=(13440, 20480, 320),
                    heads=(112, 128, 8), n_attn: int = 4) -> "SearchSpace":
        """Inclusive ranges ``(lo, hi[, step])``; ``hi`` is appended if the step skips it."""

        def axis(r, default_step=1):
            lo, hi = r[0], r[1]
            step = r[2] if len(r) > 2 else default_step
            vals = list(range(lo, hi + 1, step))
            if vals[-1] != hi:
                vals.append(hi)
            return vals

        return cls(axis(depth), axis(d_model), axis(d_ffn), axis(heads), n_attn)


@dataclass
class Candidate:
    config: ModelConfig
    memory: MemoryEstimate

    def key(self) -> dict:
        c = self.config
        return {"n_layers": c.n_layers, "d_model": c.d_model, "d_ffn": c.d_ffn,
                "mamba_heads": c.mamba_n_heads}


@dataclass
class CandidateSet:
    space: SearchSpace
    budget_bytes: float
    seq_len: int
    batch: int
    candidates: list[Candidate] = field(default_factory=list)

    def to_json(self, top: list[Candidate] | None = None) -> str:
        def row(c: Candidate):
            return {**c.key(), "params": count_params(c.config), "config": c.config.to_dict(),
                    "memory": c.memory.to_dict()}

        doc = {
            "budget_bytes": self.budget_bytes, "seq_len": self.seq_len, "batch": self.batch,
            "space": asdict(self.space), "grid_size": self.space.size,
            "n_feasible": len(self.candidates),
            "candidates": [row(c) for c in self.candidates],
        }
        if top is not None:
            doc["top"] = [row(c) for c in top]
        return json.dumps(doc, indent=1)


def enumerate_candidates(space: SearchSpace, budget_bytes: float, base: ModelConfig,
                         seq_len: int, batch: int = 1, bytes_per_elem: int = 2,
                         pattern=None) -> CandidateSet:
    """Every grid point whose estimated memory fits the budget, in grid order."""
    out = CandidateSet(space, budget_bytes, seq_len, batch)
    for cfg in space.configs(base, pattern):
        est = estimate_memory(cfg, seq_len, batch, bytes_per_elem)
        if est.total_bytes <= budget_bytes:
            out.candidates.append(Candidate(cfg, est))
    return out


def rank_candidates(cands, k: int) -> list[Candidate]:
    """Top-k by memory, largest first; ties prefer larger d_model, then larger d_ffn."""
    if k < 1:
        raise ValueError("k must be >= 1")
    items = cands.candidates if isinstance(cands, CandidateSet) else list(cands)
    ordered = sorted(items, key=lambda c: (-c.memory.total_bytes, -c.config.d_model,
                                           -c.config.d_ffn))
    return ordered[:k]
