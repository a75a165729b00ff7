"""Architecture description for hybrid Mamba/attention/FFN decoders."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace


class LayerKind(str, enum.Enum):
    """Layer kinds, written with the usual hybrid-pattern glyphs."""

    MAMBA = "M"
    ATTENTION = "*"
    FFN = "-"


class ConfigError(ValueError):
    pass


def build_layer_pattern(n_layers: int, n_attn: int) -> tuple[LayerKind, ...]:
    """Spread ``n_attn`` attention layers evenly, alternate Mamba/FFN elsewhere.

    Attention slot i sits at ``round((i + 0.5) * n_layers / n_attn)``; the
    remaining slots alternate starting with Mamba.
    """
    if n_layers < 0 or n_attn < 0:
        raise ConfigError("layer counts must be non-negative")
    if n_attn > n_layers:
        raise ConfigError(f"n_attn={n_attn} exceeds n_layers={n_layers}")
    # exact halves round down, so (10, 2) lands on slots 2 and 7
    attn = {
        min(n_layers - 1, math.ceil((i + 0.5) * n_layers / n_attn - 0.5)) for i in range(n_attn)
    }
    if len(attn) != n_attn:
        raise ConfigError(f"cannot place {n_attn} attention layers in {n_layers} slots")
    kinds, toggle = [], 0
    for pos in range(n_layers):
        if pos in attn:
            kinds.append(LayerKind.ATTENTION)
        else:
            kinds.append(LayerKind.MAMBA if toggle % 2 == 0 else LayerKind.FFN)
            toggle += 1
    return tuple(kinds)


def pattern_string(pattern) -> str:
    return "".join(k.value for k in pattern)


def parse_pattern(text: str) -> tuple[LayerKind, ...]:
    try:
        return tuple(LayerKind(ch) for ch in text)
    except ValueError:
        raise ConfigError(f"bad layer pattern {text!r}; use M, * and -") from None


@dataclass(frozen=True)
class ModelConfig:
    pattern: tuple[LayerKind, ...]
    d_model: int
    d_ffn: int
    vocab_size: int
    n_q_heads: int = 4
    n_kv_heads: int = 2
    attn_head_dim: int = 0  # 0 -> d_model // n_q_heads
    mamba_n_heads: int = 0  # 0 -> 2 * d_model // mamba_head_dim
    mamba_head_dim: int = 16
    mamba_state_dim: int = 16
    mamba_groups: int = 2
    conv_window: int = 4
    tied_embeddings: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "pattern", tuple(LayerKind(k) for k in self.pattern))
        if self.attn_head_dim == 0 and self.n_q_heads:
            object.__setattr__(self, "attn_head_dim", self.d_model // self.n_q_heads)
        if self.mamba_n_heads == 0 and self.mamba_head_dim:
            object.__setattr__(self, "mamba_n_heads", 2 * self.d_model // self.mamba_head_dim)
        self.validate()

    @classmethod
    def create(cls, n_layers: int, n_attn: int, *, mamba_expand: int = 2, **kw) -> "ModelConfig":
        """Build from layer counts; Mamba heads derive from ``mamba_expand * d_model``."""
        d_model, head_dim = kw["d_model"], kw.get("mamba_head_dim", 16)
        if (mamba_expand * d_model) % head_dim:
            raise ConfigError("mamba_expand * d_model must be divisible by mamba_head_dim")
        kw.setdefault("mamba_n_heads", mamba_expand * d_model // head_dim)
        return cls(pattern=build_layer_pattern(n_layers, n_attn), **kw)

    def validate(self) -> None:
        if min(self.d_model, self.vocab_size) < 0 or self.d_ffn < 1:
            raise ConfigError("d_model/vocab must be >= 0 and d_ffn >= 1")
        if self.n_attn:
            if self.n_kv_heads < 1 or self.n_q_heads % self.n_kv_heads:
                raise ConfigError("n_q_heads must be divisible by n_kv_heads")
            if self.attn_head_dim < 1:
                raise ConfigError("attn_head_dim must be positive")
        if self.n_mamba:
            if self.mamba_groups < 1 or self.mamba_n_heads % self.mamba_groups:
                raise ConfigError("Mamba heads must split evenly across groups")
            if self.mamba_n_heads < 1 or self.mamba_head_dim < 1 or self.conv_window < 1:
                raise ConfigError("Mamba dims must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.pattern)

    @property
    def n_attn(self) -> int:
        return self.pattern.count(LayerKind.ATTENTION)

    @property
    def n_mamba(self) -> int:
        return self.pattern.count(LayerKind.MAMBA)

    @property
    def n_ffn(self) -> int:
        return self.pattern.count(LayerKind.FFN)

    @property
    def d_inner(self) -> int:
        return self.mamba_n_heads * self.mamba_head_dim

    @property
    def heads_per_group(self) -> int:
        return self.mamba_n_heads // self.mamba_groups

    @property
    def conv_channels(self) -> int:
        return self.d_inner + 2 * self.mamba_groups * self.mamba_state_dim

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pattern"] = pattern_string(self.pattern)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        """Inverse of ``to_dict``; also accepts ``n_layers``/``n_attn``/``mamba_expand``."""
        d = dict(d)
        pat = d.pop("pattern", None)
        n_layers, n_attn = d.pop("n_layers", None), d.pop("n_attn", 0)
        expand = d.pop("mamba_expand", None)
        if pat is None:
            if n_layers is None:
                raise ConfigError("model config needs a pattern or n_layers")
            pat = build_layer_pattern(n_layers, n_attn)
        if expand and not d.get("mamba_n_heads"):
            d["mamba_n_heads"] = expand * d["d_model"] // d.get("mamba_head_dim", 16)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        pat = parse_pattern(pat) if isinstance(pat, str) else pat
        return cls(pattern=pat, **d)


def nano12b_config(vocab_size: int = 131072) -> ModelConfig:
    """The 62-layer, 12B-parameter base architecture."""
    return ModelConfig(
        pattern=build_layer_pattern(62, 6),
        d_model=5120,
        d_ffn=20480,
        vocab_size=vocab_size,
        n_q_heads=40,
        n_kv_heads=8,
        attn_head_dim=128,
        mamba_n_heads=128,
        mamba_head_dim=80,
        mamba_state_dim=128,
        mamba_groups=8,
        conv_window=4,
    )


def compressed_config(n_layers: int, d_model: int, d_ffn: int, mamba_heads: int,
                      n_attn: int = 4, base: ModelConfig | None = None) -> ModelConfig:
    """A depth/width-reduced sibling of ``base`` (default: the 12B architecture)."""
    base = base or nano12b_config()
    return base.with_(
        pattern=build_layer_pattern(n_layers, n_attn),
        d_model=d_model, d_ffn=d_ffn, mamba_n_heads=mamba_heads,
    )


@dataclass
class TinyDefaults:
    """Desk-scale model used by the pipeline when no model section is given."""

    n_layers: int = 8
    n_attn: int = 2
    d_model: int = 64
    d_ffn: int = 256
    vocab_size: int = 256
    extra: dict = field(default_factory=dict)

    def build(self) -> ModelConfig:
        kw = dict(n_q_heads=4, n_kv_heads=2, mamba_head_dim=16, mamba_state_dim=16,
                  mamba_groups=2, conv_window=4)
        kw.update(self.extra)
        return ModelConfig.create(self.n_layers, self.n_attn, d_model=self.d_model,
                                  d_ffn=self.d_ffn, vocab_size=self.vocab_size, **kw)
