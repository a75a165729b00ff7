"""E4M3 (no-infinity, max 448) encode/decode and blockwise quantization.

Codes are ``uint8``: sign bit, 4 exponent bits (bias 7), 3 mantissa bits.
``0x7F``/``0xFF`` are NaN and never produced by the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

E4M3_MAX = 448.0
EXP_BIAS = 7
MANT_BITS = 3
NAN_CODES = (0x7F, 0xFF)


def decode_code(code: int) -> float:
    """Value of a single code straight from the bit layout."""
    sign = -1.0 if code & 0x80 else 1.0
    exp = (code >> MANT_BITS) & 0xF
    mant = code & 0x7
    if exp == 0xF and mant == 0x7:
        return float("nan")
    if exp == 0:
        return sign * (mant / 8) * 2.0 ** (1 - EXP_BIAS)
    return sign * (1 + mant / 8) * 2.0 ** (exp - EXP_BIAS)


DECODE_TABLE = np.array([decode_code(c) for c in range(256)])
# non-negative finite codes in increasing value order: 0x00..0x7E
_POS_CODES = np.arange(0x7F, dtype=np.uint8)
_POS_VALUES = DECODE_TABLE[:0x7F]


def decode(codes) -> np.ndarray:
    return DECODE_TABLE[np.asarray(codes, dtype=np.uint8)]


def e4m3_round(x) -> np.ndarray:
    """Round to the nearest E4M3 code, ties to even mantissa; saturate at +-448."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise ValueError("cannot encode NaN")
    mag = np.minimum(np.abs(x), E4M3_MAX)
    hi = np.searchsorted(_POS_VALUES, mag, side="left")  # first value >= mag
    hi = np.minimum(hi, _POS_VALUES.size - 1)
    lo = np.maximum(hi - 1, 0)
    d_lo = mag - _POS_VALUES[lo]
    d_hi = _POS_VALUES[hi] - mag
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    idx = np.where(pick_hi, hi, lo)
    codes = _POS_CODES[idx]
    neg = np.signbit(x) & (idx > 0)
    return np.where(neg, codes | 0x80, codes).astype(np.uint8)


def roundtrip(x) -> np.ndarray:
    return decode(e4m3_round(x))


@dataclass
class QuantizedBlockTensor:
    codes: np.ndarray  # uint8, original shape
    scales: np.ndarray  # one per block / tile
    shape: tuple[int, ...]
    mode: str  # "weight-block" or "activation-tile"
    block: tuple[int, int]

    def dequantize(self) -> np.ndarray:
        vals = decode(self.codes)
        return vals * _expand_scales(self.scales, self.shape, self.block)


def _block_geometry(shape, mode: str) -> tuple[int, int]:
    if mode == "weight-block":
        if len(shape) != 2:
            raise ValueError("weight-block mode needs a 2-D tensor")
        return (128, 128)
    if mode == "activation-tile":
        return (1, 128)
    raise ValueError(f"unknown quantization mode {mode!r}")


def _as_2d(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x


def _expand_scales(scales: np.ndarray, shape, block) -> np.ndarray:
    rows, cols = _as_2d(np.empty(shape, dtype=np.bool_)).shape
    full = np.repeat(np.repeat(scales, block[0], axis=0), block[1], axis=1)[:rows, :cols]
    return full.reshape(shape)


def quantize(x, mode: str = "weight-block") -> QuantizedBlockTensor:
    """Per-block scale ``max|x| / 448`` (1 for all-zero blocks), then E4M3 codes."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize expects a finite tensor")
    block = _block_geometry(x.shape, mode)
    x2 = _as_2d(x)
    rows, cols = x2.shape
    nbr, nbc = -(-rows // block[0]), -(-cols // block[1])
    pad = np.zeros((nbr * block[0], nbc * block[1]))
    pad[:rows, :cols] = np.abs(x2)
    amax = pad.reshape(nbr, block[0], nbc, block[1]).max(axis=(1, 3))
    scales = np.where(amax > 0, amax / E4M3_MAX, 1.0)
    codes = e4m3_round(x / _expand_scales(scales, x.shape, block))
    return QuantizedBlockTensor(codes, scales, tuple(x.shape), mode, block)


@dataclass
class MatmulReport:
    result: np.ndarray
    max_abs_error: float
    rel_frobenius_error: float


def fp8_matmul_sim(a, b, *, a_mode: str = "activation-tile", b_mode: str = "weight-block",
                   skip: bool = False) -> MatmulReport:
    """Dequantize-then-multiply emulation of an FP8 GEMM, with error vs exact.

    Inputs may be raw arrays (quantized here) or ``QuantizedBlockTensor``.
    ``skip=True`` models a layer left in high precision: no quantization.
    """
    exact_a = a.dequantize() if isinstance(a, QuantizedBlockTensor) else np.asarray(a, dtype=np.float64)
    exact_b = b.dequantize() if isinstance(b, QuantizedBlockTensor) else np.asarray(b, dtype=np.float64)
    if exact_a.shape[-1] != exact_b.shape[0]:
        raise ValueError(f"shape mismatch {exact_a.shape} @ {exact_b.shape}")
    exact = exact_a @ exact_b
    if skip:
        return MatmulReport(exact, 0.0, 0.0)
    qa = a if isinstance(a, QuantizedBlockTensor) else quantize(exact_a, a_mode)
    qb = b if isinstance(b, QuantizedBlockTensor) else quantize(exact_b, b_mode)
    out = qa.dequantize() @ qb.dequantize()
    err = out - exact
    denom = np.linalg.norm(exact)
    return MatmulReport(out, float(np.max(np.abs(err), initial=0.0)),
                        float(np.linalg.norm(err) / denom) if denom else 0.0)


def linear_layer_names(ckpt) -> list[str]:
    """2-D projection weights in forward order (embedding and head included)."""
    names = [n for n, a in ckpt.tensors.items() if a.ndim == 2 and not n.endswith(".conv")]
    return names


def quantize_checkpoint(ckpt, skip_first: int = 4, skip_last: int = 4):
    """Quantize every linear weight except the first/last ``skip`` ones.

    Returns ``(quantized, passthrough)``: name -> QuantizedBlockTensor, and
    name -> untouched array for skipped and non-matrix tensors.
    """
    names = linear_layer_names(ckpt)
    skipped = set(names[:skip_first]) | set(names[len(names) - skip_last:] if skip_last else [])
    quantized, passthrough = {}, {}
    for name, arr in ckpt.tensors.items():
        if name in names and name not in skipped:
            quantized[name] = quantize(arr, "weight-block")
        else:
            passthrough[name] = arr
    return quantized, passthrough
