"""Binary checkpoint container.

Layout::

    b"NNC1" | u32 version | u64 header_len | header (UTF-8 JSON) | payload

The header holds the model config and a directory of tensors (name, dtype,
shape, offset, nbytes) in payload order. Payload data is little-endian.
Quantized tensors store their uint8 codes plus a float scale tensor; their
directory entry carries the quantization mode and the scale tensor's name.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .fp8 import QuantizedBlockTensor
from .model import Checkpoint

MAGIC = b"NNC1"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1"),
           "i64": np.dtype("<i8")}
_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointFormatError(ValueError):
    pass


def _dtype_name(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    try:
        return _NAMES[np.dtype(dt.str.replace("=", "<"))]
    except KeyError:
        raise CheckpointFormatError(f"unsupported dtype {arr.dtype}") from None


def write_container(path, header_extra: dict, arrays: dict[str, np.ndarray],
                    entry_extra: dict[str, dict] | None = None) -> None:
    entries, offset = [], 0
    blobs = []
    for name, arr in arrays.items():
        dname = _dtype_name(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dname]).tobytes()
        entry = {"name": name, "dtype": dname, "shape": list(arr.shape), "offset": offset,
                 "nbytes": len(blob)}
        entry.update((entry_extra or {}).get(name, {}))
        entries.append(entry)
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({**header_extra, "tensors": entries}, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError("bad magic")
    if len(raw) < 16:
        raise CheckpointFormatError("truncated header")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    if 16 + hlen > len(raw):
        raise CheckpointFormatError("truncated header")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    payload = memoryview(raw)[16 + hlen:]
    arrays, expect = {}, 0
    for e in header["tensors"]:
        if e["dtype"] not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype {e['dtype']!r}")
        dt = _DTYPES[e["dtype"]]
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if e["nbytes"] != n:
            raise CheckpointFormatError(f"{e['name']}: shape {e['shape']} needs {n} bytes, header says {e['nbytes']}")
        if e["offset"] != expect:
            raise CheckpointFormatError(f"{e['name']}: offset {e['offset']} out of directory order")
        if e["offset"] + n > len(payload):
            raise CheckpointFormatError(f"truncated payload at {e['name']}")
        arrays[e["name"]] = np.frombuffer(payload[e["offset"]:e["offset"] + n], dtype=dt).reshape(e["shape"]).copy()
        expect += n
    if expect != len(payload):
        raise CheckpointFormatError(f"payload has {len(payload) - expect} trailing bytes")
    return header, arrays


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    write_container(path, {"kind": "model", "config": ckpt.config.to_dict()}, ckpt.tensors)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointFormatError(f"not a model checkpoint (kind={header.get('kind')!r})")
    return Checkpoint(ModelConfig.from_dict(header["config"]), arrays)


def save_quantized(path, config: ModelConfig, quantized: dict[str, QuantizedBlockTensor],
                   passthrough: dict[str, np.ndarray]) -> None:
    arrays, extra = {}, {}
    for name, q in quantized.items():
        arrays[name] = q.codes
        arrays[name + ".scales"] = q.scales
        extra[name] = {"quant": {"mode": q.mode, "scales": name + ".scales",
                                 "block": list(q.block)}}
    arrays.update(passthrough)
    write_container(path, {"kind": "quantized", "config": config.to_dict()}, arrays, extra)


def load_quantized(path):
    header, arrays = read_container(path)
    if header.get("kind") != "quantized":
        raise CheckpointFormatError("not a quantized checkpoint")
    quantized, passthrough = {}, {}
    scale_names = {e["quant"]["scales"] for e in header["tensors"] if "quant" in e}
    for e in header["tensors"]:
        name = e["name"]
        if "quant" in e:
            q = e["quant"]
            codes = arrays[name]
            quantized[name] = QuantizedBlockTensor(codes, arrays[q["scales"]], tuple(codes.shape),
                                                   q["mode"], tuple(q["block"]))
        elif name not in scale_names:
            passthrough[name] = arrays[name]
    return ModelConfig.from_dict(header["config"]), quantized, passthrough


def dequantized_checkpoint(path) -> Checkpoint:
    config, quantized, passthrough = load_quantized(path)
    tensors = dict(passthrough)
    dtype = next(iter(passthrough.values())).dtype if passthrough else np.float64
    for name, q in quantized.items():
        tensors[name] = q.dequantize().astype(dtype)
    return Checkpoint(config, tensors)
