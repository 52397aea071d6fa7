"""MMOE weight container.

Layout::

    b"MMOE" | version u32 LE | manifest length u64 LE | UTF-8 JSON manifest | blobs

Every blob starts on a 64-byte boundary (offsets are absolute file positions).
``f32`` blobs are raw little-endian float32. ``q4g32`` blobs hold the packed
codes (row-major, two per byte, code+8, low nibble first) followed by the
float32 scales (one per row group); ``scales_offset`` in the manifest marks
where the scales begin.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import MoeSpec, arch_from_dict, arch_to_dict
from .model.transformer import ModelWeights
from .quant import GROUP_SIZE, QuantizedTensor, dequantize, is_quantizable, quantize_weights

MAGIC = b"MMOE"
VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<4sIQ")


class ContainerError(ValueError):
    pass


@dataclass
class TensorEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int
    nbytes: int
    scales_offset: int | None = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "dtype": self.dtype, "shape": list(self.shape),
             "offset": self.offset, "nbytes": self.nbytes}
        if self.scales_offset is not None:
            d["scales_offset"] = self.scales_offset
        return d


def _pad(n: int) -> int:
    return -n % ALIGN


def _blob(value) -> tuple[str, bytes, int | None]:
    if isinstance(value, QuantizedTensor):
        if value.group_size != GROUP_SIZE or value.bits != 4:
            raise ContainerError("only q4g32 tensors can be stored")
        codes = value.packed.astype(np.uint8).tobytes()
        scales = value.scales.astype("<f4").tobytes()
        return "q4g32", codes + scales, len(codes)
    arr = np.asarray(value)
    return "f32", arr.astype("<f4").tobytes(), None


def write_container(path, tensors: dict, config: dict | None = None) -> list[TensorEntry]:
    """Write ``tensors`` (ndarray or QuantizedTensor values) with a free-form ``config``."""
    data, entries = container_bytes(tensors, config)
    Path(path).write_bytes(data)
    return entries


def container_bytes(tensors: dict, config: dict | None = None) -> tuple[bytes, list[TensorEntry]]:
    items = [(name, value, *_blob(value)) for name, value in tensors.items()]
    shapes = {name: tuple(int(s) for s in (v.shape if isinstance(v, QuantizedTensor) else np.shape(v)))
              for name, v, *_ in items}

    def manifest_bytes(entries):
        return json.dumps({"config": config or {}, "tensors": [e.to_dict() for e in entries]},
                          separators=(",", ":")).encode("utf-8")

    # Offsets depend on the manifest length and vice versa; iterate to a fixed point.
    guess = 0
    for _ in range(10):
        pos = _HEADER.size + guess
        pos += _pad(pos)
        entries = []
        for name, _, dtype, data, split in items:
            entries.append(TensorEntry(name, dtype, shapes[name], pos, len(data),
                                       None if split is None else pos + split))
            pos += len(data)
            pos += _pad(pos)
        mb = manifest_bytes(entries)
        if len(mb) == guess:
            break
        guess = len(mb)
    else:
        raise ContainerError("manifest layout did not converge")
    out = bytearray(_HEADER.pack(MAGIC, VERSION, len(mb)))
    out += mb
    for entry, (_, _, _, data, _) in zip(entries, items):
        out += b"\0" * (entry.offset - len(out))
        out += data
    return bytes(out), entries


def read_container(path) -> tuple[dict, dict, list[TensorEntry]]:
    """Return ``(tensors, config, entries)``; q4g32 entries come back as QuantizedTensor."""
    return parse_container(Path(path).read_bytes())


def parse_container(raw: bytes) -> tuple[dict, dict, list[TensorEntry]]:
    if len(raw) < _HEADER.size:
        raise ContainerError("file too short for an MMOE header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        manifest = json.loads(raw[_HEADER.size:_HEADER.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable manifest: {exc}") from exc
    tensors, entries = {}, []
    for d in manifest["tensors"]:
        e = TensorEntry(d["name"], d["dtype"], tuple(d["shape"]), d["offset"], d["nbytes"],
                        d.get("scales_offset"))
        if e.offset % ALIGN or e.offset + e.nbytes > len(raw):
            raise ContainerError(f"tensor {e.name} has an invalid offset")
        n = int(np.prod(e.shape)) if e.shape else 1
        if e.dtype == "f32":
            if e.nbytes != 4 * n:
                raise ContainerError(f"tensor {e.name} size mismatch")
            tensors[e.name] = np.frombuffer(raw, "<f4", n, e.offset).reshape(e.shape).copy()
        elif e.dtype == "q4g32":
            n_cols = e.shape[-1] if e.shape else 1
            rows = n // n_cols
            groups = -(-n_cols // GROUP_SIZE)
            code_bytes = e.scales_offset - e.offset
            if code_bytes != -(-n // 2) or e.nbytes != code_bytes + 4 * rows * groups:
                raise ContainerError(f"tensor {e.name} size mismatch")
            packed = np.frombuffer(raw, np.uint8, code_bytes, e.offset).copy()
            scales = np.frombuffer(raw, "<f4", rows * groups, e.scales_offset)
            tensors[e.name] = QuantizedTensor(packed, scales.astype(np.float32).reshape(rows, groups),
                                              e.shape)
        else:
            raise ContainerError(f"unknown dtype {e.dtype!r} for {e.name}")
        entries.append(e)
    return tensors, manifest.get("config", {}), entries


# -- whole-model helpers --------------------------------------------------------

def save_model(path, model: ModelWeights, quantize: bool = False) -> list[TensorEntry]:
    """Store a model; with ``quantize`` every linear weight except routers becomes q4g32."""
    data, entries = model_bytes(model, quantize)
    Path(path).write_bytes(data)
    return entries


def model_bytes(model: ModelWeights, quantize: bool = False) -> tuple[bytes, list[TensorEntry]]:
    tensors = {}
    for name, arr in model.params.items():
        if name in model.quantized:
            tensors[name] = model.quantized[name]
        elif quantize and is_quantizable(name, arr):
            tensors[name] = quantize_weights(arr)
        else:
            tensors[name] = arr
    config = {
        "arch": arch_to_dict(model.base, model.moe),
        "balance_bias": [b.tolist() for b in model.balance_bias],
        "lambda_lb": model.lambda_lb,
        "lambda_z": model.lambda_z,
    }
    return container_bytes(tensors, config)


def load_model(path) -> ModelWeights:
    return model_from_bytes(Path(path).read_bytes())


def model_from_bytes(raw: bytes) -> ModelWeights:
    tensors, config, _ = parse_container(raw)
    try:
        base, moe = arch_from_dict(config["arch"])
    except KeyError as exc:
        raise ContainerError("container has no model config") from exc
    params, quantized = {}, {}
    for name, t in tensors.items():
        if isinstance(t, QuantizedTensor):
            quantized[name] = t
            params[name] = dequantize(t)
        else:
            params[name] = t.astype(np.float64)
    bias = [np.asarray(b, dtype=np.float64) for b in config["balance_bias"]]
    return ModelWeights(base, moe, params, bias, config["lambda_lb"], config["lambda_z"], quantized)


def quantize_model(model: ModelWeights) -> ModelWeights:
    """Copy of ``model`` whose quantizable weights are replaced by their INT4 round trip."""
    out = model.copy()
    for name, arr in model.params.items():
        if is_quantizable(name, arr):
            q = quantize_weights(arr)
            out.quantized[name] = q
            out.params[name] = dequantize(q)
    return out


def router_names(moe: MoeSpec, n_layers: int) -> list[str]:
    return [f"layers.{l}.router" for l in range(n_layers)] if moe.has_router else []
