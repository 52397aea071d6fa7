"""Symmetric group-wise INT4 weights, dynamic per-row INT8 activations, fake-quant for QAT.

Weights are grouped along the last (input) axis in contiguous runs of
``group_size`` elements; a trailing partial group uses its actual extent.
Each group carries one scale ``s = 2 max|w| / (2**bits - 1)``, so the largest
magnitude lands on the half-step ``±(2**(bits-1) - 0.5)``.

Ties are rounded toward zero. Round-half-even would send a half-step like
``-7.5`` to ``-8`` on requantization and break the quantize/dequantize fixed
point; toward-zero keeps it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

GROUP_SIZE = 32
SCALE_DTYPE = np.float32


class QuantError(ValueError):
    pass


def round_half_toward_zero(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.ceil(np.abs(x) - 0.5)


def code_range(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def _as_rows(w: np.ndarray) -> np.ndarray:
    if w.ndim == 0:
        return w.reshape(1, 1)
    return w.reshape(-1, w.shape[-1])


def _group_absmax(rows: np.ndarray, group_size: int) -> np.ndarray:
    n_rows, n_cols = rows.shape
    n_groups = -(-n_cols // group_size)
    pad = n_groups * group_size - n_cols
    a = np.abs(rows)
    if pad:
        a = np.concatenate([a, np.zeros((n_rows, pad), a.dtype)], axis=1)
    return a.reshape(n_rows, n_groups, group_size).max(axis=2)


def _expand(per_group: np.ndarray, n_cols: int, group_size: int) -> np.ndarray:
    return np.repeat(per_group, group_size, axis=1)[:, :n_cols]


def compute_scales(w: np.ndarray, group_size: int = GROUP_SIZE, bits: int = 4) -> np.ndarray:
    """Per-group float32 scales, rounded up so ``half_step * scale >= max|w|`` exactly."""
    rows = _as_rows(np.asarray(w, dtype=np.float64))
    amax = _group_absmax(rows, group_size)
    half_step = (2**bits - 1) / 2.0
    s = (amax / half_step).astype(SCALE_DTYPE)
    short = s.astype(np.float64) * half_step < amax
    s[short] = np.nextafter(s[short], SCALE_DTYPE(np.inf))
    return s


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Two signed 4-bit codes per byte, stored as code+8; low nibble holds the even element."""
    flat = (codes.reshape(-1).astype(np.int16) + 8).astype(np.uint8)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, np.uint8)])
    return flat[0::2] | (flat[1::2] << 4)


def unpack_nibbles(packed: np.ndarray, n: int) -> np.ndarray:
    out = np.empty(packed.size * 2, dtype=np.int8)
    out[0::2] = (packed & 0x0F).astype(np.int8) - 8
    out[1::2] = (packed >> 4).astype(np.int8) - 8
    return out[:n]


@dataclass
class QuantizedTensor:
    packed: np.ndarray  # uint8, ceil(n / 2)
    scales: np.ndarray  # float32, (rows, n_groups)
    shape: tuple[int, ...]
    group_size: int = GROUP_SIZE
    bits: int = 4

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def n_cols(self) -> int:
        return self.shape[-1] if self.shape else 1

    def codes(self) -> np.ndarray:
        """Unpacked signed codes in the original shape."""
        return unpack_nibbles(self.packed, self.size).reshape(self.shape)

    def row_codes(self) -> np.ndarray:
        return unpack_nibbles(self.packed, self.size).reshape(-1, self.n_cols)

    @property
    def nbytes(self) -> int:
        return self.packed.nbytes + self.scales.nbytes

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            tuple(self.shape) == tuple(other.shape)
            and self.group_size == other.group_size
            and np.array_equal(self.packed, other.packed)
            and np.array_equal(self.scales, other.scales)
        )


def quantize_weights(w, group_size: int = GROUP_SIZE, bits: int = 4) -> QuantizedTensor:
    w = np.asarray(w)
    if not np.all(np.isfinite(w)):
        raise QuantError("cannot quantize non-finite weights")
    if bits != 4:
        raise QuantError("only 4-bit packing is supported")
    rows = _as_rows(w.astype(np.float64))
    scales = compute_scales(rows, group_size, bits)
    codes = _codes_for(rows, scales, group_size, bits)
    return QuantizedTensor(pack_nibbles(codes), scales, tuple(w.shape), group_size, bits)


def _codes_for(rows, scales, group_size, bits):
    lo, hi = code_range(bits)
    s = _expand(scales.astype(np.float64), rows.shape[1], group_size)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s > 0, rows / np.where(s > 0, s, 1.0), 0.0)
    return np.clip(round_half_toward_zero(ratio), lo, hi).astype(np.int8)


def dequantize(q: QuantizedTensor, dtype=np.float64) -> np.ndarray:
    rows = q.row_codes().astype(np.float64)
    s = _expand(q.scales.astype(np.float64), q.n_cols, q.group_size)
    return (rows * s).astype(dtype).reshape(q.shape)


class FakeQuant(NamedTuple):
    value: np.ndarray
    grad_mask: np.ndarray


def fake_quant_ste(w, scales: np.ndarray | None = None, group_size: int = GROUP_SIZE,
                   bits: int = 4) -> FakeQuant:
    """Quantize-dequantize in the forward pass; ``grad_mask`` is the straight-through
    backward: ones where the code was not clamped, zeros where it was.

    With fresh scales nothing clamps. Pass frozen ``scales`` to get saturation.
    """
    w = np.asarray(w, dtype=np.float64)
    rows = _as_rows(w)
    if scales is None:
        scales = compute_scales(rows, group_size, bits)
    lo, hi = code_range(bits)
    s = _expand(np.asarray(scales, np.float64), rows.shape[1], group_size)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s > 0, rows / np.where(s > 0, s, 1.0), 0.0)
    raw = round_half_toward_zero(ratio)
    codes = np.clip(raw, lo, hi)
    mask = (raw == codes).astype(np.float64)
    return FakeQuant((codes * s).reshape(w.shape), mask.reshape(w.shape))


def ste_backward(grad: np.ndarray, fq: FakeQuant) -> np.ndarray:
    return grad * fq.grad_mask


def quantize_activations_int8(x) -> tuple[np.ndarray, np.ndarray]:
    """Dynamic symmetric per-row INT8: ``scale = max|x| / 127``, codes in [-127, 127]."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise QuantError("cannot quantize non-finite activations")
    rows = x.reshape(-1, x.shape[-1]) if x.ndim else x.reshape(1, 1)
    scale = np.abs(rows).max(axis=1) / 127.0
    safe = np.where(scale > 0, scale, 1.0)
    codes = np.clip(np.rint(rows / safe[:, None]), -127, 127).astype(np.int8)
    codes[scale == 0] = 0
    return codes.reshape(x.shape), scale.reshape(x.shape[:-1])


def dequantize_activations(codes: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) * np.asarray(scale, np.float64)[..., None]


def fake_quant_activations(x) -> np.ndarray:
    return dequantize_activations(*quantize_activations_int8(x))


# -- model-level helpers ------------------------------------------------------

def is_quantizable(name: str, arr: np.ndarray) -> bool:
    """Linear weights and the embedding; never router matrices or norm gains."""
    return arr.ndim >= 2 and ".router" not in name


def quantize_params(params: dict[str, np.ndarray], group_size: int = GROUP_SIZE):
    out: dict[str, np.ndarray | QuantizedTensor] = {}
    for name, arr in params.items():
        out[name] = quantize_weights(arr, group_size) if is_quantizable(name, arr) else arr
    return out


def packed_nbytes(n: int, group_size: int = GROUP_SIZE, scale_bytes: int = 4) -> float:
    """Code bytes plus one scale per group for ``n`` weights."""
    return -(-n // 2) + (n / group_size) * scale_bytes


def footprint_report(n_total: int, group_size: int = GROUP_SIZE) -> dict[str, float]:
    return {
        "ideal_gb": n_total / 2 / 1e9,
        "packed_fp32_scales_gb": packed_nbytes(n_total, group_size, 4) / 1e9,
        "packed_fp16_scales_gb": packed_nbytes(n_total, group_size, 2) / 1e9,
    }

