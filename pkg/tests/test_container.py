import json
import struct

import numpy as np
import pytest

from edgemoe.container import (
    ALIGN,
    ContainerError,
    container_bytes,
    load_model,
    model_bytes,
    model_from_bytes,
    parse_container,
    quantize_model,
    read_container,
    save_model,
    write_container,
)
from edgemoe.model import transformer_forward
from edgemoe.quant import QuantizedTensor, dequantize, quantize_weights

from conftest import tiny_model


def test_raw_tensor_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 5)).astype(np.float32), "b": np.arange(7, dtype=np.float32),
               "q": quantize_weights(rng.normal(size=(4, 40)))}
    entries = write_container(tmp_path / "x.mmoe", tensors, {"note": "hi"})
    back, config, read_entries = read_container(tmp_path / "x.mmoe")
    assert config == {"note": "hi"}
    assert np.array_equal(back["a"], tensors["a"])
    assert np.array_equal(back["b"], tensors["b"])
    assert back["q"] == tensors["q"]
    assert [e.to_dict() for e in entries] == [e.to_dict() for e in read_entries]


def test_header_and_alignment():
    raw, entries = container_bytes({"w": np.ones((2, 3)), "v": np.zeros(1)}, {})
    magic, version, mlen = struct.unpack_from("<4sIQ", raw)
    assert magic == b"MMOE" and version == 1
    manifest = json.loads(raw[16:16 + mlen])
    assert [t["name"] for t in manifest["tensors"]] == ["w", "v"]
    assert {"name", "dtype", "shape", "offset", "nbytes"} <= set(manifest["tensors"][0])
    for e in entries:
        assert e.offset % ALIGN == 0
    assert entries[0].offset >= 16 + mlen
    w = entries[0]
    assert raw[w.offset:w.offset + w.nbytes] == np.ones(6, "<f4").tobytes()


def test_q4g32_blob_layout():
    w = np.array([[0.7, -0.7] + [0.0] * 30 + [1.4] + [0.0] * 31])
    q = quantize_weights(w)
    raw, (e,) = container_bytes({"w": q}, {})
    assert e.dtype == "q4g32"
    codes = raw[e.offset:e.scales_offset]
    assert len(codes) == 32
    # code+8 encoding, low nibble first: codes 7 and -7 -> 15 | 1 << 4
    assert codes[0] == 15 | (1 << 4)
    scales = np.frombuffer(raw[e.scales_offset:e.offset + e.nbytes], "<f4")
    assert np.array_equal(scales, q.scales.reshape(-1))
    assert e.nbytes == 32 + 2 * 4


def test_model_round_trip_float(tmp_path):
    m = tiny_model()
    m.balance_bias[0][:] = np.linspace(-0.03, 0.03, m.routed_count)
    save_model(tmp_path / "m.mmoe", m)
    back = load_model(tmp_path / "m.mmoe")
    assert back.base == m.base and back.moe == m.moe
    for n, p in m.params.items():
        assert np.array_equal(back.params[n], p.astype(np.float32))
    assert np.allclose(back.balance_bias[0], m.balance_bias[0])
    toks = np.arange(10)
    assert np.allclose(transformer_forward(toks, back).logits, transformer_forward(toks, m).logits,
                       atol=1e-4)


def test_quantized_model_keeps_router_full_precision():
    m = tiny_model()
    raw, entries = model_bytes(m, quantize=True)
    dtypes = {e.name: e.dtype for e in entries}
    assert dtypes["layers.0.router"] == "f32"
    assert dtypes["layers.1.router"] == "f32"
    assert dtypes["layers.0.attn_norm"] == "f32"
    assert dtypes["layers.0.experts.w_gate"] == "q4g32"
    assert dtypes["embed"] == "q4g32"
    back = model_from_bytes(raw)
    assert np.array_equal(back.params["layers.0.router"], m.params["layers.0.router"].astype(np.float32))
    assert isinstance(back.quantized["layers.0.attn.wq"], QuantizedTensor)


def test_quantize_model_then_save_is_stable():
    qm = quantize_model(tiny_model())
    back = model_from_bytes(model_bytes(qm)[0])
    for n, q in qm.quantized.items():
        assert back.quantized[n] == q
        assert np.array_equal(back.params[n], dequantize(q))
    assert model_bytes(back)[0] == model_bytes(qm)[0]


def test_quantized_file_is_smaller():
    m = tiny_model()
    assert len(model_bytes(m, True)[0]) < 0.35 * len(model_bytes(m)[0])


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:10], "short"),
    (lambda b: b[:-8], "offset"),
])
def test_corrupt_containers_rejected(mutate, match):
    raw, _ = container_bytes({"w": np.ones((4, 4))}, {})
    with pytest.raises(ContainerError, match=match):
        parse_container(mutate(raw))


def test_model_without_config_rejected():
    raw, _ = container_bytes({"w": np.ones(3)}, {})
    with pytest.raises(ContainerError):
        model_from_bytes(raw)
