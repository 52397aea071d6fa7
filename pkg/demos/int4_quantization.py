"""
INT4 group-wise weights
=======================

Quantize a weight matrix in groups of 32, look at the error bound and the
packed bytes, then store a whole toy model both ways and compare file sizes.
"""

import numpy as np

from edgemoe.arch import BaseArch, MoeSpec
from edgemoe.container import model_bytes, model_from_bytes
from edgemoe.model import init_model, transformer_forward
from edgemoe.quant import dequantize, quantize_weights

rng = np.random.default_rng(0)
w = rng.normal(size=(8, 96))
q = quantize_weights(w)
err = np.abs(dequantize(q) - w)
print("scales per row:", q.scales.shape[1], " codes range:", q.codes().min(), q.codes().max())
print("worst error / half scale:", (err / (q.scales.repeat(32, axis=1) / 2)).max())
print("bytes: float32", w.size * 4, " packed", q.nbytes)

# Requantizing the dequantized weights gives the same codes back
print("codes stable:", np.array_equal(quantize_weights(dequantize(q)).codes(), q.codes()))

base = BaseArch(d_model=64, d_ff=128, n_h=4, n_kv=2, d_h=16, n_l=2, vocab_size=64)
model = init_model(base, MoeSpec(E=4, g=2, k=1, shared=True, shared_units=1), seed=0, std=0.02)
full, _ = model_bytes(model)
small, entries = model_bytes(model, quantize=True)
print(f"container: {len(full)} bytes float, {len(small)} bytes int4")
print("router stays float:", {e.name: e.dtype for e in entries if "router" in e.name})

qm = model_from_bytes(small)
toks = np.arange(32)
a = transformer_forward(toks, model).logits
b = transformer_forward(toks, qm).logits
# About 10% error per matrix is normal for 16 levels on Gaussian weights
werr = np.mean([np.linalg.norm(qm.params[n] - model.params[n]) / np.linalg.norm(model.params[n])
                for n in qm.quantized])
print(f"mean relative weight error {werr:.3f}, logit correlation {np.corrcoef(a.ravel(), b.ravel())[0, 1]:.4f}")
