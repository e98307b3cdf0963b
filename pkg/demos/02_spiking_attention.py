#!/usr/bin/env python3
"""Softmax-free spiking self-attention on binary token rasters.

Q, K and V are spike tensors, so every attention-map entry is a coincidence
count and is non-negative by construction: no softmax is needed to keep the
map valid.
"""

import numpy as np

from spiking_conformer import LifParams, ssa_forward
from spiking_conformer.model import attention_product

rng = np.random.default_rng(0)

print("=== attention map from binary Q/K/V ===")
q = (rng.random((4, 6)) < 0.4).astype(float)
k = (rng.random((4, 6)) < 0.4).astype(float)
v = (rng.random((4, 6)) < 0.4).astype(float)
current, attn = attention_product(q, k, v, scale=0.125)
print("attention map (Q K^T), integer coincidence counts:")
print(attn.astype(int))
print(f"all entries >= 0: {bool((attn >= 0).all())}")

print("\n=== full SSA block ===")
weights = {name: np.abs(rng.normal(scale=1.5, size=(6, 6))) for name in ("q", "k", "v", "proj")}
tokens = (rng.random((8, 4, 6)) < 0.35).astype(float)
out, attn = ssa_forward(tokens, weights, scale=0.125, lif=LifParams(v_th=0.5),
                        return_attention=True)
print(f"input raster density:  {tokens.mean():.3f}")
print(f"output raster density: {out.mean():.3f}")
print(f"output strictly binary: {bool(np.isin(out, (0.0, 1.0)).all())}")
print(f"attention map min: {attn.min():.0f} (never negative)")

zero = ssa_forward(np.zeros((8, 4, 6)), weights, scale=0.125)
print(f"all-zero input -> all-zero output: {not zero.any()}")
