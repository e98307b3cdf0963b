#!/usr/bin/env python3
"""Walk through the LIF neuron model: charge, fire, reset.

Reproduces the two canonical traces by hand: a constant unit drive with
threshold 1.0 never fires (the membrane approaches the drive from below),
while threshold 0.9 fires periodically every 4 steps.
"""

import numpy as np

from spiking_conformer import LifParams, LifState, lif_multistep, lif_step, surrogate_grad

print("=== single update ===")
params = LifParams(tau=2.0, v_th=1.0, v_reset=0.0)
state = LifState(v=np.array([0.5]))
spikes, state = lif_step(state, np.array([2.0]), params)
print(f"V=0.5, X=2.0  ->  H=1.25 >= 1.0: spike={spikes[0]:.0f}, reset V={state.v[0]}")

state = LifState(v=np.array([0.2]))
spikes, state = lif_step(state, np.array([0.4]), params)
print(f"V=0.2, X=0.4  ->  H=0.30 <  1.0: spike={spikes[0]:.0f}, V={state.v[0]}")

print("\n=== constant drive, 8 timesteps ===")
drive = np.ones((8, 1))
for v_th in (1.0, 0.9):
    raster = lif_multistep(drive, LifParams(tau=2.0, v_th=v_th)).reshape(-1)
    print(f"v_th={v_th}: raster {raster.astype(int)}")
print("The membrane follows H(t) = 1 - 2^-t, so v_th=1.0 is never reached")
print("while v_th=0.9 is crossed at t=4, reset, and crossed again at t=8.")

print("\n=== surrogate gradient ===")
for u in (-2.0, -0.5, 0.0, 0.5, 2.0):
    print(f"u={u:+.1f}: surrogate_grad={surrogate_grad(u, alpha=4.0):.4f}")
print("A sigmoid bump peaking at alpha/4 = 1.0 stands in for the threshold")
print("derivative during backpropagation.")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    T = 24
    params = LifParams(tau=2.0, v_th=0.9)
    state = LifState(v=np.zeros(1))
    vs, ss = [], []
    for _ in range(T):
        s, state = lif_step(state, np.array([1.0]), params)
        vs.append(state.v[0])
        ss.append(s[0])
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.step(range(T), vs, where="post", label="membrane V[t]")
    ax.axhline(0.9, color="r", ls="--", label="threshold")
    for t, s in enumerate(ss):
        if s:
            ax.axvline(t, color="k", alpha=0.2)
    ax.set_xlabel("timestep")
    ax.legend()
    fig.tight_layout()
    fig.savefig("lif_trace.png", dpi=120)
    print("\nwrote lif_trace.png")
except ImportError:
    print("\n(matplotlib not installed; skipping the trace plot)")
