"""Fused inner loops for multistep LIF dynamics.

The recursions here are the time-critical part of training: every spiking
layer walks T timesteps over millions of neurons, and the backward pass
re-walks them in reverse.  When numba is importable the loops are JIT
compiled (IEEE-strict, no fastmath) and parallelized over contiguous neuron
chunks so the (T, M) arrays are written in cache-friendly row spans;
otherwise a vectorized numpy fallback with the identical operation order is
used, so both backends produce the same trajectories.

Shapes: currents and rasters are (T, M) with M = flattened neuron count.
"""

from __future__ import annotations

import math
import os

import numpy as np

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _tune_allocator() -> bool:
    """Keep large freed buffers in the heap instead of unmapping them.

    Training allocates and frees hundreds of MB of activations per batch;
    with glibc's default mmap threshold every batch pays page-fault costs
    for the same buffers again.  Disabling mmap-backed allocations roughly
    halves the step time.  Set SPKF_NO_MALLOC_TUNE=1 to opt out.
    """
    if os.environ.get("SPKF_NO_MALLOC_TUNE"):
        return False
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        m_mmap_max, m_trim_threshold = -4, -1
        libc.mallopt(m_mmap_max, 0)
        libc.mallopt(m_trim_threshold, ctypes.c_int(-1))
        return True
    except Exception:  # pragma: no cover - non-glibc platforms
        return False


ALLOCATOR_TUNED = _tune_allocator()

_CHUNK = 8192


def _lif_fwd_py(x, v0, inv_tau, v_th, v_reset, soft, alpha):
    T, M = x.shape
    S = np.empty((T, M), dtype=np.float64)
    H = np.empty((T, M), dtype=np.float64)
    v = v0.copy()
    for t in range(T):
        h = v + (x[t] - (v - v_reset)) * inv_tau
        if soft:
            s = 1.0 / (1.0 + np.exp(-alpha * (h - v_th)))
        else:
            s = (h >= v_th).astype(np.float64)
        H[t] = h
        S[t] = s
        v = h * (1.0 - s) + v_reset * s
    return S, H


def _lif_fwd_const_py(c, T, v0, inv_tau, v_th, v_reset, soft, alpha):
    x = np.broadcast_to(c, (T, c.shape[0]))
    return _lif_fwd_py(x, v0, inv_tau, v_th, v_reset, soft, alpha)


def _lif_bwd_py(dS, H, S, inv_tau, v_th, v_reset, alpha, detach_reset):
    T, M = dS.shape
    dX = np.empty((T, M), dtype=np.float64)
    dv = np.zeros(M, dtype=np.float64)
    one_minus_inv = 1.0 - inv_tau
    for t in range(T - 1, -1, -1):
        u = H[t] - v_th
        sig = 1.0 / (1.0 + np.exp(-alpha * u))
        g = alpha * sig * (1.0 - sig)
        if detach_reset:
            dh = dS[t] * g + dv * (1.0 - S[t])
        else:
            dh = dS[t] * g + dv * ((1.0 - S[t]) + (v_reset - H[t]) * g)
        dX[t] = dh * inv_tau
        dv = dh * one_minus_inv
    return dX


if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _lif_fwd_nb(x, v0, inv_tau, v_th, v_reset, soft, alpha):  # pragma: no cover
        T, M = x.shape
        S = np.empty((T, M), dtype=np.float64)
        H = np.empty((T, M), dtype=np.float64)
        n_chunks = (M + _CHUNK - 1) // _CHUNK
        for c in prange(n_chunks):
            lo = c * _CHUNK
            hi = min(M, lo + _CHUNK)
            v = v0[lo:hi].copy()
            for t in range(T):
                for m in range(lo, hi):
                    h = v[m - lo] + (x[t, m] - (v[m - lo] - v_reset)) * inv_tau
                    if soft:
                        s = 1.0 / (1.0 + math.exp(-alpha * (h - v_th)))
                    else:
                        s = 1.0 if h >= v_th else 0.0
                    H[t, m] = h
                    S[t, m] = s
                    v[m - lo] = h * (1.0 - s) + v_reset * s
        return S, H

    @njit(cache=True, parallel=True)
    def _lif_fwd_const_nb(c, T, v0, inv_tau, v_th, v_reset, soft, alpha):  # pragma: no cover
        M = c.shape[0]
        S = np.empty((T, M), dtype=np.float64)
        H = np.empty((T, M), dtype=np.float64)
        n_chunks = (M + _CHUNK - 1) // _CHUNK
        for ci in prange(n_chunks):
            lo = ci * _CHUNK
            hi = min(M, lo + _CHUNK)
            v = v0[lo:hi].copy()
            for t in range(T):
                for m in range(lo, hi):
                    h = v[m - lo] + (c[m] - (v[m - lo] - v_reset)) * inv_tau
                    if soft:
                        s = 1.0 / (1.0 + math.exp(-alpha * (h - v_th)))
                    else:
                        s = 1.0 if h >= v_th else 0.0
                    H[t, m] = h
                    S[t, m] = s
                    v[m - lo] = h * (1.0 - s) + v_reset * s
        return S, H

    @njit(cache=True, parallel=True)
    def _lif_bwd_nb(dS, H, S, inv_tau, v_th, v_reset, alpha, detach_reset):  # pragma: no cover
        T, M = dS.shape
        dX = np.empty((T, M), dtype=np.float64)
        one_minus_inv = 1.0 - inv_tau
        n_chunks = (M + _CHUNK - 1) // _CHUNK
        for c in prange(n_chunks):
            lo = c * _CHUNK
            hi = min(M, lo + _CHUNK)
            dv = np.zeros(hi - lo, dtype=np.float64)
            for t in range(T - 1, -1, -1):
                for m in range(lo, hi):
                    u = H[t, m] - v_th
                    sig = 1.0 / (1.0 + math.exp(-alpha * u))
                    g = alpha * sig * (1.0 - sig)
                    if detach_reset:
                        dh = dS[t, m] * g + dv[m - lo] * (1.0 - S[t, m])
                    else:
                        dh = dS[t, m] * g + dv[m - lo] * (
                            (1.0 - S[t, m]) + (v_reset - H[t, m]) * g
                        )
                    dX[t, m] = dh * inv_tau
                    dv[m - lo] = dh * one_minus_inv
        return dX


def lif_fwd(x, v0, inv_tau, v_th, v_reset, soft=False, alpha=4.0):
    """(T, M) currents -> ((T, M) spikes, (T, M) pre-activations)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    v0 = np.ascontiguousarray(v0, dtype=np.float64)
    if HAVE_NUMBA:
        return _lif_fwd_nb(x, v0, inv_tau, v_th, v_reset, soft, alpha)
    return _lif_fwd_py(x, v0, inv_tau, v_th, v_reset, soft, alpha)


def lif_fwd_const(c, T, v0, inv_tau, v_th, v_reset, soft=False, alpha=4.0):
    """Constant-current variant: the drive (M,) is identical at every step."""
    c = np.ascontiguousarray(c, dtype=np.float64)
    v0 = np.ascontiguousarray(v0, dtype=np.float64)
    if HAVE_NUMBA:
        return _lif_fwd_const_nb(c, T, v0, inv_tau, v_th, v_reset, soft, alpha)
    return _lif_fwd_const_py(c, T, v0, inv_tau, v_th, v_reset, soft, alpha)


def lif_bwd(dS, H, S, inv_tau, v_th, v_reset, alpha=4.0, detach_reset=True):
    """Backward through the T-step recursion; returns grads wrt currents.

    ``detach_reset=True`` treats the spike inside the reset equation as a
    constant (the training convention); ``False`` differentiates the reset
    path too, which is the exact gradient of the soft forward.
    """
    dS = np.ascontiguousarray(dS, dtype=np.float64)
    if HAVE_NUMBA:
        return _lif_bwd_nb(dS, H, S, inv_tau, v_th, v_reset, alpha, detach_reset)
    return _lif_bwd_py(dS, H, S, inv_tau, v_th, v_reset, alpha, detach_reset)
