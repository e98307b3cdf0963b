"""Leaky integrate-and-fire dynamics and approximate spike-triggered updates.

The membrane recursion per timestep is

    H[t] = V[t-1] + (1/tau) * (X[t] - (V[t-1] - v_reset))
    S[t] = 1  iff  H[t] >= v_th          (hard threshold)
    V[t] = H[t] * (1 - S[t]) + v_reset * S[t]

so a firing neuron is hard-reset to ``v_reset`` and a silent one keeps its
pre-activation.  Training replaces the threshold derivative with a sigmoid
surrogate; "soft mode" replaces the threshold itself with that sigmoid,
which makes the whole network differentiable end to end (used to validate
gradients against finite differences).

The approximate update layer tracks the neurons whose input current was
positive during the first ``T_th`` timesteps (``pos_idx``) and, afterwards,
computes input currents only for those neurons.  Skipped neurons receive
zero current but their membranes keep leaking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .tensor import DTYPE, ShapeError, NumericError, assert_finite


@dataclass
class LifParams:
    """Membrane constants; tau is in timestep units."""

    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0

    def __post_init__(self):
        if self.tau < 1.0:
            raise ValueError("tau must be >= 1")
        if self.v_th <= self.v_reset:
            raise ValueError("v_th must exceed v_reset")

    @property
    def inv_tau(self) -> float:
        return 1.0 / self.tau


@dataclass
class ApproxConfig:
    """Algorithm parameters for approximate spike-triggered updates."""

    T: int
    T_th: int
    enabled: bool = True

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 <= self.T_th <= self.T:
            raise ValueError("T_th must lie in [0, T]")


@dataclass
class LifState:
    """Mutable per-layer state: membrane potentials plus skip bookkeeping."""

    v: np.ndarray
    pos_idx: set = field(default_factory=set)
    t: int = 0


@dataclass
class SkipStats:
    """Counters of input-current computations performed vs skipped."""

    updates_performed: int = 0
    updates_skipped: int = 0

    def merge(self, other: "SkipStats") -> "SkipStats":
        return SkipStats(
            self.updates_performed + other.updates_performed,
            self.updates_skipped + other.updates_skipped,
        )

    def report_lines(self) -> list[str]:
        lines = [
            f"updates_performed={self.updates_performed}",
            f"updates_skipped={self.updates_skipped}",
        ]
        total = self.updates_performed + self.updates_skipped
        pct = 100.0 * self.updates_skipped / total if total else 0.0
        lines.append(f"reduction_percent={pct:.4f}")
        return lines


def heaviside(u: np.ndarray) -> np.ndarray:
    """Spike function: 1 where the argument is >= 0."""
    return (np.asarray(u) >= 0.0).astype(DTYPE)


def surrogate_grad(u, alpha: float = 4.0):
    """Sigmoid surrogate derivative alpha * s(u) * (1 - s(u)).

    Peaks at alpha/4 for u = 0 and decays symmetrically; used in place of
    the threshold derivative during backpropagation.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    s = 1.0 / (1.0 + np.exp(-alpha * np.asarray(u, dtype=DTYPE)))
    return alpha * s * (1.0 - s)


def lif_step(state: LifState, x_t: np.ndarray, params: LifParams):
    """One membrane update; returns (spikes, new state)."""
    x_t = np.asarray(x_t, dtype=DTYPE)
    if x_t.shape != state.v.shape:
        raise ShapeError(f"input shape {x_t.shape} != state shape {state.v.shape}")
    assert_finite(x_t, "lif_step input")
    v = state.v
    h = v + (x_t - (v - params.v_reset)) * params.inv_tau
    s = heaviside(h - params.v_th)
    v_new = h * (1.0 - s) + params.v_reset * s
    return s, LifState(v=v_new, pos_idx=state.pos_idx, t=state.t + 1)


def lif_multistep(x_seq: np.ndarray, params: LifParams, v0: np.ndarray | None = None):
    """Run the recursion over a (T, ...) current sequence; returns the raster."""
    x_seq = np.asarray(x_seq, dtype=DTYPE)
    if x_seq.ndim < 1 or x_seq.shape[0] < 1:
        raise ShapeError("x_seq must have a leading time dimension of length >= 1")
    assert_finite(x_seq, "lif_multistep input")
    T = x_seq.shape[0]
    inner = x_seq.shape[1:]
    flat = x_seq.reshape(T, -1)
    v0f = (
        np.zeros(flat.shape[1], dtype=DTYPE)
        if v0 is None
        else np.asarray(v0, dtype=DTYPE).reshape(-1)
    )
    S, _ = _kernels.lif_fwd(flat, v0f, params.inv_tau, params.v_th, params.v_reset)
    return S.reshape((T,) + inner)


def build_pos_idx(x_t: np.ndarray, pos_idx: set) -> set:
    """Union the indices of strictly positive currents into the skip set."""
    x_t = np.asarray(x_t).reshape(-1)
    return pos_idx | set(np.flatnonzero(x_t > 0.0).tolist())


def approx_linear_lif_forward(
    weights: np.ndarray,
    spikes_in: np.ndarray,
    params: LifParams,
    cfg: ApproxConfig,
    bias: np.ndarray | None = None,
):
    """Dense layer + LIF with approximate spike-triggered updates.

    ``spikes_in`` is a (T, N_in) binary raster; ``weights`` is (N_out, N_in).
    For t <= T_th the full input current W @ S[t] is computed and neurons
    with positive current join pos_idx; for t > T_th only pos_idx neurons
    receive their current, everyone else integrates zero input (leak only).
    Returns (spikes_out (T, N_out), SkipStats).
    """
    spikes_in = np.asarray(spikes_in, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    if spikes_in.ndim != 2:
        raise ShapeError(f"spikes_in must be (T, N_in), got {spikes_in.shape}")
    T, n_in = spikes_in.shape
    if cfg.T != T:
        raise ShapeError(f"cfg.T={cfg.T} does not match raster length {T}")
    if weights.shape[1] != n_in:
        raise ShapeError(f"weights expect {weights.shape[1]} inputs, raster has {n_in}")
    n_out = weights.shape[0]

    x = spikes_in @ weights.T
    if bias is not None:
        x = x + np.asarray(bias, dtype=DTYPE)

    t_th = cfg.T_th if cfg.enabled else T
    if t_th < T:
        pos = (x[:t_th] > 0.0).any(axis=0) if t_th > 0 else np.zeros(n_out, dtype=bool)
        x = x.copy()
        x[t_th:, ~pos] = 0.0
        n_pos = int(pos.sum())
        stats = SkipStats(
            updates_performed=n_out * t_th + n_pos * (T - t_th),
            updates_skipped=(n_out - n_pos) * (T - t_th),
        )
    else:
        stats = SkipStats(updates_performed=n_out * T, updates_skipped=0)

    spikes_out = lif_multistep(x, params)
    return spikes_out, stats


def skip_reduction(stats: SkipStats) -> float:
    """Percentage of eligible neuron updates that were skipped."""
    total = stats.updates_performed + stats.updates_skipped
    if total <= 0:
        raise ValueError("empty stats: no updates recorded")
    return 100.0 * stats.updates_skipped / total
