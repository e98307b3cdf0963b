"""Deterministic ADD/MUL accounting for spiking and non-spiking inference.

Counting conventions (one inference of one segment, evaluation mode, batch
norm folded into the preceding layer):

* synaptic ADD: one per (incoming spike, reached output neuron) in every
  layer whose input is a binary raster (spatial conv, Q/K/V maps, attention
  projection, both MLP linears).  The attention product contributes one ADD
  per Q/K spike coincidence and one ADD per value spike per token row;
  residual injections contribute one ADD per residual spike.  Pooling sums
  spikes, one ADD each.
* offset ADD: layers with a bias/BN offset add one constant per computed
  output neuron per timestep (spatial conv, Q/K/V maps, attention
  projection, MLP linears).
* state ADD/MUL: every LIF neuron performs 2 ADDs and 1 MUL per timestep
  for the membrane update; the leak MUL counts toward ``full_muls`` only.
* core MUL: real-valued multiplies in the classifier (including the rate
  divide) and the attention scaling.  ``full_muls`` additionally includes
  the leak MULs, the real-input temporal conv (computed once per sample
  under direct coding), the projection conv on pooled values, and the pool
  divides.  Paper-style comparisons use core MULs.

With approximate updates enabled, skipped neurons contribute neither
synaptic nor offset ADDs, but their membranes still leak (state ops are
unconditional).  ``count_snn_ops`` is validated against a brute-force
instruction-counting interpreter in the test suite.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import (
    ModelConfig,
    SpikingConformer,
    TEMPORAL_KERNEL,
    POOL_KERNEL,
    POOL_STRIDE,
    _forward_batch,
    eligible_approx_layers,
)
from .neurons import SkipStats
from .training import ConfusionMatrix, metrics


@dataclass
class LayerOps:
    adds: int = 0
    core_muls: int = 0
    full_muls: int = 0

    def merge(self, other: "LayerOps") -> "LayerOps":
        return LayerOps(
            self.adds + other.adds,
            self.core_muls + other.core_muls,
            self.full_muls + other.full_muls,
        )


@dataclass
class OpTally:
    per_layer: dict[str, LayerOps] = field(default_factory=dict)

    def add(self, layer: str, adds: int = 0, core_muls: int = 0, extra_full_muls: int = 0):
        """Accumulate ops; ``full_muls`` is a superset column (core + extra)."""
        cur = self.per_layer.setdefault(layer, LayerOps())
        cur.adds += int(adds)
        cur.core_muls += int(core_muls)
        cur.full_muls += int(extra_full_muls) + int(core_muls)

    @property
    def adds(self) -> int:
        return sum(v.adds for v in self.per_layer.values())

    @property
    def core_muls(self) -> int:
        return sum(v.core_muls for v in self.per_layer.values())

    @property
    def full_muls(self) -> int:
        return sum(v.full_muls for v in self.per_layer.values())

    @property
    def muls(self) -> int:
        # paper-style column: classifier + attention scaling only
        return self.core_muls

    def merge(self, other: "OpTally") -> "OpTally":
        out = OpTally({k: LayerOps(v.adds, v.core_muls, v.full_muls)
                       for k, v in self.per_layer.items()})
        for k, v in other.per_layer.items():
            out.per_layer[k] = out.per_layer.get(k, LayerOps()).merge(v)
        return out

    @classmethod
    def from_totals(cls, adds: int, muls: int) -> "OpTally":
        return cls({"total": LayerOps(int(adds), int(muls), int(muls))})


def _nnz(x) -> int:
    return int(round(float(np.asarray(x).sum())))


def _comp_counts(T: int, t_th: int, shape_per_t, mask):
    """Computed-output counts per timestep: all neurons for t <= T_th,
    only the pos_idx mask afterwards (mask is None when approx is off)."""
    n = int(np.prod(shape_per_t))
    if mask is None:
        return [n] * T
    m = int(mask.sum())
    return [n if t < t_th else m for t in range(T)]


def count_snn_ops(model: SpikingConformer, segment) -> OpTally:
    """Tally spike-triggered ADDs and real MULs for one segment inference.

    Runs a checked evaluation forward (approximation per the model config)
    and applies the conventions in the module docstring.
    """
    cfg = model.cfg
    seg = np.asarray(segment, dtype=float)
    if seg.ndim == 2:
        seg = seg[None]
    _, aux = _forward_batch(
        model, seg, approx_enabled=cfg.approx_enabled, checked=True, collect=True
    )
    rec = aux["record"]
    masks = rec["masks"]
    T, t_th = cfg.T, cfg.t_th
    k, ch, d, dh, n_tok = cfg.k, cfg.ch, cfg.embed_dim, cfg.mlp_hidden, cfg.n_tok
    w1 = cfg.sample_len - TEMPORAL_KERNEL + 1
    h = cfg.classifier_hidden
    tally = OpTally()

    # conv module
    tally.add("conv.temporal", extra_full_muls=k * ch * w1 * TEMPORAL_KERNEL)
    m1 = k * ch * w1
    tally.add("lif.temporal", adds=2 * m1 * T, extra_full_muls=m1 * T)

    s1 = rec["s1"][:, 0]  # (T, k, ch, W1)
    mask_sp = masks.get("conv.spatial")
    col_spikes = s1.sum(axis=(1, 2))  # (T, W1)
    if mask_sp is None:
        outs_per_col = np.full((T, w1), k, dtype=float)
        offsets = k * w1 * T
    else:
        m = mask_sp[0, :, 0, :]  # (k, W1)
        per_col = m.sum(axis=0)  # (W1,)
        outs_per_col = np.stack(
            [np.full(w1, k, dtype=float) if t < t_th else per_col for t in range(T)]
        )
        offsets = sum(_comp_counts(T, t_th, (k, 1, w1), m))
    tally.add("conv.spatial", adds=_nnz((col_spikes * outs_per_col)) + offsets)
    m2 = k * w1
    tally.add("lif.spatial", adds=2 * m2 * T, extra_full_muls=m2 * T)

    s2 = rec["s2"][:, 0]  # (T, k, 1, W1)
    win = np.lib.stride_tricks.sliding_window_view(s2, POOL_KERNEL, axis=-1)
    win = win[..., ::POOL_STRIDE, :]
    tally.add("pool", adds=_nnz(win), extra_full_muls=k * n_tok * T)

    tally.add("conv.proj", extra_full_muls=T * d * n_tok * k)
    m3 = d * n_tok
    tally.add("lif.proj", adds=2 * m3 * T, extra_full_muls=m3 * T)

    # encoders
    x = rec["tokens0"][:, 0]  # (T, N, D)
    for i in range(cfg.n_encoders):
        e = rec[f"enc{i}"]
        for name, raster_in in (("q", x), ("k", x), ("v", x)):
            mask = masks.get(f"enc{i}.{name}")
            tally.add(
                f"enc{i}.{name}",
                adds=_masked_linear_adds(raster_in, mask, t_th, d)
                + _offset_adds(T, t_th, n_tok * d, mask),
            )
            tally.add(f"enc{i}.lif.{name}", adds=2 * n_tok * d * T, extra_full_muls=n_tok * d * T)
        q, kk, v = e["q"][:, 0], e["k"][:, 0], e["v"][:, 0]
        coinc = _nnz((q.sum(axis=1) * kk.sum(axis=1)))
        pv = n_tok * _nnz(v)
        tally.add(f"enc{i}.attn", adds=coinc + pv, core_muls=T * n_tok * d)
        tally.add(f"enc{i}.lif.attn", adds=2 * n_tok * d * T, extra_full_muls=n_tok * d * T)
        sa = e["sa"][:, 0]
        mask_p = masks.get(f"enc{i}.attn_proj")
        tally.add(
            f"enc{i}.attn_proj",
            adds=_masked_linear_adds(sa, mask_p, t_th, d)
            + _offset_adds(T, t_th, n_tok * d, mask_p),
        )
        tally.add(f"enc{i}.ssa_residual", adds=_nnz(x))
        tally.add(f"enc{i}.lif.ssa_out", adds=2 * n_tok * d * T, extra_full_muls=n_tok * d * T)
        x1 = e["x1"][:, 0]
        tally.add(
            f"enc{i}.mlp1",
            adds=_masked_linear_adds(x1, masks.get(f"enc{i}.mlp1"), t_th, dh)
            + _offset_adds(T, t_th, n_tok * dh, masks.get(f"enc{i}.mlp1")),
        )
        tally.add(f"enc{i}.lif.mlp1", adds=2 * n_tok * dh * T, extra_full_muls=n_tok * dh * T)
        sm1 = e["sm1"][:, 0]
        tally.add(
            f"enc{i}.mlp2",
            adds=_masked_linear_adds(sm1, masks.get(f"enc{i}.mlp2"), t_th, d)
            + _offset_adds(T, t_th, n_tok * d, masks.get(f"enc{i}.mlp2")),
        )
        tally.add(f"enc{i}.mlp_residual", adds=_nnz(x1))
        tally.add(f"enc{i}.lif.mlp_out", adds=2 * n_tok * d * T, extra_full_muls=n_tok * d * T)
        x = e["x2"][:, 0]

    # classification head: spike-gated rate sums, then real-valued layers
    tally.add("head.rate", adds=_nnz(x), core_muls=d)
    tally.add("head.fc", core_muls=d * h + h * 2)
    return tally


def _masked_linear_adds(raster, mask, t_th, n_out) -> int:
    """Synaptic adds of a per-token linear map under an optional skip mask."""
    T = raster.shape[0]
    nnz_tok = raster.sum(axis=-1)  # (T, N)
    if mask is None:
        return _nnz(nnz_tok) * n_out
    outs = mask[0].sum(axis=-1)  # (N,)
    total = 0.0
    for t in range(T):
        per_tok = np.full(nnz_tok.shape[1], n_out, dtype=float) if t < t_th else outs
        total += float((nnz_tok[t] * per_tok).sum())
    return int(round(total))


def _offset_adds(T, t_th, n_per_t, mask) -> int:
    if mask is None:
        return n_per_t * T
    m = int(mask.sum())
    return n_per_t * t_th + m * (T - t_th)


# ---------------------------------------------------------------------------
# non-spiking equivalent
# ---------------------------------------------------------------------------


@dataclass
class AnnOpModel:
    """Analytic MAC model of the shape-matched non-spiking transformer."""

    per_layer: dict[str, int] = field(default_factory=dict)
    softmax_ops: int = 0

    @property
    def total_macs(self) -> int:
        return sum(self.per_layer.values())

    @property
    def total_ops(self) -> int:
        # one MUL + one ADD per multiply-accumulate
        return 2 * self.total_macs

    @property
    def grand_total(self) -> int:
        return self.total_ops + self.softmax_ops


def count_ann_ops(cfg: ModelConfig) -> AnnOpModel:
    """MACs of the equivalent real-valued model (same shapes, T = 1), with
    softmax restored in attention (exp/div counted as 5 ops per entry)."""
    k, ch, d, dh = cfg.k, cfg.ch, cfg.embed_dim, cfg.mlp_hidden
    n, h = cfg.n_tok, cfg.classifier_hidden
    w1 = cfg.sample_len - TEMPORAL_KERNEL + 1
    per = {
        "conv.temporal": k * ch * w1 * TEMPORAL_KERNEL,
        "conv.spatial": k * w1 * (k * ch),
        "pool": k * n * POOL_KERNEL,
        "conv.proj": d * n * k,
    }
    softmax = 0
    for i in range(cfg.n_encoders):
        per[f"enc{i}.qkv"] = 3 * n * d * d
        per[f"enc{i}.attn_qk"] = n * n * d
        per[f"enc{i}.attn_scale"] = n * n
        per[f"enc{i}.attn_pv"] = n * d * n
        per[f"enc{i}.attn_proj"] = n * d * d
        per[f"enc{i}.mlp"] = n * dh * d + n * d * dh
        softmax += 5 * n * n
    per["head.rate"] = d * n
    per["head.fc"] = d * h + h * 2
    return AnnOpModel(per_layer=per, softmax_ops=softmax)


def efficiency_ratio(snn: OpTally, ann: AnnOpModel) -> float:
    """Operations of the non-spiking model divided by the spiking total
    (paper-style MUL column)."""
    snn_total = snn.adds + snn.muls
    if ann.grand_total <= 0:
        raise ValueError("ANN op model is empty")
    if snn_total <= 0:
        raise ValueError("SNN tally is empty")
    return ann.grand_total / snn_total


# ---------------------------------------------------------------------------
# skip reporting
# ---------------------------------------------------------------------------


@dataclass
class EvalOutcome:
    tally: OpTally
    preds: np.ndarray
    cm: ConfusionMatrix | None = None
    layer_skip: dict[str, SkipStats] = field(default_factory=dict)


def run_outcome(model: SpikingConformer, X, y=None, approx_enabled=False,
                max_op_segments: int | None = 16) -> EvalOutcome:
    """Evaluate all segments and tally operations on the first few of them."""
    from dataclasses import replace as _replace

    cfg = _replace(model.cfg, approx_enabled=approx_enabled)
    m = SpikingConformer(cfg, model.params, model.bn_running, model.seed)
    preds = np.empty(X.shape[0], dtype=int)
    layer_skip: dict[str, SkipStats] = {}
    for start in range(0, X.shape[0], 64):
        xb = X[start : start + 64]
        logits, aux = _forward_batch(m, xb, approx_enabled=approx_enabled)
        preds[start : start + xb.shape[0]] = logits.argmax(axis=1)
        if approx_enabled:
            for name, s in aux["approx"].stats.items():
                layer_skip[name] = layer_skip.get(name, SkipStats()).merge(s)
    tally = OpTally()
    n_ops = X.shape[0] if max_op_segments is None else min(max_op_segments, X.shape[0])
    for i in range(n_ops):
        tally = tally.merge(count_snn_ops(m, X[i]))
    cm = None
    if y is not None:
        y = np.asarray(y, dtype=int)
        cm = ConfusionMatrix(
            tp=int(((preds == 0) & (y == 0)).sum()),
            fp=int(((preds == 0) & (y == 1)).sum()),
            tn=int(((preds == 1) & (y == 1)).sum()),
            fn=int(((preds == 1) & (y == 0)).sum()),
        )
    return EvalOutcome(tally=tally, preds=preds, cm=cm, layer_skip=layer_skip)


@dataclass
class SkipReport:
    reduction_percent: float
    per_layer: dict[str, tuple[int, int, float]]  # performed, skipped, percent
    divergent_predictions: int
    acc_delta: float | None
    adds_exact: int
    adds_approx: int


def skip_report(exact: EvalOutcome, approx: EvalOutcome) -> SkipReport:
    """Compare exact vs approximate evaluation of the same inputs."""
    if exact.preds.shape != approx.preds.shape:
        raise ValueError("outcomes cover different inputs")
    performed = sum(s.updates_performed for s in approx.layer_skip.values())
    skipped = sum(s.updates_skipped for s in approx.layer_skip.values())
    total = performed + skipped
    per_layer = {
        name: (
            s.updates_performed,
            s.updates_skipped,
            100.0 * s.updates_skipped / (s.updates_performed + s.updates_skipped),
        )
        for name, s in sorted(approx.layer_skip.items())
    }
    acc_delta = None
    if exact.cm is not None and approx.cm is not None:
        acc_delta = metrics(approx.cm)[2] - metrics(exact.cm)[2]
    return SkipReport(
        reduction_percent=100.0 * skipped / total if total else 0.0,
        per_layer=per_layer,
        divergent_predictions=int((exact.preds != approx.preds).sum()),
        acc_delta=acc_delta,
        adds_exact=exact.tally.adds,
        adds_approx=approx.tally.adds,
    )


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def write_op_report_csv(path, tally: OpTally, skip: dict[str, SkipStats] | None = None,
                        ratio: float | None = None) -> None:
    skip = skip or {}
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["layer", "adds", "core_muls", "full_muls", "skipped", "reduction_percent"])
        for name in sorted(tally.per_layer):
            ops = tally.per_layer[name]
            s = skip.get(name)
            skipped = s.updates_skipped if s else 0
            pct = (
                100.0 * s.updates_skipped / (s.updates_performed + s.updates_skipped)
                if s and (s.updates_performed + s.updates_skipped)
                else 0.0
            )
            w.writerow([name, ops.adds, ops.core_muls, ops.full_muls, skipped, f"{pct:.4f}"])
        w.writerow(["total", tally.adds, tally.core_muls, tally.full_muls,
                    sum(s.updates_skipped for s in skip.values()), ""])
        if ratio is not None:
            w.writerow(["efficiency_ratio", f"{ratio:.4f}", "", "", "", ""])


def format_op_table(tally: OpTally, skip: dict[str, SkipStats] | None = None) -> str:
    skip = skip or {}
    lines = [f"{'layer':<24}{'adds':>14}{'core_muls':>12}{'full_muls':>14}{'skipped':>12}"]
    for name in sorted(tally.per_layer):
        ops = tally.per_layer[name]
        s = skip.get(name)
        lines.append(
            f"{name:<24}{ops.adds:>14}{ops.core_muls:>12}{ops.full_muls:>14}"
            f"{(s.updates_skipped if s else 0):>12}"
        )
    lines.append(
        f"{'total':<24}{tally.adds:>14}{tally.core_muls:>12}{tally.full_muls:>14}"
        f"{sum(s.updates_skipped for s in skip.values()):>12}"
    )
    return "\n".join(lines)
