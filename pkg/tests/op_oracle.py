"""Brute-force instrumented interpreter for operation counting.

Executes a SpikingConformer on one segment with explicit Python loops,
incrementing ADD/MUL counters as each scalar operation happens, following
the same counting conventions the profiler documents.  Completely
independent of the vectorized forward and of count_snn_ops: convolutions,
LIF recursions, attention, masking and the tally itself are all re-derived
here from the model weights.

Only usable on tiny models (every loop is scalar Python).
"""

from collections import defaultdict

import numpy as np

from spiking_conformer.model import TEMPORAL_KERNEL, POOL_KERNEL, POOL_STRIDE


class OracleTally:
    def __init__(self):
        self.layers = defaultdict(lambda: [0, 0, 0])  # adds, core, extra-full

    def add(self, layer, adds=0, core=0, full=0):
        row = self.layers[layer]
        row[0] += adds
        row[1] += core
        row[2] += full

    def as_dict(self):
        return {
            name: (row[0], row[1], row[1] + row[2])
            for name, row in self.layers.items()
        }


def _bn_eval(x, gamma, beta, rm, rv, eps=1e-5):
    inv_std = 1.0 / np.sqrt(rv + eps)
    return gamma * ((x - rm) * inv_std) + beta


def _lif_scalar_run(tally, layer, currents, lif):
    """currents: (T, n) -> spikes (T, n); counts 2 ADD + 1 MUL per step."""
    T, n = currents.shape
    spikes = np.zeros((T, n))
    v = np.zeros(n)
    for t in range(T):
        for i in range(n):
            h = v[i] + (currents[t, i] - (v[i] - lif.v_reset)) * lif.inv_tau
            tally.add(layer, adds=2, full=1)
            s = 1.0 if h >= lif.v_th else 0.0
            spikes[t, i] = s
            v[i] = h * (1.0 - s) + lif.v_reset * s
    return spikes


def _skip_mask(currents, t_th):
    """pos_idx after the first t_th steps: any strictly positive current."""
    n = currents.shape[1]
    pos = np.zeros(n, dtype=bool)
    for t in range(t_th):
        for i in range(n):
            if currents[t, i] > 0.0:
                pos[i] = True
    return pos


def oracle_count(model, segment):
    """Returns (tally dict, logits, rasters dict)."""
    cfg = model.cfg
    p = model.params
    lif = cfg.lif
    seg = np.asarray(segment, dtype=float)
    if seg.ndim == 3:
        seg = seg[0]
    T, k, ch, d, dh = cfg.T, cfg.k, cfg.ch, cfg.embed_dim, cfg.mlp_hidden
    n_tok, hsz = cfg.n_tok, cfg.classifier_hidden
    w1 = cfg.sample_len - TEMPORAL_KERNEL + 1
    t_th = cfg.t_th if cfg.approx_enabled else T
    tally = OracleTally()
    rasters = {}

    def bn(name, x):
        # x has channels on axis 0
        rm, rv = model.bn_running[name]
        shape = (-1,) + (1,) * (x.ndim - 1)
        return _bn_eval(
            x, p[f"{name}.gamma"].reshape(shape), p[f"{name}.beta"].reshape(shape),
            rm.reshape(shape), rv.reshape(shape),
        )

    # ---- temporal conv (real input, computed once under direct coding) ----
    wt = p["conv.temporal.w"]
    bt = p["conv.temporal.b"]
    c1 = np.zeros((k, ch, w1))
    for o in range(k):
        for y in range(ch):
            for x_ in range(w1):
                acc = 0.0
                for dtap in range(TEMPORAL_KERNEL):
                    acc += wt[o, 0, 0, dtap] * seg[y, x_ + dtap]
                    tally.add("conv.temporal", full=1)
                c1[o, y, x_] = acc + bt[o]
    i1 = bn("conv.temporal_bn", c1)

    s1 = _lif_scalar_run(
        tally, "lif.temporal", np.broadcast_to(i1.reshape(1, -1), (T, i1.size)), lif
    ).reshape(T, k, ch, w1)
    rasters["s1"] = s1

    # ---- spatial conv (spike input, skip-eligible) -------------------------
    ws = p["conv.spatial.w"]
    bs = p["conv.spatial.b"]
    rm, rv = model.bn_running["conv.spatial_bn"]
    x2 = np.zeros((T, k, w1))
    for t in range(T):
        for o in range(k):
            for x_ in range(w1):
                acc = 0.0
                for c in range(k):
                    for y in range(ch):
                        acc += ws[o, c, y, 0] * s1[t, c, y, x_]
                x2[t, o, x_] = _bn_eval(
                    acc + bs[o], p["conv.spatial_bn.gamma"][o],
                    p["conv.spatial_bn.beta"][o], rm[o], rv[o],
                )
    pos_sp = _skip_mask(x2.reshape(T, -1), t_th)
    for t in range(T):
        for o in range(k):
            for x_ in range(w1):
                if t >= t_th and not pos_sp[o * w1 + x_]:
                    x2[t, o, x_] = 0.0
                    continue
                tally.add("conv.spatial", adds=1)  # folded offset
                for c in range(k):
                    for y in range(ch):
                        if s1[t, c, y, x_] == 1.0:
                            tally.add("conv.spatial", adds=1)
    s2 = _lif_scalar_run(tally, "lif.spatial", x2.reshape(T, -1), lif).reshape(T, k, w1)
    rasters["s2"] = s2

    # ---- average pooling (spike sums) --------------------------------------
    pooled = np.zeros((T, k, n_tok))
    for t in range(T):
        for c in range(k):
            for wdx in range(n_tok):
                acc = 0.0
                for j in range(POOL_KERNEL):
                    val = s2[t, c, wdx * POOL_STRIDE + j]
                    if val == 1.0:
                        tally.add("pool", adds=1)
                    acc += val
                pooled[t, c, wdx] = acc / POOL_KERNEL
                tally.add("pool", full=1)

    # ---- projection conv (real-valued pooled input) ------------------------
    wp = p["conv.proj.w"]
    bp = p["conv.proj.b"]
    rm, rv = model.bn_running["conv.proj_bn"]
    x3 = np.zeros((T, d, n_tok))
    for t in range(T):
        for o in range(d):
            for n in range(n_tok):
                acc = 0.0
                for c in range(k):
                    acc += wp[o, c, 0, 0] * pooled[t, c, n]
                    tally.add("conv.proj", full=1)
                x3[t, o, n] = _bn_eval(
                    acc + bp[o], p["conv.proj_bn.gamma"][o],
                    p["conv.proj_bn.beta"][o], rm[o], rv[o],
                )
    s3 = _lif_scalar_run(tally, "lif.proj", x3.reshape(T, -1), lif).reshape(T, d, n_tok)
    tokens = np.transpose(s3, (0, 2, 1))  # (T, N, D)
    rasters["tokens0"] = tokens

    # ---- encoder blocks -----------------------------------------------------
    x = tokens
    for i in range(cfg.n_encoders):

        def masked_linear(layer, raster, weight, bn_name, n_out):
            rm_, rv_ = model.bn_running[bn_name]
            cur = np.zeros((T, n_tok, n_out))
            for t in range(T):
                for n in range(n_tok):
                    for o in range(n_out):
                        acc = 0.0
                        for j in range(raster.shape[2]):
                            acc += weight[o, j] * raster[t, n, j]
                        cur[t, n, o] = _bn_eval(
                            acc, p[f"{bn_name}.gamma"][o], p[f"{bn_name}.beta"][o],
                            rm_[o], rv_[o],
                        )
            pos = _skip_mask(cur.reshape(T, -1), t_th)
            for t in range(T):
                for n in range(n_tok):
                    for o in range(n_out):
                        if t >= t_th and not pos[n * n_out + o]:
                            cur[t, n, o] = 0.0
                            continue
                        tally.add(layer, adds=1)  # BN offset
                        for j in range(raster.shape[2]):
                            if raster[t, n, j] == 1.0:
                                tally.add(layer, adds=1)
            return cur

        def masked_linear_bias(layer, raster, weight, bias, bn_name, n_out):
            rm_, rv_ = model.bn_running[bn_name]
            cur = np.zeros((T, n_tok, n_out))
            for t in range(T):
                for n in range(n_tok):
                    for o in range(n_out):
                        acc = bias[o]
                        for j in range(raster.shape[2]):
                            acc += weight[o, j] * raster[t, n, j]
                        cur[t, n, o] = _bn_eval(
                            acc, p[f"{bn_name}.gamma"][o], p[f"{bn_name}.beta"][o],
                            rm_[o], rv_[o],
                        )
            pos = _skip_mask(cur.reshape(T, -1), t_th)
            for t in range(T):
                for n in range(n_tok):
                    for o in range(n_out):
                        if t >= t_th and not pos[n * n_out + o]:
                            cur[t, n, o] = 0.0
                            continue
                        tally.add(layer, adds=1)  # folded bias+BN offset
                        for j in range(raster.shape[2]):
                            if raster[t, n, j] == 1.0:
                                tally.add(layer, adds=1)
            return cur

        qc = masked_linear(f"enc{i}.q", x, p[f"enc{i}.q.w"], f"enc{i}.q_bn", d)
        kc = masked_linear(f"enc{i}.k", x, p[f"enc{i}.k.w"], f"enc{i}.k_bn", d)
        vc = masked_linear(f"enc{i}.v", x, p[f"enc{i}.v.w"], f"enc{i}.v_bn", d)
        q = _lif_scalar_run(tally, f"enc{i}.lif.q", qc.reshape(T, -1), lif).reshape(T, n_tok, d)
        kr = _lif_scalar_run(tally, f"enc{i}.lif.k", kc.reshape(T, -1), lif).reshape(T, n_tok, d)
        v = _lif_scalar_run(tally, f"enc{i}.lif.v", vc.reshape(T, -1), lif).reshape(T, n_tok, d)

        a = np.zeros((T, n_tok, d))
        for t in range(T):
            pmat = np.zeros((n_tok, n_tok))
            for ii in range(n_tok):
                for jj in range(n_tok):
                    for dd in range(d):
                        if q[t, ii, dd] == 1.0 and kr[t, jj, dd] == 1.0:
                            pmat[ii, jj] += 1.0
                            tally.add(f"enc{i}.attn", adds=1)
            for ii in range(n_tok):
                for dd in range(d):
                    acc = 0.0
                    for jj in range(n_tok):
                        if v[t, jj, dd] == 1.0:
                            acc += pmat[ii, jj]
                            tally.add(f"enc{i}.attn", adds=1)
                    a[t, ii, dd] = acc * cfg.attn_scale
                    tally.add(f"enc{i}.attn", core=1)
        sa = _lif_scalar_run(tally, f"enc{i}.lif.attn", a.reshape(T, -1), lif).reshape(T, n_tok, d)

        pc = masked_linear(f"enc{i}.attn_proj", sa, p[f"enc{i}.attn_proj.w"],
                           f"enc{i}.attn_proj_bn", d)
        cur1 = pc.copy()
        for t in range(T):
            for n in range(n_tok):
                for dd in range(d):
                    if x[t, n, dd] == 1.0:
                        cur1[t, n, dd] += 1.0
                        tally.add(f"enc{i}.ssa_residual", adds=1)
        x1 = _lif_scalar_run(tally, f"enc{i}.lif.ssa_out", cur1.reshape(T, -1), lif).reshape(T, n_tok, d)

        m1 = masked_linear_bias(f"enc{i}.mlp1", x1, p[f"enc{i}.mlp1.w"],
                                p[f"enc{i}.mlp1.b"], f"enc{i}.mlp1_bn", dh)
        sm1 = _lif_scalar_run(tally, f"enc{i}.lif.mlp1", m1.reshape(T, -1), lif).reshape(T, n_tok, dh)
        m2 = masked_linear_bias(f"enc{i}.mlp2", sm1, p[f"enc{i}.mlp2.w"],
                                p[f"enc{i}.mlp2.b"], f"enc{i}.mlp2_bn", d)
        cur2 = m2.copy()
        for t in range(T):
            for n in range(n_tok):
                for dd in range(d):
                    if x1[t, n, dd] == 1.0:
                        cur2[t, n, dd] += 1.0
                        tally.add(f"enc{i}.mlp_residual", adds=1)
        x = _lif_scalar_run(tally, f"enc{i}.lif.mlp_out", cur2.reshape(T, -1), lif).reshape(T, n_tok, d)
        rasters[f"enc{i}.out"] = x

    # ---- classification head ------------------------------------------------
    rates = np.zeros(d)
    for dd in range(d):
        acc = 0.0
        for t in range(T):
            for n in range(n_tok):
                if x[t, n, dd] == 1.0:
                    acc += 1.0
                    tally.add("head.rate", adds=1)
        rates[dd] = acc / (T * n_tok)
        tally.add("head.rate", core=1)

    h1 = np.zeros(hsz)
    for o in range(hsz):
        acc = p["head.fc1.b"][o]
        for j in range(d):
            acc += p["head.fc1.w"][o, j] * rates[j]
            tally.add("head.fc", core=1)
        h1[o] = acc
    logits = np.zeros(2)
    for o in range(2):
        acc = p["head.fc2.b"][o]
        for j in range(hsz):
            acc += p["head.fc2.w"][o, j] * h1[j]
            tally.add("head.fc", core=1)
        logits[o] = acc

    return tally.as_dict(), logits, rasters
