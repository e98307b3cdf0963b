"""Spiking convolutional transformer: architecture, forward and backward.

The network has three stages:

  1. spiking convolution module: temporal conv (k kernels, (1, 25)) -> BN ->
     LIF -> spatial conv (k kernels, (ch, 1), collapses the electrode axis)
     -> BN -> LIF -> average pooling ((1, 64) / (1, 50)) -> pointwise
     projection conv to the embedding dim -> BN -> LIF.  The raw segment is
     presented identically at every timestep (direct coding), so the
     temporal conv and its BN are computed once per sample.
  2. encoder blocks: softmax-free spiking self-attention plus a two-layer
     MLP, both with residual connections.  Residuals are injected as input
     current into the branch's final spiking layer, which keeps every
     activation between spiking layers an exact {0,1} raster.
  3. classification head: firing rates averaged over time and tokens feed
     two fully-connected layers producing a 2-logit output (index 0 =
     ictal/pre-ictal, index 1 = inter-ictal).

Backward passes are hand-composed per layer (no autograd).  Two backward
conventions exist: the training convention (hard threshold forward, sigmoid
surrogate for the spike derivative, reset path detached) and the exact
gradient of the soft forward (sigmoid in place of the threshold, reset path
differentiated), which is what finite differences can verify.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .neurons import ApproxConfig, LifParams, SkipStats
from .tensor import (
    DTYPE,
    BatchNormState,
    ConvSpec,
    NumericError,
    ShapeError,
    assert_binary,
    assert_finite,
    avg_pool2d,
    avg_pool2d_backward,
    batch_norm_backward,
    batch_norm_forward,
    conv2d,
    conv2d_backward,
    load_bundle,
    save_bundle,
)

TEMPORAL_KERNEL = 25
POOL_KERNEL = 64
POOL_STRIDE = 50


def n_tokens(sample_len: int) -> int:
    """Token count after temporal conv and pooling (valid padding)."""
    w1 = sample_len - TEMPORAL_KERNEL + 1
    if w1 < POOL_KERNEL:
        raise ShapeError(f"sample_len {sample_len} too short (needs >= 89)")
    return (w1 - POOL_KERNEL) // POOL_STRIDE + 1


@dataclass
class ModelConfig:
    task: str = "detection"
    ch: int = 22
    sample_len: int = 1280
    T: int = 8
    k: int = 8
    embed_dim: int = 32
    n_encoders: int = 1
    mlp_ratio: float = 1.0
    classifier_hidden: int = 16
    attn_scale: float = 0.125
    t_th: int = 2
    approx_enabled: bool = False
    approx_layers: tuple[str, ...] | None = None
    lif: LifParams = field(default_factory=LifParams)

    def __post_init__(self):
        if self.task not in ("detection", "prediction"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.embed_dim < 1 or self.mlp_ratio <= 0:
            raise ValueError("embed_dim must be >= 1 and mlp_ratio > 0")
        if self.n_encoders < 1 or self.k < 1 or self.T < 1:
            raise ValueError("k, n_encoders and T must be >= 1")
        if not 0 <= self.t_th <= self.T:
            raise ValueError("t_th must lie in [0, T]")
        n_tokens(self.sample_len)

    @property
    def mlp_hidden(self) -> int:
        return int(np.ceil(self.mlp_ratio * self.embed_dim))

    @property
    def n_tok(self) -> int:
        return n_tokens(self.sample_len)

    @property
    def approx(self) -> ApproxConfig:
        return ApproxConfig(T=self.T, T_th=self.t_th, enabled=self.approx_enabled)


def detection_config(**overrides) -> ModelConfig:
    """Detection preset: one encoder, k = 8, 8 timesteps."""
    return ModelConfig(task="detection", k=8, n_encoders=1, T=8, **overrides)


def prediction_config(**overrides) -> ModelConfig:
    """Prediction preset: two encoders, k = 32, 8 timesteps."""
    return ModelConfig(task="prediction", k=32, n_encoders=2, T=8, **overrides)


# layer name -> (shape builders); used by init, counting and checkpoints
def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    k, ch, d, dh, h = cfg.k, cfg.ch, cfg.embed_dim, cfg.mlp_hidden, cfg.classifier_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "conv.temporal.w": (k, 1, 1, TEMPORAL_KERNEL),
        "conv.temporal.b": (k,),
        "conv.temporal_bn.gamma": (k,),
        "conv.temporal_bn.beta": (k,),
        "conv.spatial.w": (k, k, ch, 1),
        "conv.spatial.b": (k,),
        "conv.spatial_bn.gamma": (k,),
        "conv.spatial_bn.beta": (k,),
        "conv.proj.w": (d, k, 1, 1),
        "conv.proj.b": (d,),
        "conv.proj_bn.gamma": (d,),
        "conv.proj_bn.beta": (d,),
    }
    for i in range(cfg.n_encoders):
        shapes[f"enc{i}.q.w"] = (d, d)
        shapes[f"enc{i}.q_bn.gamma"] = (d,)
        shapes[f"enc{i}.q_bn.beta"] = (d,)
        shapes[f"enc{i}.k.w"] = (d, d)
        shapes[f"enc{i}.k_bn.gamma"] = (d,)
        shapes[f"enc{i}.k_bn.beta"] = (d,)
        shapes[f"enc{i}.v.w"] = (d, d)
        shapes[f"enc{i}.v_bn.gamma"] = (d,)
        shapes[f"enc{i}.v_bn.beta"] = (d,)
        shapes[f"enc{i}.attn_proj.w"] = (d, d)
        shapes[f"enc{i}.attn_proj_bn.gamma"] = (d,)
        shapes[f"enc{i}.attn_proj_bn.beta"] = (d,)
        shapes[f"enc{i}.mlp1.w"] = (dh, d)
        shapes[f"enc{i}.mlp1.b"] = (dh,)
        shapes[f"enc{i}.mlp1_bn.gamma"] = (dh,)
        shapes[f"enc{i}.mlp1_bn.beta"] = (dh,)
        shapes[f"enc{i}.mlp2.w"] = (d, dh)
        shapes[f"enc{i}.mlp2.b"] = (d,)
        shapes[f"enc{i}.mlp2_bn.gamma"] = (d,)
        shapes[f"enc{i}.mlp2_bn.beta"] = (d,)
    shapes["head.fc1.w"] = (h, d)
    shapes["head.fc1.b"] = (h,)
    shapes["head.fc2.w"] = (2, h)
    shapes["head.fc2.b"] = (2,)
    return shapes


BN_LAYERS = ("conv.temporal_bn", "conv.spatial_bn", "conv.proj_bn")


def _bn_names(cfg: ModelConfig) -> list[str]:
    names = list(BN_LAYERS)
    for i in range(cfg.n_encoders):
        names += [
            f"enc{i}.q_bn", f"enc{i}.k_bn", f"enc{i}.v_bn",
            f"enc{i}.attn_proj_bn", f"enc{i}.mlp1_bn", f"enc{i}.mlp2_bn",
        ]
    return names


def count_parameters(cfg: ModelConfig) -> int:
    """Number of learnable scalars (conv/linear weights+biases, BN affine)."""
    return sum(int(np.prod(s)) for s in _param_shapes(cfg).values())


@dataclass
class SpikingConformer:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    bn_running: dict[str, tuple[np.ndarray, np.ndarray]]
    seed: int = 0

    def copy(self) -> "SpikingConformer":
        return SpikingConformer(
            cfg=replace(self.cfg),
            params={k: v.copy() for k, v in self.params.items()},
            bn_running={k: (m.copy(), v.copy()) for k, (m, v) in self.bn_running.items()},
            seed=self.seed,
        )


def build_model(cfg: ModelConfig, seed: int = 0) -> SpikingConformer:
    """Deterministic init: Kaiming-uniform weights, zero biases, BN (1, 0)."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
        elif name.endswith(".b") or name.endswith(".beta"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:  # gamma
            params[name] = np.ones(shape, dtype=DTYPE)
    bn_running = {
        name: (
            np.zeros(params[f"{name}.gamma"].shape, dtype=DTYPE),
            np.ones(params[f"{name}.gamma"].shape, dtype=DTYPE),
        )
        for name in _bn_names(cfg)
    }
    return SpikingConformer(cfg=cfg, params=params, bn_running=bn_running, seed=seed)


# ---------------------------------------------------------------------------
# forward helpers
# ---------------------------------------------------------------------------


def _bn_state(model: SpikingConformer, name: str, training: bool) -> BatchNormState:
    rm, rv = model.bn_running[name]
    return BatchNormState(
        gamma=model.params[f"{name}.gamma"],
        beta=model.params[f"{name}.beta"],
        running_mean=rm,
        running_var=rv,
        mode="training" if training else "evaluation",
    )


def _bn_fwd(model, name, x, training, update_running, tape):
    state = _bn_state(model, name, training)
    out, cache = batch_norm_forward(x, state, update_running=update_running)
    if training and update_running:
        model.bn_running[name] = (state.running_mean, state.running_var)
    if tape is not None:
        tape[name] = cache
    return out


def attention_product(q, k, v, scale: float = 1.0):
    """Softmax-free attention current (Q Kt V) * scale.

    Binary q/k/v make every attention-map entry a non-negative spike
    coincidence count, so no normalization is required.  Returns
    (current, attention_map); leading batch dims pass through.
    """
    attn_map = np.matmul(q, np.swapaxes(k, -1, -2))
    return np.matmul(attn_map, v) * scale, attn_map


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    y = x.reshape(-1, x.shape[-1]) @ w.T
    if b is not None:
        y = y + b
    return y.reshape(x.shape[:-1] + (w.shape[0],))


def _linear_bwd(grad, x, w, need_dx=True):
    g2 = grad.reshape(-1, grad.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    dw = g2.T @ x2
    db = g2.sum(axis=0)
    dx = (g2 @ w).reshape(x.shape) if need_dx else None
    return dx, dw, db


class _Lif:
    """Multistep LIF over a (T, ...) current tensor with a backward cache."""

    def __init__(self, lif: LifParams, soft: bool, alpha: float):
        self.lif = lif
        self.soft = soft
        self.alpha = alpha

    def forward(self, x, tape, name, const_current=None, T=None):
        p = self.lif
        if const_current is not None:
            c = const_current.reshape(-1)
            S, H = _kernels.lif_fwd_const(
                c, T, np.zeros(c.shape[0]), p.inv_tau, p.v_th, p.v_reset,
                self.soft, self.alpha,
            )
            shape = (T,) + const_current.shape
        else:
            T = x.shape[0]
            flat = np.ascontiguousarray(x.reshape(T, -1))
            S, H = _kernels.lif_fwd(
                flat, np.zeros(flat.shape[1]), p.inv_tau, p.v_th, p.v_reset,
                self.soft, self.alpha,
            )
            shape = x.shape
        if tape is not None:
            tape[name] = (H, S, shape)
        return S.reshape(shape)

    def backward(self, dS, tape, name):
        H, S, shape = tape[name]
        p = self.lif
        T = shape[0]
        dX = _kernels.lif_bwd(
            dS.reshape(T, -1), H, S, p.inv_tau, p.v_th, p.v_reset,
            self.alpha, detach_reset=not self.soft,
        )
        return dX.reshape(shape)


ELIGIBLE_CONV = ("conv.spatial",)


def eligible_approx_layers(cfg: ModelConfig) -> list[str]:
    """Layers whose input is a binary raster, in forward order."""
    names = list(ELIGIBLE_CONV)
    for i in range(cfg.n_encoders):
        names += [
            f"enc{i}.q", f"enc{i}.k", f"enc{i}.v",
            f"enc{i}.attn_proj", f"enc{i}.mlp1", f"enc{i}.mlp2",
        ]
    return names


class _ApproxRun:
    """Per-forward bookkeeping for approximate spike-triggered updates."""

    def __init__(self, cfg: ModelConfig, enabled: bool):
        self.enabled = enabled
        self.t_th = cfg.t_th
        allowed = eligible_approx_layers(cfg)
        if cfg.approx_layers is not None:
            allowed = [n for n in allowed if n in cfg.approx_layers]
        self.layers = set(allowed)
        self.stats: dict[str, SkipStats] = {}
        self.masks: dict[str, np.ndarray] = {}

    def apply(self, name: str, x: np.ndarray) -> np.ndarray:
        """Mask input currents (T, B, ...) of a skip-eligible layer.

        Neurons outside pos_idx get exactly zero current for t > T_th; with
        T_th == T the tensor is returned untouched (bit-identical path).
        """
        if not self.enabled or name not in self.layers:
            return x
        T = x.shape[0]
        n_per_sample = int(np.prod(x.shape[2:]))
        t_th = self.t_th
        if t_th >= T:
            self.stats[name] = SkipStats(x.shape[1] * n_per_sample * T, 0)
            return x
        if t_th > 0:
            pos = (x[:t_th] > 0.0).any(axis=0)
        else:
            pos = np.zeros(x.shape[1:], dtype=bool)
        x = x.copy()
        x[t_th:] = np.where(pos, x[t_th:], 0.0)
        npos = int(pos.sum())
        total = x.shape[1] * n_per_sample
        self.stats[name] = SkipStats(
            updates_performed=total * t_th + npos * (T - t_th),
            updates_skipped=(total - npos) * (T - t_th),
        )
        self.masks[name] = pos
        return x

    def merged(self) -> SkipStats:
        out = SkipStats()
        for s in self.stats.values():
            out = out.merge(s)
        return out


def _forward_batch(
    model: SpikingConformer,
    x: np.ndarray,
    *,
    training: bool = False,
    soft: bool = False,
    alpha: float = 4.0,
    approx_enabled: bool = False,
    update_running: bool = True,
    checked: bool = False,
    collect: bool = False,
    tape: dict | None = None,
):
    """Batched forward over segments (B, ch, L).

    Returns (logits (B, 2), aux) where aux carries the approx run and, when
    ``collect`` is set, every intermediate raster the profiler needs.
    Passing a ``tape`` dict records the caches the backward pass consumes.
    """
    cfg = model.cfg
    p = model.params
    if x.ndim != 3 or x.shape[1] != cfg.ch or x.shape[2] != cfg.sample_len:
        raise ShapeError(
            f"expected segments (B, {cfg.ch}, {cfg.sample_len}), got {x.shape}"
        )
    if soft and approx_enabled:
        raise ValueError("soft mode is a training construct; approximation is eval-only")
    assert_finite(x, "segment batch")
    x = np.ascontiguousarray(x, dtype=DTYPE)
    B, T = x.shape[0], cfg.T
    lif = _Lif(cfg.lif, soft, alpha)
    approx = _ApproxRun(cfg, enabled=approx_enabled and not training)
    rec: dict = {}

    # --- spiking convolution module ---------------------------------------
    spec_t = ConvSpec(cfg.k, (1, TEMPORAL_KERNEL))
    c1 = conv2d(x[:, None], p["conv.temporal.w"], spec_t, p["conv.temporal.b"])
    i1 = _bn_fwd(model, "conv.temporal_bn", c1, training, update_running, tape)
    if tape is not None:
        tape["x"] = x
    s1 = lif.forward(None, tape, "lif.temporal", const_current=i1, T=T)
    # s1: (T, B, k, ch, W1)
    w1 = i1.shape[-1]
    s1f = s1.reshape(T * B, cfg.k, cfg.ch, w1)

    spec_s = ConvSpec(cfg.k, (cfg.ch, 1))
    c2 = conv2d(s1f, p["conv.spatial.w"], spec_s, p["conv.spatial.b"])
    x2 = _bn_fwd(model, "conv.spatial_bn", c2, training, update_running, tape)
    x2 = approx.apply("conv.spatial", x2.reshape(T, B, cfg.k, 1, w1))
    s2 = lif.forward(x2, tape, "lif.spatial")
    s2f = s2.reshape(T * B, cfg.k, 1, w1)

    pooled = avg_pool2d(s2f, (1, POOL_KERNEL), (1, POOL_STRIDE))
    if tape is not None:
        tape["s1f"] = s1f
        tape["pooled"] = pooled
        tape["pool_in_shape"] = s2f.shape

    spec_p = ConvSpec(cfg.embed_dim, (1, 1))
    c3 = conv2d(pooled, p["conv.proj.w"], spec_p, p["conv.proj.b"])
    x3 = _bn_fwd(model, "conv.proj_bn", c3, training, update_running, tape)
    n_tok = x3.shape[-1]
    s3 = lif.forward(x3.reshape(T, B, cfg.embed_dim, n_tok), tape, "lif.proj")
    tokens = np.ascontiguousarray(s3.transpose(0, 1, 3, 2))  # (T, B, N, D)
    if checked and not soft:
        assert_binary(tokens, "conv module output")
    if collect:
        rec["s1"] = s1
        rec["s2"] = s2
        rec["pooled"] = pooled.reshape(T, B, cfg.k, 1, n_tok)
        rec["tokens0"] = tokens

    # --- spiking encoder blocks --------------------------------------------
    enc_tapes = []
    for i in range(cfg.n_encoders):
        et: dict | None = {} if tape is not None else None
        tokens = _encoder_forward(
            model, tokens, i, lif, approx, training, update_running,
            checked and not soft, et, rec if collect else None,
        )
        enc_tapes.append(et)
    if tape is not None:
        tape["enc"] = enc_tapes
        tape["tokens_final"] = tokens
    if collect:
        rec["tokens_final"] = tokens

    # --- classification head ------------------------------------------------
    rates = tokens.mean(axis=(0, 2))  # (B, D)
    h1 = _linear(rates, p["head.fc1.w"], p["head.fc1.b"])
    logits = _linear(h1, p["head.fc2.w"], p["head.fc2.b"])
    if tape is not None:
        tape["rates"] = rates
        tape["h1"] = h1

    aux = {"approx": approx, "skip_stats": approx.merged() if approx.enabled else None}
    if collect:
        rec["masks"] = approx.masks
        aux["record"] = rec
    return logits, aux


def _encoder_forward(model, x, i, lif, approx, training, update_running, checked, tape, rec):
    """One encoder block on tokens (T, B, N, D); returns the output raster."""
    p = model.params
    if checked:
        assert_binary(x, f"enc{i} input")
    lead = x.shape[:3]

    def normed(name, raster):
        cur = _linear(raster, p[f"enc{i}.{name}.w"])
        cur = _bn_fwd(model, f"enc{i}.{name}_bn", _enc_bn_in(cur), training,
                      update_running, tape)
        return approx.apply(f"enc{i}.{name}", _enc_bn_out(cur, lead))

    q = lif.forward(normed("q", x), tape, f"enc{i}.lif.q")
    k = lif.forward(normed("k", x), tape, f"enc{i}.lif.k")
    v = lif.forward(normed("v", x), tape, f"enc{i}.lif.v")
    a, attn_map = attention_product(q, k, v, model.cfg.attn_scale)
    sa = lif.forward(a, tape, f"enc{i}.lif.attn")
    pc = normed("attn_proj", sa)
    x1 = lif.forward(pc + x, tape, f"enc{i}.lif.ssa_out")  # residual as current

    m1 = _linear(x1, p[f"enc{i}.mlp1.w"], p[f"enc{i}.mlp1.b"])
    m1 = _bn_fwd(model, f"enc{i}.mlp1_bn", _enc_bn_in(m1), training, update_running, tape)
    m1 = approx.apply(f"enc{i}.mlp1", _enc_bn_out(m1, x1.shape[:3]))
    sm1 = lif.forward(m1, tape, f"enc{i}.lif.mlp1")
    m2 = _linear(sm1, p[f"enc{i}.mlp2.w"], p[f"enc{i}.mlp2.b"])
    m2 = _bn_fwd(model, f"enc{i}.mlp2_bn", _enc_bn_in(m2), training, update_running, tape)
    m2 = approx.apply(f"enc{i}.mlp2", _enc_bn_out(m2, x1.shape[:3]))
    x2 = lif.forward(m2 + x1, tape, f"enc{i}.lif.mlp_out")  # residual as current

    if tape is not None:
        tape.update({"x": x, "q": q, "k": k, "v": v, "attn_map": attn_map,
                     "sa": sa, "x1": x1, "sm1": sm1})
    if rec is not None:
        rec[f"enc{i}"] = {"x": x, "q": q, "k": k, "v": v, "attn_map": attn_map,
                          "a": a, "sa": sa, "x1": x1, "sm1": sm1, "x2": x2}
    if checked:
        assert_binary(x2, f"enc{i} output")
    return x2


def _enc_bn_in(x):
    # (T, B, N, D) -> (T*B*N, D): features are the BN channels
    return x.reshape(-1, x.shape[-1])


def _enc_bn_out(x, lead_shape):
    return x.reshape(lead_shape + (x.shape[-1],))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _backward_batch(model, dlogits, tape, *, soft=False, alpha=4.0):
    """Gradients of the scalar loss wrt every parameter.

    ``tape`` must come from a ``_forward_batch`` call with the same ``soft``
    and ``alpha``.  Returns a dict keyed like ``model.params``.
    """
    cfg = model.cfg
    p = model.params
    lif = _Lif(cfg.lif, soft, alpha)
    grads: dict[str, np.ndarray] = {}

    # classifier
    dh1, grads["head.fc2.w"], grads["head.fc2.b"] = _linear_bwd(
        dlogits, tape["h1"], p["head.fc2.w"]
    )
    drates, grads["head.fc1.w"], grads["head.fc1.b"] = _linear_bwd(
        dh1, tape["rates"], p["head.fc1.w"]
    )
    tokens = tape["tokens_final"]
    T, B, N, D = tokens.shape
    dtokens = np.broadcast_to(drates[None, :, None, :] / (T * N), tokens.shape).copy()

    # encoders, reversed
    for i in range(cfg.n_encoders - 1, -1, -1):
        dtokens = _encoder_backward(model, dtokens, i, lif, tape["enc"][i], grads)

    # conv module
    ds3 = np.ascontiguousarray(dtokens.transpose(0, 1, 3, 2))  # (T, B, D, N)
    dx3 = lif.backward(ds3, tape, "lif.proj")
    n_tok = ds3.shape[-1]
    dx3 = dx3.reshape(T * B, cfg.embed_dim, 1, n_tok)
    dx3, grads["conv.proj_bn.gamma"], grads["conv.proj_bn.beta"] = batch_norm_backward(
        dx3, tape["conv.proj_bn"]
    )
    spec_p = ConvSpec(cfg.embed_dim, (1, 1))
    dpool, grads["conv.proj.w"], grads["conv.proj.b"] = conv2d_backward(
        dx3, tape["pooled"], p["conv.proj.w"], spec_p
    )
    ds2 = avg_pool2d_backward(dpool, tape["pool_in_shape"], (1, POOL_KERNEL), (1, POOL_STRIDE))
    dx2 = lif.backward(ds2.reshape(T, B, cfg.k, 1, -1), tape, "lif.spatial")
    w1 = dx2.shape[-1]
    dx2 = dx2.reshape(T * B, cfg.k, 1, w1)
    dx2, grads["conv.spatial_bn.gamma"], grads["conv.spatial_bn.beta"] = batch_norm_backward(
        dx2, tape["conv.spatial_bn"]
    )
    spec_s = ConvSpec(cfg.k, (cfg.ch, 1))
    ds1, grads["conv.spatial.w"], grads["conv.spatial.b"] = conv2d_backward(
        dx2, tape["s1f"], p["conv.spatial.w"], spec_s
    )
    dxc = lif.backward(ds1.reshape(T, B, cfg.k, cfg.ch, w1), tape, "lif.temporal")
    di1 = dxc.sum(axis=0)  # constant current: accumulate over timesteps
    dc1, grads["conv.temporal_bn.gamma"], grads["conv.temporal_bn.beta"] = batch_norm_backward(
        di1, tape["conv.temporal_bn"]
    )
    spec_t = ConvSpec(cfg.k, (1, TEMPORAL_KERNEL))
    _, grads["conv.temporal.w"], grads["conv.temporal.b"] = conv2d_backward(
        dc1, tape["x"][:, None], p["conv.temporal.w"], spec_t, need_grad_input=False
    )
    return grads


def _encoder_backward(model, dx2, i, lif, tape, grads):
    cfg = model.cfg
    p = model.params
    scale = cfg.attn_scale

    # MLP branch (residual: x2 = LIF(bn2(lin2(...)) + x1))
    dm2 = lif.backward(dx2, tape, f"enc{i}.lif.mlp_out")
    dx1 = dm2.copy()  # residual current path
    g2, grads[f"enc{i}.mlp2_bn.gamma"], grads[f"enc{i}.mlp2_bn.beta"] = batch_norm_backward(
        _enc_bn_in(dm2), tape[f"enc{i}.mlp2_bn"]
    )
    dsm1, grads[f"enc{i}.mlp2.w"], grads[f"enc{i}.mlp2.b"] = _linear_bwd(
        _enc_bn_out(g2, dx2.shape[:3]), tape["sm1"], p[f"enc{i}.mlp2.w"]
    )
    dm1 = lif.backward(dsm1, tape, f"enc{i}.lif.mlp1")
    g1, grads[f"enc{i}.mlp1_bn.gamma"], grads[f"enc{i}.mlp1_bn.beta"] = batch_norm_backward(
        _enc_bn_in(dm1), tape[f"enc{i}.mlp1_bn"]
    )
    d, grads[f"enc{i}.mlp1.w"], grads[f"enc{i}.mlp1.b"] = _linear_bwd(
        _enc_bn_out(g1, dx2.shape[:3]), tape["x1"], p[f"enc{i}.mlp1.w"]
    )
    dx1 += d

    # SSA branch (residual: x1 = LIF(bn(proj(sa)) + x))
    dcur = lif.backward(dx1, tape, f"enc{i}.lif.ssa_out")
    dx = dcur.copy()  # residual current path
    lead = dx2.shape[:3]
    gp, grads[f"enc{i}.attn_proj_bn.gamma"], grads[f"enc{i}.attn_proj_bn.beta"] = (
        batch_norm_backward(_enc_bn_in(dcur), tape[f"enc{i}.attn_proj_bn"])
    )
    dsa, grads[f"enc{i}.attn_proj.w"], _ = _linear_bwd(
        _enc_bn_out(gp, lead), tape["sa"], p[f"enc{i}.attn_proj.w"]
    )
    da = lif.backward(dsa, tape, f"enc{i}.lif.attn") * scale
    attn_map, q, k, v = tape["attn_map"], tape["q"], tape["k"], tape["v"]
    dmap = np.matmul(da, v.transpose(0, 1, 3, 2))
    dv = np.matmul(attn_map.transpose(0, 1, 3, 2), da)
    dq = np.matmul(dmap, k)
    dk = np.matmul(dmap.transpose(0, 1, 3, 2), q)
    for name, dspike in (("q", dq), ("k", dk), ("v", dv)):
        dcur_qkv = lif.backward(dspike, tape, f"enc{i}.lif.{name}")
        g, grads[f"enc{i}.{name}_bn.gamma"], grads[f"enc{i}.{name}_bn.beta"] = (
            batch_norm_backward(_enc_bn_in(dcur_qkv), tape[f"enc{i}.{name}_bn"])
        )
        d, grads[f"enc{i}.{name}.w"], _ = _linear_bwd(
            _enc_bn_out(g, lead), tape["x"], p[f"enc{i}.{name}.w"]
        )
        dx += d
    return dx


# ---------------------------------------------------------------------------
# public operations (single-sample surfaces)
# ---------------------------------------------------------------------------


def _one(segment: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    seg = np.asarray(segment, dtype=DTYPE)
    if seg.ndim == 2:
        seg = seg[None]
    if seg.shape != (1, cfg.ch, cfg.sample_len):
        raise ShapeError(
            f"segment must be (1, {cfg.ch}, {cfg.sample_len}), got {seg.shape}"
        )
    return seg


def spiking_conv_forward(segment, model: SpikingConformer, T: int | None = None):
    """Run only the spiking convolution module; returns tokens (T, N_tok, D)."""
    cfg = model.cfg if T is None else replace(model.cfg, T=T)
    m = SpikingConformer(cfg, model.params, model.bn_running, model.seed)
    seg = _one(segment, cfg)
    _, aux = _forward_batch(m, seg, collect=True, checked=True)
    return aux["record"]["tokens0"][:, 0]


def ssa_forward(
    tokens,
    weights,
    scale: float,
    lif: LifParams | None = None,
    residual: np.ndarray | None = None,
    checked: bool = True,
    return_attention: bool = False,
):
    """Softmax-free spiking self-attention on a (T, N, D) binary raster.

    ``weights`` maps 'q', 'k', 'v', 'proj' to (D, D) matrices.  The optional
    ``residual`` raster is injected as current into the output spiking
    layer.  Returns the output raster, plus the (T, N, N) attention map when
    ``return_attention``.
    """
    tokens = np.asarray(tokens, dtype=DTYPE)
    if tokens.ndim != 3:
        raise ShapeError(f"tokens must be (T, N, D), got {tokens.shape}")
    if checked:
        assert_binary(tokens, "ssa input")
    lif = lif or LifParams()
    run = _Lif(lif, soft=False, alpha=4.0)
    x = tokens[:, None]  # add batch axis
    q = run.forward(_linear(x, np.asarray(weights["q"], dtype=DTYPE)), None, "q")
    k = run.forward(_linear(x, np.asarray(weights["k"], dtype=DTYPE)), None, "k")
    v = run.forward(_linear(x, np.asarray(weights["v"], dtype=DTYPE)), None, "v")
    a, attn_map = attention_product(q, k, v, scale)
    sa = run.forward(a, None, "attn")
    pc = _linear(sa, np.asarray(weights["proj"], dtype=DTYPE))
    if residual is not None:
        pc = pc + np.asarray(residual, dtype=DTYPE)[:, None]
    out = run.forward(pc, None, "out")[:, 0]
    if return_attention:
        return out, attn_map[:, 0]
    return out


def encoder_block_forward(tokens, model: SpikingConformer, block: int = 0):
    """Apply encoder block ``block`` to a single-sample token raster."""
    tokens = np.asarray(tokens, dtype=DTYPE)
    if tokens.ndim != 3:
        raise ShapeError(f"tokens must be (T, N, D), got {tokens.shape}")
    lif = _Lif(model.cfg.lif, soft=False, alpha=4.0)
    approx = _ApproxRun(model.cfg, enabled=False)
    out = _encoder_forward(
        model, tokens[:, None], block, lif, approx,
        training=False, update_running=False, checked=True, tape=None, rec=None,
    )
    return out[:, 0]


def classify(tokens, model: SpikingConformer):
    """Firing-rate features -> two fully-connected layers -> logits (2,)."""
    tokens = np.asarray(tokens, dtype=DTYPE)
    single = tokens.ndim == 3
    if single:
        tokens = tokens[:, None]
    assert_binary(tokens, "classifier input")
    rates = tokens.mean(axis=(0, 2))
    h1 = _linear(rates, model.params["head.fc1.w"], model.params["head.fc1.b"])
    logits = _linear(h1, model.params["head.fc2.w"], model.params["head.fc2.b"])
    return logits[0] if single else logits


def model_forward(
    segment,
    model: SpikingConformer,
    approx_enabled: bool | None = None,
    checked: bool = True,
):
    """Full inference on one segment.

    Returns (logits (2,), spike_stats, skip_stats): per-layer firing rates,
    and Algorithm-style skip counters (None with approximation off).
    """
    seg = _one(segment, model.cfg)
    if approx_enabled is None:
        approx_enabled = model.cfg.approx_enabled
    logits, aux = _forward_batch(
        model, seg, approx_enabled=approx_enabled, checked=checked, collect=True
    )
    rec = aux["record"]
    spike_stats = {"conv.temporal": float(rec["s1"].mean()),
                   "conv.spatial": float(rec["s2"].mean()),
                   "conv.proj": float(rec["tokens0"].mean())}
    for i in range(model.cfg.n_encoders):
        e = rec[f"enc{i}"]
        for part in ("q", "k", "v", "sa", "x1", "x2"):
            spike_stats[f"enc{i}.{part}"] = float(e[part].mean())
    return logits[0], spike_stats, aux["skip_stats"]


# ---------------------------------------------------------------------------
# checkpoint / config io
# ---------------------------------------------------------------------------

_CONFIG_KEYS = (
    "task", "k", "n_encoders", "D", "T", "T_th", "tau", "v_th", "v_reset", "seed",
    "ch", "sample_len", "mlp_ratio", "classifier_hidden", "attn_scale",
    "approx_enabled",
)


def config_to_dict(cfg: ModelConfig, seed: int = 0) -> dict:
    return {
        "task": cfg.task,
        "k": cfg.k,
        "n_encoders": cfg.n_encoders,
        "D": cfg.embed_dim,
        "T": cfg.T,
        "T_th": cfg.t_th,
        "tau": cfg.lif.tau,
        "v_th": cfg.lif.v_th,
        "v_reset": cfg.lif.v_reset,
        "seed": seed,
        "ch": cfg.ch,
        "sample_len": cfg.sample_len,
        "mlp_ratio": cfg.mlp_ratio,
        "classifier_hidden": cfg.classifier_hidden,
        "attn_scale": cfg.attn_scale,
        "approx_enabled": int(cfg.approx_enabled),
    }


def config_from_dict(d: dict) -> tuple[ModelConfig, int]:
    cfg = ModelConfig(
        task=d.get("task", "detection"),
        ch=int(d.get("ch", 22)),
        sample_len=int(d.get("sample_len", 1280)),
        T=int(d.get("T", 8)),
        k=int(d["k"]),
        embed_dim=int(d.get("D", 32)),
        n_encoders=int(d["n_encoders"]),
        mlp_ratio=float(d.get("mlp_ratio", 1.0)),
        classifier_hidden=int(d.get("classifier_hidden", 16)),
        attn_scale=float(d.get("attn_scale", 0.125)),
        t_th=int(d.get("T_th", 2)),
        approx_enabled=bool(int(d.get("approx_enabled", 0))),
        lif=LifParams(
            tau=float(d.get("tau", 2.0)),
            v_th=float(d.get("v_th", 1.0)),
            v_reset=float(d.get("v_reset", 0.0)),
        ),
    )
    return cfg, int(d.get("seed", 0))


def write_config(path, cfg: ModelConfig, seed: int = 0) -> None:
    with open(path, "w") as fp:
        for key, value in config_to_dict(cfg, seed).items():
            fp.write(f"{key}={value}\n")


def read_config(path) -> tuple[ModelConfig, int]:
    d = {}
    with open(path) as fp:
        for line in fp:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                d[key] = value
    return config_from_dict(d)


def save_checkpoint(model: SpikingConformer, path) -> None:
    entries = dict(model.params)
    for name, (rm, rv) in model.bn_running.items():
        entries[f"{name}.running_mean"] = rm
        entries[f"{name}.running_var"] = rv
    save_bundle(path, config_to_dict(model.cfg, model.seed), entries)


def load_checkpoint(path) -> SpikingConformer:
    header, entries = load_bundle(path)
    cfg, seed = config_from_dict(header)
    params = {}
    bn_running = {}
    for name in _param_shapes(cfg):
        params[name] = entries[name]
    for name in _bn_names(cfg):
        bn_running[name] = (entries[f"{name}.running_mean"], entries[f"{name}.running_var"])
    return SpikingConformer(cfg=cfg, params=params, bn_running=bn_running, seed=seed)
