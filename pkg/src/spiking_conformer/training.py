"""Surrogate-gradient training (BPTT), evaluation, and the metric suite.

Training unrolls all T timesteps and backpropagates through the unrolled
graph, replacing the threshold derivative with the sigmoid surrogate; the
reset path is detached.  Approximate spike-triggered updates are disabled
during training and only applied in evaluation mode.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .model import SpikingConformer, _backward_batch, _forward_batch, save_checkpoint
from .neurons import SkipStats
from .tensor import DTYPE

log = logging.getLogger("spiking_conformer.training")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # "adam" | "sgd-momentum"
    seed: int = 0
    surrogate_alpha: float = 4.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_train_acc: float | None = None
    # stop mid-epoch once the mean accuracy of the last `early_stop_window`
    # batches reaches `early_stop_batch_acc` (deterministic; None disables)
    early_stop_batch_acc: float | None = None
    early_stop_window: int = 12

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ConfusionMatrix:
    """Counts with 'positive' meaning ictal/pre-ictal (class index 0)."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


def metrics(cm: ConfusionMatrix):
    """(SENS, SPEC, ACC) as percentages; None where the denominator is zero."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    sens = 100.0 * cm.tp / (cm.tp + cm.fn) if (cm.tp + cm.fn) else None
    spec = 100.0 * cm.tn / (cm.tn + cm.fp) if (cm.tn + cm.fp) else None
    acc = 100.0 * (cm.tp + cm.tn) / cm.total
    return sens, spec, acc


def cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Softmax cross-entropy against a one-hot target.

    Accepts a single (2,) pair or batches (B, 2); batched loss is the mean.
    Returns (loss, grad_logits) with grad = softmax(logits) - target (scaled
    by 1/B for batches).  Stabilized by max subtraction.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    t = target[None] if single else target
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    logsumexp = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - logsumexp
    losses = -(t * logp).sum(axis=1)
    p = np.exp(logp)
    if single:
        return float(losses[0]), p[0] - t[0]
    b = z.shape[0]
    return float(losses.mean()), (p - t) / b


def one_hot(y: np.ndarray) -> np.ndarray:
    """Class index -> one-hot rows; index 0 is the positive class (1, 0)."""
    y = np.asarray(y, dtype=int)
    out = np.zeros((y.shape[0], 2), dtype=DTYPE)
    out[np.arange(y.shape[0]), y] = 1.0
    return out


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class AdamOptimizer:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for key, g in grads.items():
            m = self.m[key] = c.beta1 * self.m[key] + (1 - c.beta1) * g
            v = self.v[key] = c.beta2 * self.v[key] + (1 - c.beta2) * g * g
            params[key] -= c.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + c.adam_eps)


class SgdMomentumOptimizer:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        c = self.cfg
        for key, g in grads.items():
            v = self.vel[key] = c.momentum * self.vel[key] - c.learning_rate * g
            params[key] += v


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return AdamOptimizer(params, cfg)
    return SgdMomentumOptimizer(params, cfg)


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------


def train_step(model: SpikingConformer, xb, yb, optimizer, cfg: TrainConfig):
    """One minibatch update; returns (loss, batch accuracy)."""
    tape: dict = {}
    logits, _ = _forward_batch(
        model, xb, training=True, alpha=cfg.surrogate_alpha, tape=tape
    )
    loss, dlogits = cross_entropy(logits, one_hot(yb))
    if not np.isfinite(loss):
        raise FloatingPointError(f"training diverged: loss={loss}")
    grads = _backward_batch(model, dlogits, tape, alpha=cfg.surrogate_alpha)
    optimizer.step(model.params, grads)
    acc = float((logits.argmax(axis=1) == yb).mean())
    return loss, acc


def train_fold(model: SpikingConformer, X, y, cfg: TrainConfig, rng: np.random.Generator):
    """Minibatch BPTT over one training split; mutates ``model`` in place.

    Returns the per-epoch history of (mean loss, train accuracy).
    """
    n = X.shape[0]
    if len(np.unique(y)) < 2:
        raise ValueError("training fold contains a single class")
    optimizer = make_optimizer(model.params, cfg)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, batch_accs, seen, hits = [], [], 0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, acc = train_step(model, X[idx], y[idx], optimizer, cfg)
            losses.append(loss)
            batch_accs.append(acc)
            seen += len(idx)
            hits += int(round(acc * len(idx)))
            if (
                cfg.early_stop_batch_acc is not None
                and len(batch_accs) >= cfg.early_stop_window
                and np.mean(batch_accs[-cfg.early_stop_window :])
                >= cfg.early_stop_batch_acc
            ):
                break
        epoch_loss = float(np.mean(losses))
        epoch_acc = hits / seen
        history.append((epoch_loss, epoch_acc))
        log.info(
            "epoch %d: loss=%.4f train_acc=%.4f (%d/%d samples)",
            epoch, epoch_loss, epoch_acc, seen, n,
        )
        if cfg.early_stop_batch_acc is not None and len(batch_accs) * cfg.batch_size < n:
            break  # stopped mid-epoch
        if cfg.early_stop_train_acc is not None and epoch_acc >= cfg.early_stop_train_acc:
            break
    return history


def evaluate(
    model: SpikingConformer,
    X,
    y=None,
    approx_enabled: bool = False,
    batch_size: int = 64,
):
    """Argmax evaluation over segments.

    Returns (ConfusionMatrix | None, predictions, SkipStats | None); the
    confusion matrix is None when labels are not supplied.
    """
    if X.shape[0] == 0:
        raise ValueError("empty test set")
    preds = np.empty(X.shape[0], dtype=int)
    skip = SkipStats() if approx_enabled else None
    for start in range(0, X.shape[0], batch_size):
        xb = X[start : start + batch_size]
        logits, aux = _forward_batch(model, xb, approx_enabled=approx_enabled)
        preds[start : start + xb.shape[0]] = logits.argmax(axis=1)
        if approx_enabled:
            skip = skip.merge(aux["skip_stats"])
    cm = None
    if y is not None:
        y = np.asarray(y, dtype=int)
        cm = ConfusionMatrix(
            tp=int(((preds == 0) & (y == 0)).sum()),
            fp=int(((preds == 0) & (y == 1)).sum()),
            tn=int(((preds == 1) & (y == 1)).sum()),
            fn=int(((preds == 1) & (y == 0)).sum()),
        )
    return cm, preds, skip


@dataclass
class FoldResult:
    fold: int
    model: SpikingConformer
    cm: ConfusionMatrix
    sens: float | None
    spec: float | None
    acc: float
    history: list = field(default_factory=list)
    skip: SkipStats | None = None
    seconds: float = 0.0


def train(
    model: SpikingConformer,
    X,
    y,
    folds,
    cfg: TrainConfig,
    eval_approx: bool = False,
    checkpoint_dir=None,
) -> list[FoldResult]:
    """Cross-validated training from a shared initial model.

    Every fold starts from a copy of ``model``'s initial weights and trains
    on its own split; evaluation runs on the held-out split (optionally with
    approximate updates).  Fully deterministic for a fixed cfg.seed.
    """
    results = []
    for fold_id, (train_ids, test_ids) in enumerate(folds):
        t0 = time.time()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, fold_id]))
        fold_model = model.copy()
        history = train_fold(fold_model, X[train_ids], y[train_ids], cfg, rng)
        cm, _, skip = evaluate(fold_model, X[test_ids], y[test_ids], approx_enabled=eval_approx)
        sens, spec, acc = metrics(cm)
        seconds = time.time() - t0
        if checkpoint_dir is not None:
            save_checkpoint(fold_model, f"{checkpoint_dir}/fold{fold_id}.ckpt")
        results.append(
            FoldResult(fold_id, fold_model, cm, sens, spec, acc, history, skip, seconds)
        )
        log.info(
            "fold %d: sens=%s spec=%s acc=%.2f (%.1fs)", fold_id, sens, spec, acc, seconds
        )
    return results
