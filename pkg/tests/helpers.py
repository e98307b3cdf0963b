"""Shared test utilities: finite differences and gradient comparison."""

import numpy as np

from spiking_conformer.model import _backward_batch, _forward_batch
from spiking_conformer.training import cross_entropy


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numerical_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f wrt array x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def soft_loss(model, x, target, alpha=4.0):
    """Loss of the smooth (sigmoid-threshold) network; used as FD target."""
    logits, _ = _forward_batch(
        model, x, training=True, soft=True, alpha=alpha, update_running=False
    )
    loss, _ = cross_entropy(logits, target)
    return loss


def soft_loss_and_grads(model, x, target, alpha=4.0):
    tape = {}
    logits, _ = _forward_batch(
        model, x, training=True, soft=True, alpha=alpha,
        update_running=False, tape=tape,
    )
    loss, dlogits = cross_entropy(logits, target)
    grads = _backward_batch(model, dlogits, tape, soft=True, alpha=alpha)
    return loss, grads


def check_soft_gradients(model, x, target, alpha=4.0, h=1e-6, tol=1e-4):
    """Compare analytic parameter gradients against central differences.

    Per-parameter errors are normalized by max(1, gradient scale) so that
    provably-zero gradients (e.g. a conv bias cancelled by train-mode batch
    norm) are judged by FD noise alone.  Returns the relative error of the
    full concatenated gradient vector.
    """
    _, grads = soft_loss_and_grads(model, x, target, alpha)
    analytic, numeric = [], []
    for name, param in model.params.items():
        def f(_p, _name=name):
            return soft_loss(model, x, target, alpha)

        num = numerical_grad(f, param, h=h)
        ana = grads[name]
        analytic.append(ana.ravel())
        numeric.append(num.ravel())
        scale = max(1.0, np.linalg.norm(ana), np.linalg.norm(num))
        err = np.linalg.norm(ana - num) / scale
        assert err <= tol, f"gradient mismatch in {name}: scaled err {err:.3e}"
    total = rel_err(np.concatenate(analytic), np.concatenate(numeric))
    assert total <= tol, f"global gradient rel err {total:.3e}"
    return total
