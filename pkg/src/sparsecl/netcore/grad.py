"""Loss/gradient evaluation over a ParameterStore and a finite-difference checker."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .models import Bound
from .store import GradientRecord

GRANULARITIES = ("per-sample", "per-batch")


def batch_size(batch):
    return len(batch[1])


def subset(batch, idx):
    x, y = batch
    return np.asarray(x)[idx], np.asarray(y)[idx]


def _check_finite(store, flat, what):
    if np.all(np.isfinite(flat)):
        return
    bad = int(np.flatnonzero(~np.isfinite(flat))[0])
    name, off = store.locate(bad)
    raise T.NonFiniteError(f"non-finite {what} in parameter entry {name!r} (offset {off})")


def _single_pass(forward, store, batch, rng=None):
    x, y = batch
    bound = Bound(store, requires_grad=True)
    with np.errstate(invalid="ignore", over="ignore"):
        loss = T.cross_entropy(forward(bound, x, rng=rng), y)
    if not np.isfinite(loss.data):
        _check_finite(store, store.flat, "parameter")
        raise T.NonFiniteError("non-finite loss with finite parameters (check the inputs)")
    loss.backward()
    flat = np.zeros(store.size)
    for name, t in bound.tensors.items():
        if t.grad is not None:
            flat[store.entry_slice(name)] = t.grad.reshape(-1)
    _check_finite(store, flat, "gradient")
    return float(loss.data), flat


def loss_and_grad(forward, store, batch, granularity="per-batch", rng=None):
    """Mean cross-entropy over ``batch`` and its gradient record(s).

    Gradients are of the loss (negative log-likelihood), so they point uphill
    and the descent step is ``theta - lr * grad``. With ``per-sample`` one record
    per sample is returned, computed by separate single-sample backward
    passes; ``per-batch`` returns one record, the gradient of the batch-mean
    loss.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    n = batch_size(batch)
    if n == 0:
        raise ValueError("empty batch")
    if granularity == "per-batch":
        loss, flat = _single_pass(forward, store, batch, rng=rng)
        return loss, [GradientRecord(flat, "per-batch")]
    losses, records = [], []
    for i in range(n):
        loss, flat = _single_pass(forward, store, subset(batch, [i]), rng=rng)
        losses.append(loss)
        records.append(GradientRecord(flat, "per-sample"))
    return float(np.mean(losses)), records


def batch_loss(forward, store, batch):
    """Mean cross-entropy without building a graph."""
    x, y = batch
    return float(T.cross_entropy(forward(store, x), y).data)


def finite_difference_check(forward, store, batch, eps=1e-6, max_params=2000, seed=0,
                            loss_fn=None, grad=None, floor=1e-8):
    """Worst relative deviation between autodiff and central differences.

    When the store has more than ``max_params`` entries a uniform random
    subset of that size is probed. The per-coordinate deviation is
    ``|a - f| / max(|a|, |f|, floor)``. ``loss_fn``/``grad`` override the
    default batch cross-entropy (used for penalties and probe models).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if loss_fn is None:
        def loss_fn(s):
            return batch_loss(forward, s, batch)
    if grad is None:
        _, (rec,) = loss_and_grad(forward, store, batch)
        grad = rec.values
    n = store.size
    if n > max_params:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=max_params, replace=False))
    else:
        idx = np.arange(n)
    worst = 0.0
    flat = store.flat
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn(store)
        flat[i] = orig - eps
        down = loss_fn(store)
        flat[i] = orig
        fd = (up - down) / (2 * eps)
        a = grad[i]
        dev = abs(a - fd) / max(abs(a), abs(fd), floor)
        worst = max(worst, dev)
    return worst
