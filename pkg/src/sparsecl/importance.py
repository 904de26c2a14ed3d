"""Per-parameter importance scores computed on a task's training set.

Three estimators share one result type:

* ``fisher``: diagonal of the empirical Fisher, the mean squared per-sample
  log-likelihood gradient.
* ``second_order``: |mean gradient| / sqrt(mean squared gradient + xi), a
  standardized Newton-step magnitude. Always in [0, 1).
* ``migu_magnitude``: mean L1 norm of each linear output channel W_i . x,
  broadcast to that channel's weight row and bias entry.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .netcore.grad import _single_pass, loss_and_grad, subset
from .netcore.models import Bound

ESTIMATORS = ("fisher", "second_order", "migu_magnitude")
DEFAULT_XI = 1e-8
IMPORTANCE_MAGIC = b"SCLIMP01"


@dataclass(frozen=True)
class ImportanceMap:
    scores: np.ndarray
    estimator_tag: str
    sample_count: int
    xi: float = 0.0

    def __post_init__(self):
        if self.estimator_tag not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator_tag!r}")
        s = self.scores
        if not np.all(np.isfinite(s)):
            raise ValueError("importance scores must be finite")
        if np.any(s < 0):
            raise ValueError("importance scores must be nonnegative")
        s.setflags(write=False)

    def __len__(self):
        return self.scores.size


class GradientMoments:
    """Running sums of per-sample gradients and their squares.

    Shards can be accumulated independently and merged; ``merge`` must be
    called in a fixed (shard-index) order for bit-reproducible results.
    """

    def __init__(self, size):
        self.total = np.zeros(size)
        self.total_sq = np.zeros(size)
        self.count = 0

    def add(self, g):
        self.total += g
        self.total_sq += g * g
        self.count += 1

    def merge(self, other):
        self.total += other.total
        self.total_sq += other.total_sq
        self.count += other.count
        return self

    def mean(self):
        return self.total / self.count

    def mean_sq(self):
        return self.total_sq / self.count


def _n_samples(dataset):
    n = len(dataset[1])
    if n == 0:
        raise ValueError("importance estimation needs a nonempty dataset")
    return n


def accumulate_moments(forward, store, dataset, shards=1):
    """Stream per-sample gradients into (sum g, sum g^2), optionally sharded."""
    n = _n_samples(dataset)
    bounds = np.linspace(0, n, shards + 1).astype(int)
    merged = GradientMoments(store.size)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        part = GradientMoments(store.size)
        for i in range(lo, hi):
            _, g = _single_pass(forward, store, subset(dataset, [i]))
            part.add(g)
        merged.merge(part)
    return merged


def estimate_fisher(forward, store, dataset, shards=1):
    """Diagonal empirical Fisher at the current parameters."""
    m = accumulate_moments(forward, store, dataset, shards=shards)
    return ImportanceMap(m.mean_sq(), "fisher", m.count)


_BELOW_ONE = np.nextafter(1.0, 0.0)


def second_order_scores(mean_g, mean_sq, xi):
    """|mean g| / sqrt(mean g^2 + xi), kept strictly below 1.

    Once mean g^2 exceeds about 1e8 * xi, adding xi no longer changes it in
    float64 and the ratio can round to exactly 1, so it is clamped to the
    largest double below 1.
    """
    return np.minimum(np.abs(mean_g) / np.sqrt(mean_sq + xi), _BELOW_ONE)


def estimate_second_order(forward, store, dataset, xi=DEFAULT_XI, shards=1):
    if not xi > 0:
        raise ValueError(f"xi must be > 0, got {xi}")
    m = accumulate_moments(forward, store, dataset, shards=shards)
    return ImportanceMap(second_order_scores(m.mean(), m.mean_sq(), xi), "second_order",
                         m.count, float(xi))


def estimate_migu_magnitude(forward, store, dataset):
    """Mean L1 magnitude of each linear layer's output channels (bias excluded).

    For sequence models the L1 norm of channel i runs over all positions of
    a sample. Scores broadcast to the channel's weight row and bias; every
    other parameter scores 0.
    """
    x, _ = dataset
    n = _n_samples(dataset)
    layers = forward.linear_layers()
    if not layers:
        raise ValueError("model has no linear layers")
    captured = {}
    forward(Bound(store), x, capture=captured)
    scores = np.zeros(store.size)
    for layer in layers:
        w = store[f"{layer}.weight"]
        inp = captured[layer]
        h = inp @ w.T
        per_sample = np.abs(h).reshape(n, -1, w.shape[0]).sum(axis=1)
        channel = per_sample.mean(axis=0)
        sl = store.entry_slice(f"{layer}.weight")
        scores[sl] = np.repeat(channel, w.shape[1])
        if f"{layer}.bias" in store:
            scores[store.entry_slice(f"{layer}.bias")] = channel
    return ImportanceMap(scores, "migu_magnitude", n)


def estimate(forward, store, dataset, estimator, xi=DEFAULT_XI):
    if estimator == "fisher":
        return estimate_fisher(forward, store, dataset)
    if estimator == "second_order":
        return estimate_second_order(forward, store, dataset, xi)
    if estimator == "migu_magnitude":
        return estimate_migu_magnitude(forward, store, dataset)
    raise ValueError(f"unknown estimator {estimator!r}; valid: {', '.join(ESTIMATORS)}")


def importance_oracle(forward, store, dataset, estimator_tag, xi=DEFAULT_XI, indices=None):
    """Brute-force recomputation of an estimator, for cross-checking.

    Stacks every per-sample gradient into a dense matrix and reduces it with
    plain numpy, sharing no accumulation code with the streaming estimators.
    ``indices`` restricts the comparison to a parameter subset.
    """
    n = _n_samples(dataset)
    idx = np.arange(store.size) if indices is None else np.asarray(indices, dtype=np.int64)
    if estimator_tag == "migu_magnitude":
        scores = np.zeros(store.size)
        for layer in forward.linear_layers():
            w = store[f"{layer}.weight"]
            rows = np.zeros(w.shape[0])
            for i in range(n):
                cap = {}
                forward(store, subset(dataset, [i])[0], capture=cap)
                inp = cap[layer].reshape(-1, w.shape[1])
                for r in range(w.shape[0]):
                    rows[r] += sum(abs(float(np.dot(w[r], v))) for v in inp)
            rows /= n
            scores[store.entry_slice(f"{layer}.weight")] = np.repeat(rows, w.shape[1])
            if f"{layer}.bias" in store:
                scores[store.entry_slice(f"{layer}.bias")] = rows
        return ImportanceMap(scores[idx].copy(), estimator_tag, n)
    _, records = loss_and_grad(forward, store, dataset, "per-sample")
    G = np.stack([r.values[idx] for r in records])
    if estimator_tag == "fisher":
        return ImportanceMap(np.mean(G ** 2, axis=0), "fisher", n)
    if estimator_tag == "second_order":
        num = np.abs(np.mean(G, axis=0))
        return ImportanceMap(num / np.sqrt(np.mean(G ** 2, axis=0) + xi), "second_order", n, xi)
    raise ValueError(f"unknown estimator {estimator_tag!r}")


def importance_bytes(imp):
    """Layout (little-endian): magic b"SCLIMP01"; u16 tag length; tag; u64 |theta|;
    u64 sample_count; f64 xi; |theta| x f64 scores."""
    tag = imp.estimator_tag.encode()
    return b"".join([IMPORTANCE_MAGIC, struct.pack("<H", len(tag)), tag,
                     struct.pack("<QQd", imp.scores.size, imp.sample_count, imp.xi),
                     np.ascontiguousarray(imp.scores, dtype="<f8").tobytes()])


def importance_from_bytes(buf):
    if buf[:8] != IMPORTANCE_MAGIC:
        raise ValueError("not an importance file (bad magic)")
    pos = 8
    try:
        (tlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        tag = bytes(buf[pos:pos + tlen]).decode()
        pos += tlen
        size, count, xi = struct.unpack_from("<QQd", buf, pos)
        pos += 24
    except struct.error as exc:
        raise ValueError("truncated importance header") from exc
    if len(buf) - pos != 8 * size:
        raise ValueError(f"importance payload has {len(buf) - pos} bytes, expected {8 * size}")
    scores = np.frombuffer(buf, dtype="<f8", offset=pos).astype(np.float64)
    return ImportanceMap(scores, tag, int(count), float(xi))


def save_importance(path, imp):
    with open(path, "wb") as fh:
        fh.write(importance_bytes(imp))


def load_importance(path):
    with open(path, "rb") as fh:
        return importance_from_bytes(fh.read())
