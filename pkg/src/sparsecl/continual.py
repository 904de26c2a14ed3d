"""Sequential-task training: masked optimizers, data-access control and the task loop.

The loop for each task ``t`` is: checkpoint the incoming parameters, let the
strategy prepare (PIECE estimates importance on D_t at theta_{t-1} and fixes
the top-k mask), train for the configured epochs with gradients masked
before every step, then evaluate on every task seen so far.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .importance import DEFAULT_XI, estimate
from .masking import SparsityBudget, save_mask, select_topk
from .metrics import ScoreMatrix, text_score
from .netcore.grad import loss_and_grad
from .netcore.store import checkpoint_bytes
from .netcore.tensor import NonFiniteError
from .tasks import IGNORE

log = logging.getLogger(__name__)


class AccessViolation(PermissionError):
    """A strategy asked for data or state it did not declare."""


# --- optimizers -------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 64
    seed: int = 42

    def validate(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        return self


def _values(grad):
    return getattr(grad, "values", grad)


def _mask_indices(mask):
    return None if mask is None else mask.indices


def masked_sgd_step(store, grad, mask, lr):
    """theta_i -= lr * grad_i on masked indices only; everything else untouched."""
    g = _values(grad)
    if g.size != store.size:
        raise ValueError("gradient and store are misaligned")
    idx = _mask_indices(mask)
    if idx is None:
        with np.errstate(over="ignore", invalid="ignore"):
            upd = store.flat - lr * g
        if not np.all(np.isfinite(upd)):
            raise NonFiniteError("non-finite SGD update")
        store.flat[:] = upd
        return store
    with np.errstate(over="ignore", invalid="ignore"):
        upd = store.flat[idx] - lr * g[idx]
    if not np.all(np.isfinite(upd)):
        raise NonFiniteError("non-finite SGD update")
    store.flat[idx] = upd
    return store


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64), lr, beta1, beta2, eps)


def masked_adam_step(store, grad, mask, state):
    """Adam restricted to the mask.

    Moments and the per-index step counter advance only where the mask is
    set, so unmasked parameters and their optimizer state never change and
    bias correction uses how often each index has actually been updated.
    """
    g = _values(grad)
    if g.size != store.size or state.m.size != store.size:
        raise ValueError("gradient, optimizer state and store are misaligned")
    idx = _mask_indices(mask)
    if idx is None:
        idx = slice(None)
    b1, b2 = state.beta1, state.beta2
    gi = g[idx]
    m = b1 * state.m[idx] + (1 - b1) * gi
    v = b2 * state.v[idx] + (1 - b2) * gi * gi
    steps = state.steps[idx] + 1
    m_hat = m / (1 - b1 ** steps)
    v_hat = v / (1 - b2 ** steps)
    upd = store.flat[idx] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v)) and np.all(np.isfinite(upd))):
        raise NonFiniteError("non-finite Adam moments or update")
    state.m[idx], state.v[idx], state.steps[idx] = m, v, steps
    store.flat[idx] = upd
    return store


class Optimizer:
    def __init__(self, config, n_params):
        self.config = config
        self.state = (AdamState.zeros(n_params, config.lr, config.beta1, config.beta2, config.eps)
                      if config.kind == "adam" else None)

    def step(self, store, grad, mask=None):
        if self.state is None:
            return masked_sgd_step(store, grad, mask, self.config.lr)
        return masked_adam_step(store, grad, mask, self.state)


# --- data access ------------------------------------------------------------

class AccessLog:
    """Every read of task data, tagged with the task being trained when it happened."""

    def __init__(self):
        self.records = []
        self.current_task = 0

    def record(self, source, task, split, n, purpose):
        self.records.append({"during": self.current_task, "source": source, "task": task,
                             "split": split, "n": int(n), "purpose": purpose})

    def history_reads(self, source="dataset"):
        """Training reads of an earlier task's dataset while a later task trains."""
        return [r for r in self.records if r["source"] == source and r["purpose"] == "train"
                and r["task"] < r["during"]]


class DatasetHandle:
    """Read-only, revocable view of one task split; every read is logged."""

    def __init__(self, task_index, split, data, log_, purpose="train"):
        self.task_index = task_index
        self.split = split
        self._data = data
        self._log = log_
        self._purpose = purpose
        self._revoked = False

    def __len__(self):
        return len(self._data[1])

    def revoke(self):
        self._revoked = True

    def batch(self, idx):
        if self._revoked:
            raise AccessViolation(f"dataset of task {self.task_index} is no longer accessible")
        idx = np.asarray(idx)
        self._log.record("dataset", self.task_index, self.split, idx.size, self._purpose)
        return self._data[0][idx], self._data[1][idx]

    def all(self):
        return self.batch(np.arange(len(self)))


def concat_batches(batches):
    """Stack batches; sequence batches are right-padded to a common length."""
    xs, ys = zip(*batches)
    if xs[0].ndim == 2 and np.issubdtype(xs[0].dtype, np.integer):
        L = max(x.shape[1] for x in xs)
        xs = [np.pad(x, ((0, 0), (0, L - x.shape[1]))) for x in xs]
        ys = [np.pad(y, ((0, 0), (0, L - y.shape[1])), constant_values=IGNORE) for y in ys]
    return np.concatenate(xs), np.concatenate(ys)


class ReplayBuffer:
    """Per-task uniform reservoirs holding ``fraction`` of each finished task."""

    def __init__(self, fraction=0.01, log_=None, seed=0):
        self.fraction = fraction
        self._log = log_ or AccessLog()
        self._rng = np.random.default_rng([seed, 17])
        self._store = {}

    def tasks(self):
        return sorted(self._store)

    def capacity(self, n):
        return max(1, math.ceil(self.fraction * n - 1e-9))

    def add_task(self, task_index, handle):
        """Reservoir-sample (Algorithm R) ``capacity(n)`` items from a finished task's stream."""
        n = len(handle)
        cap = self.capacity(n)
        keep = list(range(min(cap, n)))
        for i in range(cap, n):
            j = int(self._rng.integers(0, i + 1))
            if j < cap:
                keep[j] = i
        self._store[task_index] = handle.batch(np.sort(keep))

    def size(self, task_index):
        return len(self._store[task_index][1])

    def read(self, task_index, idx=None):
        x, y = self._store[task_index]
        idx = np.arange(len(y)) if idx is None else np.asarray(idx)
        self._log.record("buffer", task_index, "memory", idx.size, "train")
        return x[idx], y[idx]

    def sample(self, count, rng):
        """``count`` samples, task drawn uniformly first, then an item within it."""
        tasks = self.tasks()
        if not tasks or count <= 0:
            return None
        picks = rng.integers(0, len(tasks), size=count)
        parts = []
        for k in sorted(set(picks.tolist())):
            t = tasks[k]
            m = int((picks == k).sum())
            parts.append(self.read(t, rng.integers(0, self.size(t), size=m)))
        return concat_batches(parts)


def replay_count(batch_size, fraction=0.01):
    """Replay samples mixed into one online batch: ceil(fraction * batch), at least 1."""
    return max(1, math.ceil(fraction * batch_size - 1e-9))


def replay_mix(batch, buffer, mode, rng, batch_size=64, before_task=None):
    """Training stream produced by replay.

    ``online``: the current batch plus ``replay_count`` buffer samples.
    ``offline``: the replay phase after a task, a shuffled pass over every
    buffered sample of tasks ``< before_task`` split into batches (``batch``
    is ignored). With no history both modes add nothing.
    """
    if mode == "online":
        if not buffer.tasks():
            log.info("replay requested before any task finished; nothing to mix")
            return [batch]
        extra = buffer.sample(replay_count(len(batch[1]), buffer.fraction), rng)
        return [concat_batches([batch, extra])]
    if mode != "offline":
        raise ValueError(f"replay mode must be 'online' or 'offline', got {mode!r}")
    tasks = [t for t in buffer.tasks() if before_task is None or t < before_task]
    if not tasks:
        log.info("replay requested before any task finished; empty stream")
        return []
    pool = concat_batches([buffer.read(t) for t in tasks])
    order = rng.permutation(len(pool[1]))
    return [(pool[0][order[i:i + batch_size]], pool[1][order[i:i + batch_size]])
            for i in range(0, len(order), batch_size)]


# --- evaluation -------------------------------------------------------------

def greedy_decode(forward, store, prompts, length):
    """Append ``length`` argmax tokens to each prompt (prompts of equal length batch together)."""
    out = [None] * len(prompts)
    groups = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    for _, members in sorted(groups.items()):
        toks = np.array([prompts[i] for i in members], dtype=np.int64)
        gen = []
        for _ in range(length):
            logits = forward(store, toks).data
            nxt = logits[:, -1, :].argmax(axis=-1)
            gen.append(nxt)
            toks = np.concatenate([toks, nxt[:, None]], axis=1)
        gen = np.stack(gen, axis=1) if gen else np.zeros((len(members), 0), dtype=np.int64)
        for row, i in enumerate(members):
            out[i] = gen[row].tolist()
    return out


def evaluate(forward, store, task, handle=None):
    """Accuracy in [0, 1] for classification, mean(ROUGE-L, BLEU) x 100 for generation."""
    if task.kind == "classification":
        x, y = handle.all() if handle is not None else task.eval
        if len(y) == 0:
            raise ValueError("empty eval set")
        pred = forward(store, x).data.argmax(axis=-1)
        return float(np.mean(pred == y))
    pairs = task.eval_pairs
    if not pairs:
        raise ValueError("empty eval set")
    if handle is not None:
        handle.all()
    longest = max(len(c) for _, c in pairs)
    outs = greedy_decode(forward, store, [p for p, _ in pairs], longest)
    return float(np.mean([text_score(o[:len(c)], c) for o, (_, c) in zip(outs, pairs)]))


# --- strategies -------------------------------------------------------------

class Strategy:
    """Base continual-learning strategy: plain sequential fine-tuning.

    Subclasses declare the resources they need; the runner hands over the
    replay buffer, a snapshot of the previous model or the gradient memory
    only when the matching flag is set.
    """

    name = "seqft"
    needs_replay_buffer = False
    needs_previous_model = False
    needs_gradient_memory = False
    records_masks = False
    defaults = {}

    def __init__(self, **hparams):
        unknown = set(hparams) - set(self.defaults)
        if unknown:
            raise ValueError(f"{self.name}: unknown hyperparameter(s) {sorted(unknown)}; "
                             f"valid: {sorted(self.defaults)}")
        self.hp = {**self.defaults, **hparams}
        self.mask = None

    def begin_task(self, ctx):
        pass

    def trainable(self, ctx):
        return self.mask

    def gradient(self, ctx, batch):
        loss, (rec,) = loss_and_grad(ctx.forward, ctx.state.store, batch, rng=ctx.dropout_rng)
        return loss, rec.values

    def extra_batches(self, ctx, batch):
        return [batch]

    def end_task(self, ctx):
        pass


class Piece(Strategy):
    """Importance-ranked top-k sparse fine-tuning (Fisher or second-order importance)."""

    name = "piece"
    records_masks = True
    estimator = "fisher"
    defaults = {"ratio": 0.001, "xi": DEFAULT_XI, "exclude": []}

    def begin_task(self, ctx):
        store = ctx.state.store
        data = ctx.train.all()
        imp = estimate(ctx.forward, store, data, self.estimator, self.hp["xi"])
        budget = SparsityBudget(self.hp["ratio"], store.size)
        exclude = store.indices_of(self.hp["exclude"]) if self.hp["exclude"] else None
        self.mask = select_topk(imp, budget, task_id=ctx.task_id, exclude=exclude)
        ctx.state.importances.append(imp)
        ctx.record_mask(self.mask)


class PieceF(Piece):
    name = "piece-f"
    estimator = "fisher"


class PieceS(Piece):
    name = "piece-s"
    estimator = "second_order"


REGISTRY = {}


def register(cls):
    REGISTRY[cls.name] = cls
    return cls


register(Strategy)
register(PieceF)
register(PieceS)


def get_strategy(name, **hparams):
    from . import baselines  # noqa: F401  (registers the baseline strategies)

    if name not in REGISTRY:
        raise ValueError(f"unknown strategy {name!r}; valid: {', '.join(sorted(REGISTRY))}")
    return REGISTRY[name](**hparams)


# --- runner -----------------------------------------------------------------

@dataclass
class RunState:
    store: object
    forward: object
    scores: ScoreMatrix = field(default_factory=ScoreMatrix)
    masks: list = field(default_factory=list)
    importances: list = field(default_factory=list)
    events: list = field(default_factory=list)
    pre_task_checkpoints: list = field(default_factory=list)
    optimizer_states: list = field(default_factory=list)  # AdamState per task (None for SGD)
    access: AccessLog = field(default_factory=AccessLog)


class TaskContext:
    """What a strategy sees while task ``t`` trains."""

    def __init__(self, runner, t, task, handle):
        self._runner = runner
        self.t = t
        self.task_id = task.task_id
        self.task = task
        self.train = handle
        self.state = runner.state
        self.forward = runner.state.forward
        self.optimizer_config = runner.optimizer
        self.rng = runner.rng
        self.dropout_rng = runner.rng

    @property
    def buffer(self):
        s = self._runner.strategy
        if not (s.needs_replay_buffer or s.needs_gradient_memory):
            raise AccessViolation(f"{s.name} did not declare a replay/memory capability")
        return self._runner.buffer

    @property
    def previous_store(self):
        s = self._runner.strategy
        if not s.needs_previous_model:
            raise AccessViolation(f"{s.name} did not declare needs_previous_model")
        return self._runner.previous_store

    def record_mask(self, mask):
        self.state.masks.append(mask)
        if self._runner.out_dir:
            save_mask(os.path.join(self._runner.out_dir, "masks", f"task{self.t}.mask"), mask)

    def train_step(self, batch, optimizer):
        loss, grad = self._runner.strategy.gradient(self, batch)
        optimizer.step(self.state.store, grad, self._runner.strategy.trainable(self))
        return loss


class Runner:
    def __init__(self, store, forward, tasks, strategy, optimizer, out_dir=None,
                 replay_fraction=0.01, provenance=None):
        if not tasks:
            raise ValueError("run_sequence needs at least one task")
        self.tasks = list(tasks)
        self.strategy = strategy
        self.optimizer = optimizer.validate()
        self.out_dir = out_dir
        self.provenance = provenance or {}
        self.state = RunState(store, forward)
        self.rng = np.random.default_rng([optimizer.seed, 101])
        self.buffer = ReplayBuffer(replay_fraction, self.state.access, seed=optimizer.seed)
        self.previous_store = None
        self._events_fh = None
        if out_dir:
            for sub in ("checkpoints", "masks"):
                os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
            self._events_fh = open(os.path.join(out_dir, "events.jsonl"), "w", encoding="utf-8")

    def _event(self, **rec):
        rec = {**rec, **({"provenance": self.provenance} if self.provenance else {})}
        self.state.events.append(rec)
        if self._events_fh:
            self._events_fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def _checkpoint(self, name):
        config = getattr(self.state.forward, "config", None)
        blob = checkpoint_bytes(self.state.store, config=config.to_dict() if config else None,
                                extra={"provenance": self.provenance})
        if self.out_dir:
            with open(os.path.join(self.out_dir, "checkpoints", name), "wb") as fh:
                fh.write(blob)
        return blob

    def run(self):
        try:
            for t, task in enumerate(self.tasks, start=1):
                self._run_task(t, task)
        finally:
            if self._events_fh:
                self._events_fh.close()
        return self.state

    def _run_task(self, t, task):
        st, cfg, access = self.state, self.optimizer, self.state.access
        access.current_task = t
        handle = DatasetHandle(t, "train", task.train, access)
        if self.strategy.needs_previous_model:
            self.previous_store = st.store.copy()
        st.pre_task_checkpoints.append(self._checkpoint(f"task{t}_pre.ckpt"))
        ctx = TaskContext(self, t, task, handle)
        self.strategy.begin_task(ctx)
        opt = Optimizer(cfg, st.store.size)
        st.optimizer_states.append(opt.state)
        n = len(handle)
        for epoch in range(cfg.epochs):
            order = self.rng.permutation(n)
            losses = []
            for lo in range(0, n, cfg.batch_size):
                batch = handle.batch(order[lo:lo + cfg.batch_size])
                for b in self.strategy.extra_batches(ctx, batch):
                    losses.append(ctx.train_step(b, opt))
            self._event(kind="train", task=t, task_id=task.task_id, epoch=epoch + 1,
                        loss=float(np.mean(losses)) if losses else None)
        self.strategy.end_task(ctx)
        if self.strategy.needs_replay_buffer or self.strategy.needs_gradient_memory:
            self.buffer.add_task(t, handle)
        handle.revoke()
        self._checkpoint(f"task{t}_post.ckpt")
        row = []
        for i, other in enumerate(self.tasks[:t], start=1):
            score = evaluate(st.forward, st.store, other,
                             DatasetHandle(i, "eval", other.eval, access, purpose="eval"))
            row.append(score)
            self._event(kind="eval", task=t, eval_task=i, eval_task_id=other.task_id, score=score)
        st.scores.add_row(row)


def run_sequence(model, tasks, strategy, optimizer, out_dir=None, replay_fraction=0.01,
                 provenance=None):
    """Train ``strategy`` over ``tasks`` in order; ``model`` is ``(store, forward)``.

    The store is trained in place. Returns the RunState with the filled
    ScoreMatrix, recorded masks, pre-task checkpoints and the access log.
    """
    store, forward = model
    if isinstance(strategy, str):
        strategy = get_strategy(strategy)
    return Runner(store, forward, tasks, strategy, optimizer, out_dir, replay_fraction,
                  provenance).run()


def optimizer_from_dict(d):
    return OptimizerConfig(**d).validate()


def optimizer_to_dict(cfg):
    return asdict(cfg)
