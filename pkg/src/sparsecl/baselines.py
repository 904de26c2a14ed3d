"""Baseline continual-learning strategies.

Regularization (EWC, GEM, LwF), replay (offline and online), and
parameter-efficient tuning (SeqLoRA, O-LoRA, LayerNorm-only, MIGU). All plug
into :class:`sparsecl.continual.Strategy`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .continual import Optimizer, Strategy, register, replay_mix
from .importance import estimate_fisher, estimate_migu_magnitude
from .masking import GradientMask, SparsityBudget, select_topk
from .netcore import tensor as T
from .netcore.grad import loss_and_grad
from .netcore.lora import LoRAAdapterConfig, adapter_names, attach_lora
from .netcore.models import Bound
from .netcore.store import GradientRecord


# --- EWC ----------------------------------------------------------------------

@dataclass
class EWCState:
    anchor: np.ndarray
    fisher: np.ndarray
    lam: float = 0.5

    def __post_init__(self):
        if np.any(self.fisher < 0):
            raise ValueError("EWC Fisher must be nonnegative")


def ewc_penalty(theta, state):
    """lam * sum F_i (theta_i - anchor_i)^2 and its gradient 2 lam F (theta - anchor)."""
    if not isinstance(theta, np.ndarray):
        theta = theta.flat
    if theta.shape != state.anchor.shape or theta.shape != state.fisher.shape:
        raise ValueError("EWC state does not match the parameter vector")
    diff = theta - state.anchor
    penalty = float(state.lam * np.sum(state.fisher * diff * diff))
    return penalty, GradientRecord(2.0 * state.lam * state.fisher * diff)


@register
class EWC(Strategy):
    name = "ewc"
    needs_previous_model = True
    defaults = {"lam": 0.5}

    def __init__(self, **hp):
        super().__init__(**hp)
        self.ewc = None

    def gradient(self, ctx, batch):
        loss, g = super().gradient(ctx, batch)
        if self.ewc is None:
            return loss, g
        pen, pg = ewc_penalty(ctx.state.store.flat, self.ewc)
        return loss + pen, g + pg.values

    def end_task(self, ctx):
        fisher = estimate_fisher(ctx.forward, ctx.state.store, ctx.train.all())
        self.ewc = EWCState(ctx.state.store.flat.copy(), fisher.scores.copy(), self.hp["lam"])


# --- GEM ----------------------------------------------------------------------

def _solve_nonneg_qp(Q, p, tol=1e-12, max_iter=200):
    """min 0.5 v'Qv + p'v  s.t. v >= 0, for small symmetric positive definite Q.

    Active-set iteration in the style of Lawson-Hanson: grow the free set by
    the most negative multiplier, solve the equality-constrained subproblem,
    and step back to the boundary whenever a free variable would go negative.
    """
    K = p.size
    v = np.zeros(K)
    free = np.zeros(K, dtype=bool)
    for _ in range(max_iter):
        w = Q @ v + p
        cand = np.where(~free, w, np.inf)
        j = int(np.argmin(cand))
        if cand[j] >= -tol:
            break
        free[j] = True
        while True:
            z = np.zeros(K)
            F = np.flatnonzero(free)
            z[F] = np.linalg.solve(Q[np.ix_(F, F)], -p[F])
            if np.all(z[F] > 0):
                v = z
                break
            neg = F[z[F] <= 0]
            alpha = np.min(v[neg] / (v[neg] - z[neg]))
            v = v + alpha * (z - v)
            free &= v > tol
            v[~free] = 0.0
    return v


def gem_project(g, memories, ridge=1e-10):
    """Closest vector to ``g`` (in L2) with nonnegative inner product against every memory gradient.

    Returns ``g`` itself when no constraint is violated. Otherwise solves the
    dual over the K memory gradients, min_v>=0 0.5 v'GG'v + (Gg)'v, and returns
    g + G'v. A rank-deficient Gram matrix gets ``ridge`` added to its diagonal,
    and the result is then re-projected onto the constraints the dual left active.
    """
    gv = getattr(g, "values", g)
    if not len(memories):
        return g
    G = np.stack([getattr(m, "values", m) for m in memories])
    if G.shape[1] != gv.size:
        raise ValueError("memory gradients are misaligned with g")
    dots = G @ gv
    if np.all(dots >= 0):
        return g
    Q = G @ G.T
    degenerate = np.linalg.matrix_rank(Q) < Q.shape[0]
    if degenerate:
        Q = Q + ridge * np.eye(Q.shape[0])
    v = _solve_nonneg_qp(Q, dots)
    out = gv + G.T @ v
    if degenerate:
        # the ridge biases the answer slightly; re-project exactly onto the active constraints
        S = G[v > 0]
        polished = gv - S.T @ np.linalg.lstsq(S @ S.T, S @ gv, rcond=None)[0]
        if np.min(G @ polished) >= min(np.min(G @ out), -1e-12):
            out = polished
    return GradientRecord(out, getattr(g, "granularity", "per-batch")) if hasattr(g, "values") else out


@register
class GEM(Strategy):
    """Gradient projection against per-task memory gradients from the shared 1% buffer."""

    name = "gem"
    needs_gradient_memory = True
    defaults = {}

    def gradient(self, ctx, batch):
        loss, g = super().gradient(ctx, batch)
        buf = ctx.buffer
        past = [k for k in buf.tasks() if k < ctx.t]
        if not past:
            return loss, g
        mem = [loss_and_grad(ctx.forward, ctx.state.store, buf.read(k))[1][0].values for k in past]
        return loss, gem_project(g, mem)


# --- LwF ----------------------------------------------------------------------

def _softmax_np(z, T_):
    z = np.asarray(z, dtype=np.float64) / T_
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def lwf_loss(student_logits, teacher_logits, labels, alpha=0.5, temperature=2.0):
    """CE(student, labels) + alpha * KD, KD = -sum_c p_old(T) log p_new(T), averaged over samples."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    s = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    y = np.atleast_1d(labels)
    logp = np.log(_softmax_np(s, 1.0))
    ce = -np.mean(logp[np.arange(len(y)), y])
    kd = -np.mean(np.sum(_softmax_np(t, temperature) * np.log(_softmax_np(s, temperature)), axis=-1))
    return float(ce + alpha * kd)


def distillation_term(student, teacher_probs, targets, temperature):
    """Graph version of KD over every position whose target is not ignored."""
    keep = (np.asarray(targets) != -100).reshape(-1)
    C = student.shape[-1]
    logq = T.log_softmax(T.mul(T.reshape(student, (-1, C)), 1.0 / temperature), axis=-1)
    per_row = np.asarray(teacher_probs).reshape(-1, C) * keep[:, None]
    # same per-sample weighting as the cross-entropy: mean over kept positions, then samples
    n = np.asarray(targets).shape[0]
    counts = keep.reshape(n, -1).sum(axis=1)
    w = np.repeat(1.0 / (counts * n), keep.size // n)[:, None]
    return T.neg(T.tsum(T.mul(logq, per_row * w)))


@register
class LwF(Strategy):
    name = "lwf"
    needs_previous_model = True
    defaults = {"alpha": 0.5, "temperature": 2.0}

    def gradient(self, ctx, batch):
        if ctx.t == 1:
            return super().gradient(ctx, batch)
        x, y = batch
        teacher = ctx.forward(ctx.previous_store, x).data
        p_old = _softmax_np(teacher, self.hp["temperature"])
        bound = Bound(ctx.state.store, requires_grad=True)
        logits = ctx.forward(bound, x)
        loss = T.add(T.cross_entropy(logits, y),
                     T.mul(distillation_term(logits, p_old, y, self.hp["temperature"]), self.hp["alpha"]))
        loss.backward()
        flat = np.zeros(ctx.state.store.size)
        for name, t in bound.tensors.items():
            if t.grad is not None:
                flat[ctx.state.store.entry_slice(name)] = t.grad.reshape(-1)
        return float(loss.data), flat


# --- replay -------------------------------------------------------------------

@register
class Replay(Strategy):
    """Offline replay: after each task, extra passes over 1% of every earlier task."""

    name = "replay"
    needs_replay_buffer = True
    defaults = {"replay_epochs": None}

    def end_task(self, ctx):
        epochs = self.hp["replay_epochs"]
        epochs = ctx.optimizer_config.epochs if epochs is None else epochs
        opt = Optimizer(ctx.optimizer_config, ctx.state.store.size)
        for _ in range(epochs):
            for b in replay_mix(None, ctx.buffer, "offline", ctx.rng,
                                ctx.optimizer_config.batch_size, before_task=ctx.t):
                ctx.train_step(b, opt)


@register
class ReplayOnline(Strategy):
    """Online replay: every batch carries ceil(1% of the batch) buffered samples."""

    name = "replay-online"
    needs_replay_buffer = True
    defaults = {}

    def extra_batches(self, ctx, batch):
        return replay_mix(batch, ctx.buffer, "online", ctx.rng)


# --- parameter-efficient tuning ----------------------------------------------

def default_lora_targets(store):
    """q/v projections for transformers, otherwise every hidden linear weight."""
    qv = [n for n in store.names if n.endswith(("q_proj.weight", "v_proj.weight"))]
    if qv:
        return qv
    return [n for n in store.names if n.endswith(".linear.weight")]


def _lora_config(hp, store, seed):
    targets = hp["targets"] or default_lora_targets(store)
    return LoRAAdapterConfig(hp["rank"], hp["alpha"], targets, hp["dropout"], seed)


def _adapter_mask(store, names, task_id):
    return GradientMask(store.indices_of(names), store.size, "adapters", task_id)


@register
class SeqLoRA(Strategy):
    """One adapter set shared by all tasks; base weights frozen."""

    name = "seqlora"
    defaults = {"rank": 8, "alpha": 32.0, "targets": [], "dropout": 0.0}

    def begin_task(self, ctx):
        store = ctx.state.store
        if not store.adapters:
            store = attach_lora(store, _lora_config(self.hp, store, ctx.optimizer_config.seed))
            ctx.state.store = store
        self.mask = _adapter_mask(store, adapter_names(store), ctx.task_id)


def olora_regularizer(current, past, gamma=0.5):
    """gamma * sum_i ||A_i A_t^T||_F^2 over targets, with its gradient w.r.t. each A_t.

    ``current`` maps target -> A_t (r x d); ``past`` is a list of such maps.
    """
    reg = 0.0
    grads = {k: np.zeros_like(a) for k, a in current.items()}
    for prev in past:
        if set(prev) != set(current):
            raise ValueError("O-LoRA adapter sets cover different targets")
        for k, a_t in current.items():
            a_i = prev[k]
            if a_i.shape[1] != a_t.shape[1]:
                raise ValueError(f"adapter widths differ on {k!r}")
            m = a_i @ a_t.T
            reg += float(np.sum(m * m))
            grads[k] += 2.0 * a_t @ a_i.T @ a_i
    return gamma * reg, {k: gamma * g for k, g in grads.items()}


@register
class OLoRA(Strategy):
    """A fresh adapter set per task, trained orthogonally to the frozen earlier sets."""

    name = "olora"
    defaults = {"rank": 8, "alpha": 32.0, "targets": [], "dropout": 0.0, "gamma": 0.5}

    def begin_task(self, ctx):
        store = ctx.state.store
        base = [n for n in store.names if ".lora_" not in n]
        cfg = _lora_config(self.hp, store, ctx.optimizer_config.seed + ctx.t)
        cfg.targets = [n for n in cfg.targets if n in base]
        store = attach_lora(store, cfg, tag=f".t{ctx.t}")
        ctx.state.store = store
        self.mask = _adapter_mask(store, adapter_names(store, tag=f".t{ctx.t}"), ctx.task_id)

    def _a_maps(self, store, t):
        cur, past = {}, {i: {} for i in range(1, t)}
        for target, items in store.adapters.items():
            for ad in items:
                k = int(ad.a_name.rsplit(".t", 1)[1])
                (cur if k == t else past[k])[target] = ad.a_name
        return cur, [past[i] for i in range(1, t)]

    def gradient(self, ctx, batch):
        loss, g = super().gradient(ctx, batch)
        if ctx.t == 1:
            return loss, g
        store = ctx.state.store
        cur, past = self._a_maps(store, ctx.t)
        reg, grads = olora_regularizer({k: store[n] for k, n in cur.items()},
                                       [{k: store[n] for k, n in p.items()} for p in past],
                                       self.hp["gamma"])
        g = g.copy()
        for k, name in cur.items():
            g[store.entry_slice(name)] += grads[k].reshape(-1)
        return loss + reg, g


def norm_entry_names(store):
    return [n for n in store.names
            if "layernorm" in n or n.startswith("norm.") or ".norm." in n]


def layernorm_strategy(store, task_id=""):
    """Mask selecting every normalization scale and shift parameter."""
    names = norm_entry_names(store)
    if not names:
        raise ValueError("model has no normalization entries; LayerNorm tuning is impossible")
    return _adapter_mask(store, names, task_id)


@register
class LayerNormOnly(Strategy):
    name = "layernorm"
    defaults = {}

    def begin_task(self, ctx):
        self.mask = layernorm_strategy(ctx.state.store, ctx.task_id)


@register
class MIGU(Strategy):
    """Top-k by mean L1 output-channel magnitude, then masked updates."""

    name = "migu"
    records_masks = True
    defaults = {"ratio": 0.001}

    def begin_task(self, ctx):
        store = ctx.state.store
        imp = estimate_migu_magnitude(ctx.forward, store, ctx.train.all())
        self.mask = select_topk(imp, SparsityBudget(self.hp["ratio"], store.size), ctx.task_id)
        ctx.state.importances.append(imp)
        ctx.record_mask(self.mask)
