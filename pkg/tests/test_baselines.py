import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecl.baselines import (EWCState, LwF, OLoRA, _softmax_np, default_lora_targets,
                                ewc_penalty, gem_project, layernorm_strategy, lwf_loss,
                                norm_entry_names, olora_regularizer)
from sparsecl.continual import (REGISTRY, AccessLog, DatasetHandle, OptimizerConfig, ReplayBuffer,
                                get_strategy, replay_mix, run_sequence)
from sparsecl.masking import classify_entry
from sparsecl.netcore.store import GradientRecord
from sparsecl.tasks import SyntheticTaskConfig, generate_task

from conftest import make_mlp, make_transformer
from oracles import nonneg_qp_by_enumeration


# --- EWC ----------------------------------------------------------------------

def test_ewc_hand_fixture():
    pen, g = ewc_penalty(np.array([1.5]), EWCState(np.array([1.0]), np.array([2.0]), 0.5))
    assert pen == 0.25 and g.values.tolist() == [1.0]


def test_ewc_zero_at_anchor_and_default_lambda():
    a = np.random.default_rng(0).normal(size=7)
    pen, g = ewc_penalty(a.copy(), EWCState(a, np.abs(a), 0.5))
    assert pen == 0.0 and not g.values.any()
    assert get_strategy("ewc").hp["lam"] == 0.5


def test_ewc_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    st_ = EWCState(rng.normal(size=12), rng.random(12) * 3, 0.5)
    theta = rng.normal(size=12)
    _, g = ewc_penalty(theta, st_)
    h = 1e-6
    fd = np.empty(12)
    for i in range(12):
        e = np.zeros(12)
        e[i] = h
        fd[i] = (ewc_penalty(theta + e, st_)[0] - ewc_penalty(theta - e, st_)[0]) / (2 * h)
    assert np.max(np.abs(fd - g.values) / np.maximum(np.abs(g.values), 1e-3)) <= 1e-8


def test_ewc_errors():
    with pytest.raises(ValueError):
        EWCState(np.zeros(2), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        ewc_penalty(np.zeros(3), EWCState(np.zeros(2), np.ones(2)))


# --- GEM ----------------------------------------------------------------------

def test_gem_single_constraint_closed_form():
    out = gem_project(np.array([-1.0, 1.0]), [np.array([1.0, 0.0])])
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-15)


def test_gem_no_violation_returns_same_object():
    g = np.array([1.0, 2.0, 3.0])
    assert gem_project(g, [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 1.0])]) is g
    rec = GradientRecord(g)
    assert gem_project(rec, []) is rec


def test_gem_two_orthogonal_constraints_equal_sequential_projection():
    g = np.array([-1.0, -2.0, 3.0])
    G = [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
    seq = g.copy()
    for gk in G:
        seq = seq - min(0.0, seq @ gk) / (gk @ gk) * gk
    np.testing.assert_allclose(gem_project(g, G), seq, atol=1e-15)
    np.testing.assert_allclose(gem_project(g, G), nonneg_qp_by_enumeration(g, np.stack(G)), atol=1e-12)


def test_gem_is_closest_feasible_point_on_a_grid():
    rng = np.random.default_rng(7)
    axis = np.linspace(-3, 3, 41)
    grid = np.array(list(itertools.product(axis, axis, axis)))
    for _ in range(5):
        g = rng.normal(size=3)
        G = rng.normal(size=(2, 3))
        if np.all(G @ g >= 0):
            continue
        out = gem_project(g, list(G))
        feasible = grid[np.all(grid @ G.T >= 0, axis=1)]
        assert np.linalg.norm(out - g) <= np.min(np.linalg.norm(feasible - g, axis=1)) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
def test_gem_feasible_and_matches_enumeration(seed, K):
    rng = np.random.default_rng(seed)
    g, G = rng.normal(size=3), rng.normal(size=(K, 3))
    out = gem_project(g, list(G))
    assert np.min(G @ out) >= -1e-9
    np.testing.assert_allclose(out, nonneg_qp_by_enumeration(g, G), atol=1e-8)


def test_gem_degenerate_gram_is_regularized():
    g = np.array([-1.0, 0.5, 0.0])
    G = [np.array([1.0, 0.0, 0.0]), np.array([2.0, 0.0, 0.0])]
    out = gem_project(g, G)
    assert min(gk @ out for gk in G) >= -1e-9
    np.testing.assert_allclose(out, [0.0, 0.5, 0.0], atol=1e-8)


def test_gem_misaligned():
    with pytest.raises(ValueError):
        gem_project(np.ones(3), [np.ones(2)])


# --- LwF ----------------------------------------------------------------------

def test_lwf_symmetric_teacher():
    np.testing.assert_array_equal(_softmax_np([0.0, 0.0], 2.0), [0.5, 0.5])


def test_lwf_self_distillation_is_teacher_entropy():
    z = np.array([[1.0, -0.5, 2.0], [0.3, 0.3, -1.0]])
    y = np.array([2, 0])
    ce = float(-np.mean(np.log(_softmax_np(z, 1.0))[np.arange(2), y]))
    p = _softmax_np(z, 2.0)
    H = float(-np.mean(np.sum(p * np.log(p), axis=-1)))
    assert lwf_loss(z, z, y, alpha=1.0, temperature=2.0) == pytest.approx(ce + H, rel=1e-14)
    # teacher entropy is the minimum over student logits
    for d in np.random.default_rng(0).normal(size=(20, 2, 3)):
        assert lwf_loss(z + d, z, y, 1.0, 2.0) - float(
            -np.mean(np.log(_softmax_np(z + d, 1.0))[np.arange(2), y])) >= H - 1e-12


def test_lwf_defaults_and_errors():
    assert LwF().hp == {"alpha": 0.5, "temperature": 2.0}
    with pytest.raises(ValueError):
        lwf_loss([[0.0]], [[0.0]], [0], temperature=0.0)


def test_lwf_graph_gradient_matches_closed_loss():
    # the strategy's autodiff loss equals lwf_loss on the same logits
    from types import SimpleNamespace
    store, fwd = make_mlp((4, 6, 3))
    prev = store.copy()
    prev.flat[:] += 0.3
    x = np.random.default_rng(0).normal(size=(5, 4))
    y = np.array([0, 1, 2, 1, 0])
    ctx = SimpleNamespace(t=2, forward=fwd, previous_store=prev, state=SimpleNamespace(store=store))
    loss, g = LwF().gradient(ctx, (x, y))
    ref = lwf_loss(fwd(store, x).data, fwd(prev, x).data, y)
    assert loss == pytest.approx(ref, rel=1e-13)
    h, i = 1e-6, 3
    plus, minus = store.copy(), store.copy()
    plus.flat[i] += h
    minus.flat[i] -= h
    fd = (lwf_loss(fwd(plus, x).data, fwd(prev, x).data, y)
          - lwf_loss(fwd(minus, x).data, fwd(prev, x).data, y)) / (2 * h)
    assert g[i] == pytest.approx(fd, rel=1e-6)


# --- replay -------------------------------------------------------------------

def _handle(task, n, log_):
    x = np.full((n, 2), float(task))
    return DatasetHandle(task, "train", (x, np.full(n, task)), log_)


def test_offline_replay_ten_plus_ten():
    log_ = AccessLog()
    buf = ReplayBuffer(0.01, log_, seed=3)
    for t in (1, 2):
        buf.add_task(t, _handle(t, 1000, log_))
    batches = replay_mix(None, buf, "offline", np.random.default_rng(0), before_task=3)
    labels = np.concatenate([b[1] for b in batches])
    assert (labels == 1).sum() == 10 and (labels == 2).sum() == 10


def test_first_task_gets_no_replay():
    buf = ReplayBuffer(0.01)
    batch = (np.zeros((64, 2)), np.zeros(64, dtype=int))
    assert replay_mix(batch, buf, "online", np.random.default_rng(0)) == [batch]
    assert replay_mix(batch, buf, "offline", np.random.default_rng(0)) == []


def test_online_replay_one_per_batch_of_64():
    log_ = AccessLog()
    buf = ReplayBuffer(0.01, log_)
    buf.add_task(1, _handle(1, 500, log_))
    (mixed,) = replay_mix((np.zeros((64, 2)), np.zeros(64, dtype=int)), buf, "online",
                          np.random.default_rng(1))
    assert len(mixed[1]) == 65 and (mixed[1] == 1).sum() == 1


def test_reservoir_is_uniform():
    counts = np.zeros(100)
    for seed in range(400):
        log_ = AccessLog()
        buf = ReplayBuffer(0.05, log_, seed=seed)
        buf.add_task(1, DatasetHandle(1, "train", (np.arange(100.0)[:, None], np.zeros(100, int)),
                                      log_))
        counts[buf.read(1)[0][:, 0].astype(int)] += 1
    # 400 draws of 5 items: each item expected 20 times
    from scipy import stats
    assert stats.chisquare(counts).pvalue > 0.001


# --- LayerNorm-only, LoRA family, MIGU -------------------------------------------

def test_layernorm_mask_counts():
    store, _ = make_mlp((4, 8, 8, 3), layernorm=True)
    assert layernorm_strategy(store).indices.size == 32
    t, _ = make_transformer()
    m = layernorm_strategy(t)
    kinds = {classify_entry(t.locate(i)[0])[1] for i in m.indices}
    assert kinds == {"IN", "PN", "N"}
    assert set(norm_entry_names(t)) == {n for n in t.names if "norm" in n}
    with pytest.raises(ValueError):
        layernorm_strategy(make_mlp()[0])


def test_olora_regularizer_fixtures():
    a1 = {"w": np.array([[1.0, 0.0]])}
    reg, _ = olora_regularizer({"w": np.array([[0.0, 1.0]])}, [a1])
    assert reg == 0.0
    reg, _ = olora_regularizer({"w": np.array([[1.0, 0.0]])}, [a1], gamma=0.5)
    assert reg == 0.5
    assert OLoRA().hp["gamma"] == 0.5
    with pytest.raises(ValueError):
        olora_regularizer({"w": np.ones((1, 2))}, [{"v": np.ones((1, 2))}])


def test_olora_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    cur = {"a": rng.normal(size=(3, 5)), "b": rng.normal(size=(2, 4))}
    past = [{"a": rng.normal(size=(3, 5)), "b": rng.normal(size=(2, 4))} for _ in range(2)]
    _, grads = olora_regularizer(cur, past, 0.5)
    h = 1e-6
    for k, A in cur.items():
        for idx in np.ndindex(A.shape):
            up = {**cur, k: A.copy()}
            dn = {**cur, k: A.copy()}
            up[k][idx] += h
            dn[k][idx] -= h
            fd = (olora_regularizer(up, past)[0] - olora_regularizer(dn, past)[0]) / (2 * h)
            assert fd == pytest.approx(grads[k][idx], rel=1e-6, abs=1e-8)


def _tasks(n=3, kind="gaussian-clusters"):
    if kind == "char-sequence":
        return [generate_task(SyntheticTaskConfig(kind=kind, n_train=24, n_eval=6, task_index=i,
                                                  drift=1.0)) for i in range(n)]
    return [generate_task(SyntheticTaskConfig(dim=8, n_classes=3, n_train=150, n_eval=40,
                                              task_index=i)) for i in range(n)]


OPT = OptimizerConfig(lr=0.01, epochs=2, batch_size=32, seed=1)


@pytest.mark.parametrize("name", ["seqlora", "olora"])
def test_lora_strategies_freeze_base_weights(name):
    store, fwd = make_mlp((8, 16, 16, 3))
    base = {n: store[n].copy() for n in store.names}
    state = run_sequence((store, fwd), _tasks(), get_strategy(name), OPT)
    final = state.store
    for n, arr in base.items():
        assert final[n].tobytes() == arr.tobytes()
    adapters = [n for n in final.names if ".lora_" in n]
    assert adapters and any(not np.array_equal(final[n], 0) for n in adapters)
    if name == "olora":
        assert {n.rsplit(".t", 1)[1] for n in adapters} == {"1", "2", "3"}


def test_olora_past_adapters_frozen():
    from sparsecl.continual import Runner
    store, fwd = make_transformer(seed=1)
    assert set(default_lora_targets(store)) == {n for n in store.names
                                                if n.endswith(("q_proj.weight", "v_proj.weight"))}
    tasks = _tasks(2, "char-sequence")
    runner = Runner(store, fwd, tasks, get_strategy("olora", rank=2), OPT)
    runner._run_task(1, tasks[0])
    snap = {n: runner.state.store[n].copy() for n in runner.state.store.names if n.endswith(".t1")}
    assert len(snap) == 4  # A and B on q and v
    runner._run_task(2, tasks[1])
    for n, a in snap.items():
        assert runner.state.store[n].tobytes() == a.tobytes()
    assert any(n.endswith(".t2") for n in runner.state.store.names)


def test_migu_strategy_masks_top_magnitudes():
    store, fwd = make_mlp((8, 16, 3))
    init = store.flat.copy()
    state = run_sequence((store, fwd), _tasks(2), get_strategy("migu", ratio=0.05), OPT)
    assert len(state.masks) == 2
    union = np.unique(np.concatenate([m.indices for m in state.masks]))
    out = np.setdiff1d(np.arange(store.size), union)
    assert store.flat[out].tobytes() == init[out].tobytes()
    assert all(m.source_estimator == "migu_magnitude" for m in state.masks)


@pytest.mark.parametrize("name", sorted(set(REGISTRY) | {"ewc", "gem", "lwf", "replay",
                                                         "replay-online", "seqlora", "olora",
                                                         "layernorm", "migu"}))
def test_every_strategy_runs_and_respects_access(name):
    layernorm = name == "layernorm"
    store, fwd = make_mlp((8, 16, 3), layernorm=layernorm)
    hp = {"ratio": 0.05} if name in ("piece-f", "piece-s", "migu") else {}
    state = run_sequence((store, fwd), _tasks(), get_strategy(name, **hp), OPT)
    assert state.scores.n_tasks == 3
    assert all(0.0 <= state.scores[3, i] <= 1.0 for i in (1, 2, 3))
    assert state.access.history_reads() == []
    buffered = [r for r in state.access.records if r["source"] == "buffer"]
    assert all(r["task"] < r["during"] for r in buffered)
    uses_buffer = name in ("replay", "replay-online", "gem")
    assert bool(buffered) == uses_buffer


def test_transformer_strategies_run():
    for name in ("piece-s", "lwf", "olora", "layernorm"):
        store, fwd = make_transformer(seed=2)
        hp = {"ratio": 0.05} if name == "piece-s" else {}
        state = run_sequence((store, fwd), _tasks(2, "char-sequence"), get_strategy(name, **hp),
                             OptimizerConfig(lr=0.01, epochs=1, batch_size=8, seed=0))
        assert all(0.0 <= v <= 100.0 for row in state.scores.to_list() for v in row)
