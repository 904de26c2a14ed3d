import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecl.netcore import tensor as T
from sparsecl.netcore.grad import batch_loss, finite_difference_check, loss_and_grad
from sparsecl.netcore.lora import LoRAAdapterConfig, adapter_names, attach_lora, merge_lora
from sparsecl.netcore.models import Bound, ModelConfig, build_model
from sparsecl.netcore.store import (CheckpointError, GradientRecord, ParameterStore,
                                    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint,
                                    save_checkpoint)

from conftest import classification_data, make_mlp, make_transformer, randomize, sequence_data


# --- models ------------------------------------------------------------------

def test_mlp_parameter_count():
    store, _ = make_mlp((4, 8, 3), seed=42)
    assert store.size == 4 * 8 + 8 + 8 * 3 + 3 == 67


def test_same_config_and_seed_bit_identical():
    a, _ = make_mlp(seed=7)
    b, _ = make_mlp(seed=7)
    assert a.names == b.names
    assert a.flat.tobytes() == b.flat.tobytes()
    c, _ = make_mlp(seed=8)
    assert not np.array_equal(a.flat, c.flat)


def test_transformer_logit_shape():
    store, fwd = make_transformer(vocab_size=16, d_model=8, n_layers=1, n_heads=2)
    out = fwd(store, np.array([1, 2, 3, 4, 5]))
    assert out.shape == (5, 16)
    assert fwd(store, np.zeros((3, 5), dtype=int)).shape == (3, 5, 16)


def test_transformer_is_causal():
    store, fwd = make_transformer()
    a = fwd(store, np.array([1, 2, 3, 4])).data
    b = fwd(store, np.array([1, 2, 3, 9])).data
    np.testing.assert_array_equal(a[:3], b[:3])


def test_forward_is_pure():
    store, fwd = make_mlp()
    x, _ = classification_data(5)
    assert fwd(store, x).data.tobytes() == fwd(store, x).data.tobytes()


@pytest.mark.parametrize("kw", [dict(family="cnn"), dict(family="mlp", sizes=[4]),
                                dict(family="mlp", sizes=[4, 0, 3]),
                                dict(family="tiny-transformer", d_model=7, n_heads=2)])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ValueError):
        build_model(ModelConfig(**kw))


def test_input_width_mismatch_rejected(mlp):
    store, fwd = mlp
    with pytest.raises(ValueError, match="input width"):
        fwd(store, np.zeros((2, 5)))


# --- loss and gradients --------------------------------------------------------

def test_uniform_logits_give_ln3():
    store, fwd = make_mlp((4, 8, 3))
    store["head.weight"][:] = 0.0
    store["head.bias"][:] = 0.0
    loss, _ = loss_and_grad(fwd, store, (np.ones((1, 4)), np.array([2])))
    assert loss == pytest.approx(math.log(3), abs=1e-15)


def test_per_batch_is_mean_of_per_sample(mlp, data64):
    store, fwd = mlp
    randomize(store)
    loss_b, (rec,) = loss_and_grad(fwd, store, data64, "per-batch")
    loss_s, recs = loss_and_grad(fwd, store, data64, "per-sample")
    assert len(recs) == 64 and all(r.granularity == "per-sample" for r in recs)
    mean = np.mean([r.values for r in recs], axis=0)
    assert np.max(np.abs(rec.values - mean)) <= 1e-12
    assert abs(loss_b - loss_s) <= 1e-12


def test_per_batch_mean_holds_for_sequences_with_uneven_masks():
    store, fwd = make_transformer()
    randomize(store, scale=0.1)
    x, y = sequence_data(4)
    y[0, 2:4] = -100  # samples keep different numbers of targets
    _, (rec,) = loss_and_grad(fwd, store, (x, y))
    _, recs = loss_and_grad(fwd, store, (x, y), "per-sample")
    assert np.max(np.abs(rec.values - np.mean([r.values for r in recs], axis=0))) <= 1e-12


def _linear_softmax(params, x, rng=None, capture=None):
    p = params if isinstance(params, Bound) else Bound(params)
    return T.mul(T.Tensor(np.asarray(x, dtype=float).reshape(-1, 1)), p["w"])


def test_two_parameter_linear_softmax_matches_central_differences():
    store = ParameterStore([("w", np.array([0.3, -1.1]))])
    batch = (np.array([1.7]), np.array([1]))
    assert finite_difference_check(_linear_softmax, store, batch, eps=1e-6) <= 1e-7
    # closed form: d/dw_c of -log softmax(w x)_y = x (p_c - [c == y])
    z = 1.7 * store.flat
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    _, (rec,) = loss_and_grad(_linear_softmax, store, batch)
    np.testing.assert_allclose(rec.values, 1.7 * (p - np.array([0, 1])), rtol=1e-14)


def test_quadratic_probe_is_exact():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0.5, 2, size=6), rng.normal(size=6)
    store = ParameterStore([("theta", rng.normal(size=6))])

    def loss(s):
        th = s.flat
        return float(np.sum(a * th * th) + b @ th)

    dev = finite_difference_check(None, store, None, loss_fn=loss, grad=2 * a * store.flat + b,
                                 eps=1e-3)
    assert dev <= 1e-9


def test_fd_check_mlp_and_transformer():
    store, fwd = make_mlp((4, 8, 3))
    randomize(store)
    assert finite_difference_check(fwd, store, classification_data(8)) <= 1e-4
    store, fwd = make_mlp((4, 6, 6, 3), layernorm=True)
    randomize(store, seed=1)
    assert finite_difference_check(fwd, store, classification_data(8)) <= 1e-4
    store, fwd = make_transformer()
    randomize(store, scale=0.2)
    assert finite_difference_check(fwd, store, sequence_data(3), max_params=400) <= 1e-4


def test_fd_check_rejects_nonpositive_eps(mlp, data64):
    with pytest.raises(ValueError):
        finite_difference_check(*mlp, data64, eps=0)


def test_zero_weights_symmetric_inputs_give_zero_gradients():
    store, fwd = make_mlp((4, 8, 3))
    store.flat[:] = 0.0
    x = np.array([[1.0, -1.0, 2.0, -2.0], [-1.0, 1.0, -2.0, 2.0]])
    _, (rec,) = loss_and_grad(fwd, store, (x, np.array([0, 1])))
    for name in ("layers.0.linear.weight", "layers.0.linear.bias", "head.weight"):
        assert np.all(rec.values[store.entry_slice(name)] == 0.0)
    # only the head bias sees a signal
    assert np.any(rec.values[store.entry_slice("head.bias")] != 0.0)


def test_non_finite_gradient_names_entry():
    store, fwd = make_mlp((4, 8, 3))
    store["head.bias"][0] = np.inf
    with pytest.raises(T.NonFiniteError, match="head.bias"):
        loss_and_grad(fwd, store, classification_data(2))


def test_empty_batch_and_bad_granularity(mlp):
    store, fwd = mlp
    with pytest.raises(ValueError):
        loss_and_grad(fwd, store, (np.zeros((0, 4)), np.zeros(0, dtype=int)))
    with pytest.raises(ValueError):
        loss_and_grad(fwd, store, classification_data(2), "per-token")


def test_cross_entropy_rejects_fully_ignored_sample():
    logits = T.Tensor(np.zeros((1, 3, 4)))
    with pytest.raises(ValueError):
        T.cross_entropy(logits, np.full((1, 3), -100))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_elementwise_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 5))
    w0, b0 = rng.normal(size=5), rng.normal(size=5)
    c = rng.normal(size=(3, 5))

    def f(x, w, b):
        h = T.layer_norm(x, w, b)
        h = T.add(T.gelu(h), T.tanh(h))
        return T.tsum(T.mul(T.log_softmax(T.mul(h, T.softmax(x)), axis=-1), c))

    xs = [T.Tensor(v.copy(), requires_grad=True) for v in (x0, w0, b0)]
    f(*xs).backward()
    eps = 1e-6
    for k, base in enumerate((x0, w0, b0)):
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            args = [x0.copy(), w0.copy(), b0.copy()]
            args[k][idx] += eps
            up = f(*map(T.Tensor, args)).data
            args[k][idx] -= 2 * eps
            down = f(*map(T.Tensor, args)).data
            num[idx] = (up - down) / (2 * eps)
        np.testing.assert_allclose(xs[k].grad, num, rtol=1e-5, atol=1e-7)


# --- store and checkpoints ----------------------------------------------------

def test_flat_index_is_a_bijection(mlp):
    store, _ = mlp
    seen = []
    for i in range(store.size):
        name, off = store.locate(i)
        seen.append((name, off))
        assert store.flat[i] == store[name].reshape(-1)[off]
    assert len(set(seen)) == store.size == sum(a.size for _, a in store.entries())


def test_duplicate_names_rejected():
    with pytest.raises(ValueError):
        ParameterStore([("a", np.zeros(2)), ("a", np.zeros(3))])


def test_gradient_record_length(mlp, data64):
    store, fwd = mlp
    _, (rec,) = loss_and_grad(fwd, store, data64)
    assert isinstance(rec, GradientRecord) and len(rec) == store.size


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.text("abcdefgh._", min_size=1, max_size=12),
                          st.lists(st.integers(1, 4), min_size=1, max_size=3)),
                min_size=1, max_size=5, unique_by=lambda e: e[0]),
       st.integers(0, 2 ** 32 - 1))
def test_checkpoint_round_trip(spec, seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore([(n, rng.normal(size=tuple(shape))) for n, shape in spec])
    cfg = {"family": "mlp", "sizes": [1, 2]}
    back, cfg2, extra = checkpoint_from_bytes(checkpoint_bytes(store, cfg, {"k": 1}))
    assert back.names == store.names and back.equals(store)
    assert [i.shape for i in back.infos()] == [i.shape for i in store.infos()]
    assert cfg2 == cfg and extra == {"k": 1}


def test_checkpoint_file_round_trip_with_adapters(tmp_path):
    store, fwd = make_transformer()
    store = attach_lora(store, LoRAAdapterConfig(rank=2, alpha=4, targets=["layers.0.self_attn.q_proj.weight"]))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store, ModelConfig(family="tiny-transformer").to_dict())
    back, cfg, _ = load_checkpoint(path)
    assert back.equals(store) and back.adapters == store.adapters
    x = np.array([3, 1, 4, 1, 5])
    assert fwd(back, x).data.tobytes() == fwd(store, x).data.tobytes()


@pytest.mark.parametrize("mutate", [lambda b: b[:-3], lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:20]])
def test_corrupt_checkpoint_rejected(mlp, mutate):
    blob = checkpoint_bytes(mlp[0])
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(mutate(blob))


# --- LoRA --------------------------------------------------------------------

def test_lora_parameter_count_and_scaling():
    store = ParameterStore([("proj.weight", np.zeros((64, 64)))])
    cfg = LoRAAdapterConfig(rank=8, alpha=32, targets=["proj.weight"])
    out = attach_lora(store, cfg)
    assert out.size - store.size == 2 * 8 * 64 == 1024
    assert cfg.scaling == 4.0
    assert out.adapters["proj.weight"][0].scaling == 4.0


def test_zero_b_reproduces_base_logits():
    store, fwd = make_transformer()
    x = np.array([1, 5, 2, 7, 3])
    base = fwd(store, x).data
    ad = attach_lora(store, LoRAAdapterConfig(rank=4, alpha=32, targets=[
        "layers.0.self_attn.q_proj.weight", "layers.0.self_attn.v_proj.weight"]))
    assert fwd(ad, x).data.tobytes() == base.tobytes()
    mstore, mfwd = make_mlp((4, 8, 3))
    xm = classification_data(3)[0]
    adm = attach_lora(mstore, LoRAAdapterConfig(rank=2, targets=["layers.0.linear.weight"]))
    assert mfwd(adm, xm).data.tobytes() == mfwd(mstore, xm).data.tobytes()


def test_merge_matches_hand_arithmetic():
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    store = attach_lora(ParameterStore([("w.weight", W.copy())]),
                        LoRAAdapterConfig(rank=1, alpha=2, targets=["w.weight"]))
    store["w.lora_A"][:] = [[1.0, -1.0]]
    store["w.lora_B"][:] = [[2.0], [0.5]]
    merged = merge_lora(store)
    # (alpha / r) B A = 2 * [[2, -2], [0.5, -0.5]]
    np.testing.assert_array_equal(merged["w.weight"], [[5.0, -2.0], [4.0, 3.0]])
    assert merged.names == ["w.weight"]


def test_merged_model_matches_adapted_forward():
    store, fwd = make_mlp((4, 8, 8, 3))
    ad = attach_lora(store, LoRAAdapterConfig(rank=2, alpha=8, targets=["layers.0.linear.weight"]))
    ad["layers.0.linear.lora_B"][:] = np.random.default_rng(0).normal(size=(8, 2))
    x = classification_data(4)[0]
    np.testing.assert_allclose(fwd(merge_lora(ad), x).data, fwd(ad, x).data, rtol=1e-13, atol=1e-14)


def test_lora_validation():
    store = ParameterStore([("w.weight", np.zeros((4, 3))), ("b", np.zeros(3))])
    with pytest.raises(ValueError, match="rank"):
        attach_lora(store, LoRAAdapterConfig(rank=4, targets=["w.weight"]))
    with pytest.raises(ValueError, match="2-D"):
        attach_lora(store, LoRAAdapterConfig(rank=1, targets=["b"]))
    with pytest.raises(KeyError):
        attach_lora(store, LoRAAdapterConfig(rank=1, targets=["nope"]))
    with pytest.raises(ValueError):
        LoRAAdapterConfig(rank=1, targets=["w.weight"], dropout=1.0).validate()


def test_adapter_gradients_match_finite_differences():
    store, fwd = make_mlp((4, 6, 3))
    store = attach_lora(store, LoRAAdapterConfig(rank=2, alpha=4, targets=["layers.0.linear.weight"]))
    randomize(store, scale=0.3)
    assert finite_difference_check(fwd, store, classification_data(6)) <= 1e-4
    assert set(adapter_names(store)) == {"layers.0.linear.lora_A", "layers.0.linear.lora_B"}


def test_batch_loss_matches_loss_and_grad(mlp, data64):
    store, fwd = mlp
    assert batch_loss(fwd, store, data64) == loss_and_grad(fwd, store, data64)[0]
