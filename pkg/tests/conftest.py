import numpy as np
import pytest

from sparsecl.netcore.models import ModelConfig, build_model


def make_mlp(sizes=(4, 8, 3), seed=42, layernorm=False):
    return build_model(ModelConfig(family="mlp", sizes=list(sizes), seed=seed, layernorm=layernorm))


def make_transformer(seed=0, **kw):
    return build_model(ModelConfig(family="tiny-transformer", seed=seed, **kw))


def classification_data(n=64, dim=4, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dim)), rng.integers(0, n_classes, size=n)


def sequence_data(n=6, length=5, vocab=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, vocab, size=(n, length))
    y = np.roll(x, -1, axis=1)
    y[:, :2] = -100
    return x, y


def randomize(store, seed=0, scale=0.5):
    """Perturb every parameter so biases and norms are not at their trivial init."""
    store.flat[:] += np.random.default_rng(seed).normal(scale=scale, size=store.size)
    return store


@pytest.fixture
def mlp():
    return make_mlp()


@pytest.fixture
def data64():
    return classification_data(64)
