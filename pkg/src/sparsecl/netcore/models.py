"""Model families: a tanh MLP classifier and a tiny decoder-only transformer.

Parameter names follow the usual decoder layout so mask analyses can bucket
them: ``layers.{i}.self_attn.{q,k,v,o}_proj.weight``,
``layers.{i}.mlp.{gate,up,down}_proj.weight``,
``layers.{i}.{input,post_attention}_layernorm.{weight,bias}``, ``norm.*``,
``embed_tokens.weight``, ``embed_positions.weight`` and ``lm_head.weight``.
The MLP uses ``layers.{i}.linear.*``, ``layers.{i}.norm.*`` and ``head.*``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .store import ParameterStore

FAMILIES = ("mlp", "tiny-transformer")


@dataclass
class ModelConfig:
    family: str = "mlp"
    # mlp
    sizes: list = field(default_factory=lambda: [20, 200, 200, 5])
    layernorm: bool = False
    activation: str | None = None
    # tiny-transformer
    vocab_size: int = 16
    d_model: int = 8
    n_layers: int = 1
    n_heads: int = 2
    d_ff: int | None = None
    max_len: int = 32
    seed: int = 0

    def __post_init__(self):
        self.sizes = [int(s) for s in self.sizes]
        if self.activation is None:
            self.activation = "tanh" if self.family == "mlp" else "gelu"

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.activation not in ("tanh", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.family == "mlp":
            if len(self.sizes) < 2:
                raise ValueError("mlp sizes need at least an input and an output width")
            if any(s <= 0 for s in self.sizes):
                raise ValueError(f"mlp sizes must be positive, got {self.sizes}")
        else:
            for key in ("vocab_size", "d_model", "n_layers", "n_heads", "max_len"):
                if getattr(self, key) <= 0:
                    raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
            if self.d_model % self.n_heads:
                raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _act(name, x):
    return T.tanh(x) if name == "tanh" else T.gelu(x)


def _dropout(x, p, rng):
    if p <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return T.mul(x, keep)


class Bound:
    """A store's entries wrapped as graph leaves for one forward pass."""

    def __init__(self, store, requires_grad=False):
        self.store = store
        self.tensors = {name: T.Tensor(arr, requires_grad=requires_grad, name=name)
                        for name, arr in store.entries()}

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def linear(self, x, name, bias=None, rng=None):
        """``x @ W.T (+ b)`` plus every low-rank adapter attached to ``name``."""
        y = T.matmul(x, T.transpose(self.tensors[name]))
        if bias is not None and bias in self.tensors:
            y = T.add(y, self.tensors[bias])
        for ad in self.store.adapters.get(name, ()):
            xa = _dropout(x, ad.dropout, rng)
            low = T.matmul(xa, T.transpose(self.tensors[ad.a_name]))
            y = T.add(y, T.mul(T.matmul(low, T.transpose(self.tensors[ad.b_name])), ad.scaling))
        return y


def _as_bound(params):
    return params if isinstance(params, Bound) else Bound(params)


class MLP:
    kind = "classifier"

    def __init__(self, config):
        self.config = config

    def init_entries(self, rng):
        c = self.config
        out = []
        n = len(c.sizes) - 1
        for i, (d_in, d_out) in enumerate(zip(c.sizes[:-1], c.sizes[1:])):
            bound = 1.0 / math.sqrt(d_in)
            prefix = "head" if i == n - 1 else f"layers.{i}.linear"
            out.append((f"{prefix}.weight", rng.uniform(-bound, bound, size=(d_out, d_in))))
            out.append((f"{prefix}.bias", np.zeros(d_out)))
            if c.layernorm and i < n - 1:
                out.append((f"layers.{i}.norm.weight", np.ones(d_out)))
                out.append((f"layers.{i}.norm.bias", np.zeros(d_out)))
        return out

    def linear_layers(self):
        n = len(self.config.sizes) - 1
        return [("head" if i == n - 1 else f"layers.{i}.linear") for i in range(n)]

    def __call__(self, params, x, rng=None, capture=None):
        p = _as_bound(params)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[-1] != self.config.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} != model input {self.config.sizes[0]}")
        h = T.Tensor(x)
        for prefix in self.linear_layers():
            if capture is not None:
                capture[prefix] = h.data
            h = p.linear(h, f"{prefix}.weight", f"{prefix}.bias", rng=rng)
            if prefix != "head":
                norm = prefix.replace(".linear", ".norm")
                if f"{norm}.weight" in p:
                    h = T.layer_norm(h, p[f"{norm}.weight"], p[f"{norm}.bias"])
                h = _act(self.config.activation, h)
        return h[0] if single else h


class TinyTransformer:
    kind = "lm"

    def __init__(self, config):
        self.config = config
        self.d_ff = config.d_ff or 4 * config.d_model

    def init_entries(self, rng):
        c = self.config
        d, f = c.d_model, self.d_ff
        std = 0.2  # widths of 8-32 train too slowly from the usual 0.02
        out = [("embed_tokens.weight", rng.normal(0.0, std, size=(c.vocab_size, d))),
               ("embed_positions.weight", rng.normal(0.0, std, size=(c.max_len, d)))]
        for i in range(c.n_layers):
            pre = f"layers.{i}"
            out.append((f"{pre}.input_layernorm.weight", np.ones(d)))
            out.append((f"{pre}.input_layernorm.bias", np.zeros(d)))
            for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
                out.append((f"{pre}.self_attn.{proj}.weight",
                            rng.uniform(-1, 1, size=(d, d)) / math.sqrt(d)))
            out.append((f"{pre}.post_attention_layernorm.weight", np.ones(d)))
            out.append((f"{pre}.post_attention_layernorm.bias", np.zeros(d)))
            out.append((f"{pre}.mlp.gate_proj.weight", rng.uniform(-1, 1, size=(f, d)) / math.sqrt(d)))
            out.append((f"{pre}.mlp.up_proj.weight", rng.uniform(-1, 1, size=(f, d)) / math.sqrt(d)))
            out.append((f"{pre}.mlp.down_proj.weight", rng.uniform(-1, 1, size=(d, f)) / math.sqrt(f)))
        out.append(("norm.weight", np.ones(d)))
        out.append(("norm.bias", np.zeros(d)))
        out.append(("lm_head.weight", rng.uniform(-1, 1, size=(c.vocab_size, d)) / math.sqrt(d)))
        return out

    def linear_layers(self):
        names = []
        for i in range(self.config.n_layers):
            pre = f"layers.{i}"
            names += [f"{pre}.self_attn.{p}" for p in ("q_proj", "k_proj", "v_proj", "o_proj")]
            names += [f"{pre}.mlp.{p}" for p in ("gate_proj", "up_proj", "down_proj")]
        return names + ["lm_head"]

    def __call__(self, params, tokens, rng=None, capture=None):
        p = _as_bound(params)
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        B, L = tokens.shape
        if L > c.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {c.max_len}")
        if tokens.min() < 0 or tokens.max() >= c.vocab_size:
            raise ValueError(f"token id out of range [0, {c.vocab_size})")
        H, dh = c.n_heads, c.d_model // c.n_heads
        causal = np.triu(np.full((L, L), -1e9), k=1)
        x = T.add(T.embedding(p["embed_tokens.weight"], tokens),
                  T.embedding(p["embed_positions.weight"], np.arange(L)))

        def lin(h, name):
            if capture is not None:
                capture[name] = h.data
            return p.linear(h, f"{name}.weight", rng=rng)

        for i in range(c.n_layers):
            pre = f"layers.{i}"
            h = T.layer_norm(x, p[f"{pre}.input_layernorm.weight"], p[f"{pre}.input_layernorm.bias"])

            def heads(t):
                return T.transpose(T.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

            q = heads(lin(h, f"{pre}.self_attn.q_proj"))
            k = heads(lin(h, f"{pre}.self_attn.k_proj"))
            v = heads(lin(h, f"{pre}.self_attn.v_proj"))
            scores = T.add(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)), causal)
            att = T.matmul(T.softmax(scores, axis=-1), v)
            att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (B, L, c.d_model))
            x = T.add(x, lin(att, f"{pre}.self_attn.o_proj"))
            h = T.layer_norm(x, p[f"{pre}.post_attention_layernorm.weight"],
                             p[f"{pre}.post_attention_layernorm.bias"])
            gate = _act(c.activation, lin(h, f"{pre}.mlp.gate_proj"))
            up = lin(h, f"{pre}.mlp.up_proj")
            x = T.add(x, lin(T.mul(gate, up), f"{pre}.mlp.down_proj"))
        x = T.layer_norm(x, p["norm.weight"], p["norm.bias"])
        logits = lin(x, "lm_head")
        return logits[0] if single else logits


def make_forward(config):
    config.validate()
    return MLP(config) if config.family == "mlp" else TinyTransformer(config)


def build_model(config):
    """Return ``(store, forward)`` for ``config``; same config and seed give identical stores."""
    forward = make_forward(config)
    rng = np.random.default_rng(config.seed)
    store = ParameterStore(forward.init_entries(rng))
    return store, forward
