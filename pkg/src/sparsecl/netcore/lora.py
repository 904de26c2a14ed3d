"""Low-rank adapters: W' = W + (alpha / r) B A."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .store import Adapter, ParameterStore


@dataclass
class LoRAAdapterConfig:
    rank: int = 8
    alpha: float = 32.0
    targets: list = field(default_factory=list)
    dropout: float = 0.0
    seed: int = 0

    @property
    def scaling(self):
        return self.alpha / self.rank

    def validate(self):
        if self.rank <= 0:
            raise ValueError("LoRA rank must be positive")
        if self.alpha <= 0:
            raise ValueError("LoRA alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("LoRA dropout must lie in [0, 1)")
        if not self.targets:
            raise ValueError("LoRA needs at least one target entry")
        return self


def attach_lora(store, config, tag=""):
    """Return a new store with an (A, B) pair appended for every target weight.

    ``B`` starts at zero so the adapted model initially matches the base
    model; ``A`` is drawn from U(-1/sqrt(d_in), 1/sqrt(d_in)). ``tag`` makes
    entry names unique when several adapter sets share a target.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    extra, adapters = [], {}
    for target in config.targets:
        if target not in store:
            raise KeyError(f"LoRA target {target!r} is not a parameter entry")
        w = store[target]
        if w.ndim != 2:
            raise ValueError(f"LoRA target {target!r} is not 2-D (shape {w.shape})")
        d_out, d_in = w.shape
        if config.rank > min(d_out, d_in):
            raise ValueError(f"LoRA rank {config.rank} exceeds min dimension of {target!r} {w.shape}")
        base = target[:-len(".weight")] if target.endswith(".weight") else target
        a_name, b_name = f"{base}.lora_A{tag}", f"{base}.lora_B{tag}"
        bound = 1.0 / np.sqrt(d_in)
        extra.append((a_name, rng.uniform(-bound, bound, size=(config.rank, d_in))))
        extra.append((b_name, np.zeros((d_out, config.rank))))
        adapters[target] = (Adapter(a_name, b_name, config.scaling, config.dropout),)
    return store.with_entries(extra, adapters)


def adapter_names(store, tag=None):
    """Entry names of every adapter factor (optionally only those with ``tag``)."""
    names = []
    for items in store.adapters.values():
        for ad in items:
            if tag is None or ad.a_name.endswith(f"lora_A{tag}"):
                names += [ad.a_name, ad.b_name]
    return names


def merge_lora(store):
    """Fold every adapter into its base weight and drop the adapter entries."""
    drop = set(adapter_names(store))
    merged = []
    for name, arr in store.entries():
        if name in drop:
            continue
        w = arr.copy()
        for ad in store.adapters.get(name, ()):
            w += ad.scaling * (store[ad.b_name] @ store[ad.a_name])
        merged.append((name, w))
    return ParameterStore(merged)
