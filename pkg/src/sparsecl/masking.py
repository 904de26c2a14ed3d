"""Top-k gradient masks: selection, application, serialization and analysis."""
from __future__ import annotations

import logging
import math
import re
import struct
from dataclasses import dataclass

import numpy as np

from .netcore.store import GradientRecord

log = logging.getLogger(__name__)

MASK_MAGIC = b"SCLMSK01"


class MaskFormatError(ValueError):
    """A mask file that cannot be decoded."""


@dataclass(frozen=True)
class SparsityBudget:
    ratio: float
    n_params: int

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"sparsity ratio must lie in (0, 1], got {self.ratio}")
        if self.n_params <= 0:
            raise ValueError("budget needs a positive parameter count")

    @property
    def resolved_k(self):
        k = math.floor(self.ratio * self.n_params)
        if k == 0:
            log.warning("ratio %g of %d parameters rounds to 0; using k=1", self.ratio, self.n_params)
            return 1
        return k


@dataclass(frozen=True, eq=False)
class GradientMask:
    indices: np.ndarray
    n_params: int
    source_estimator: str = ""
    task_id: str = ""

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("mask indices must be 1-D")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.n_params):
            raise ValueError("mask index out of range")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("mask indices must be strictly ascending")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def k(self):
        return self.indices.size

    def __eq__(self, other):
        return (isinstance(other, GradientMask) and self.n_params == other.n_params
                and self.source_estimator == other.source_estimator
                and self.task_id == other.task_id
                and np.array_equal(self.indices, other.indices))

    def __hash__(self):
        return hash((self.n_params, self.task_id, self.indices.tobytes()))

    def dense(self):
        out = np.zeros(self.n_params, dtype=bool)
        out[self.indices] = True
        return out


def full_mask(n_params, task_id="", source=""):
    return GradientMask(np.arange(n_params), n_params, source, task_id)


def select_topk(importance, budget, task_id="", exclude=None):
    """Indices of the k highest scores; equal scores prefer the lower index.

    Runs in expected O(|theta|): one ``np.partition`` finds the k-th largest
    value, then everything strictly above it is taken and the remaining
    slots are filled from the tied indices in ascending order. ``exclude``
    (global indices) are never selected.
    """
    scores = np.asarray(getattr(importance, "scores", importance), dtype=np.float64)
    tag = getattr(importance, "estimator_tag", "")
    n = scores.size
    if isinstance(budget, SparsityBudget):
        if budget.n_params != n:
            raise ValueError(f"budget is for {budget.n_params} parameters, importance has {n}")
        k = budget.resolved_k
    else:
        k = int(budget)
    if exclude is not None and len(exclude):
        scores = scores.copy()
        scores[np.asarray(exclude)] = -np.inf
        available = n - np.unique(exclude).size
    else:
        available = n
    if not 1 <= k <= available:
        raise ValueError(f"k={k} outside [1, {available}]")
    if np.any(np.isnan(scores)):
        raise ValueError("importance contains NaN")
    kth = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > kth)
    ties = np.flatnonzero(scores == kth)[: k - above.size]
    idx = np.sort(np.concatenate([above, ties]))
    return GradientMask(idx, n, tag, task_id)


def apply_mask(grad, mask):
    """Zero every gradient coordinate outside the mask."""
    values = grad.values if isinstance(grad, GradientRecord) else np.asarray(grad)
    if values.size != mask.n_params:
        raise ValueError(f"gradient length {values.size} != mask length {mask.n_params}")
    out = np.zeros_like(values)
    out[mask.indices] = values[mask.indices]
    if isinstance(grad, GradientRecord):
        return GradientRecord(out, grad.granularity, dict(grad.meta))
    return out


def mask_overlap(a, b):
    """|a ∩ b| / k for two masks with the same budget."""
    if a.n_params != b.n_params:
        raise ValueError("masks cover different parameter counts")
    if a.k != b.k:
        raise ValueError(f"mask budgets differ ({a.k} vs {b.k})")
    shared = np.intersect1d(a.indices, b.indices, assume_unique=True).size
    return shared / a.k


# --- layout -----------------------------------------------------------------

_KINDS = [
    (r"self_attn\.q_proj", "Q"), (r"self_attn\.k_proj", "K"), (r"self_attn\.v_proj", "V"),
    (r"self_attn\.o_proj", "O"), (r"mlp\.gate_proj", "G"), (r"mlp\.up_proj", "U"),
    (r"mlp\.down_proj", "D"), (r"input_layernorm", "IN"), (r"post_attention_layernorm", "PN"),
    (r"^norm\.", "N"), (r"^lm_head\.", "lm"), (r"^head\.", "lm"), (r"^embed_tokens\.", "E"),
    (r"^embed_positions\.", "P"), (r"\.linear\.", "FC"), (r"\.norm\.", "LN"),
]


def classify_entry(name):
    """Map an entry name to ``(layer, submodule kind)``.

    Layer is the integer after ``layers.``, or ``-1`` for model-level entries
    (embeddings, final norm, head). Unrecognized names land in ``other``.
    """
    m = re.match(r"layers\.(\d+)\.", name)
    layer = int(m.group(1)) if m else -1
    if ".lora_" in name:
        return layer, "lora"
    for pattern, kind in _KINDS:
        if re.search(pattern, name):
            return layer, kind
    return layer, "other"


@dataclass
class MaskLayout:
    rows: list  # (layer, kind, count, fraction, bucket_size)

    def total(self):
        return sum(r[2] for r in self.rows)

    def to_csv(self):
        lines = ["layer,submodule,count,fraction"]
        lines += [f"{layer},{kind},{count},{frac:.10g}" for layer, kind, count, frac, _ in self.rows]
        return "\n".join(lines) + "\n"


def mask_layout(mask, store):
    """Count selected parameters per (layer, submodule) bucket; empty buckets stay as 0."""
    if mask.n_params != store.size:
        raise ValueError("mask and store sizes differ")
    buckets = {}
    order = []
    for info in store.infos():
        key = classify_entry(info.name)
        if key not in buckets:
            buckets[key] = [0, 0]
            order.append(key)
        buckets[key][1] += info.size
    names = store.names
    for pos, cnt in zip(*np.unique(store.entry_of(mask.indices), return_counts=True)):
        buckets[classify_entry(names[pos])][0] += int(cnt)
    rows = [(layer, kind, buckets[(layer, kind)][0],
             buckets[(layer, kind)][0] / buckets[(layer, kind)][1], buckets[(layer, kind)][1])
            for layer, kind in order]
    return MaskLayout(rows)


# --- serialization ----------------------------------------------------------

def _varint(n):
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def delta_encode(indices):
    idx = np.asarray(indices, dtype=np.int64)
    return np.diff(idx, prepend=0) if idx.size else idx


def mask_to_bytes(mask):
    """Layout (little-endian)::

        8 bytes  magic b"SCLMSK01"
        u64      |theta|
        u64      k
        u16 + bytes  task_id (UTF-8)
        u16 + bytes  estimator tag (UTF-8)
        k LEB128 varints: first index, then successive differences
    """
    tid, tag = mask.task_id.encode(), mask.source_estimator.encode()
    head = [MASK_MAGIC, struct.pack("<QQ", mask.n_params, mask.k),
            struct.pack("<H", len(tid)), tid, struct.pack("<H", len(tag)), tag]
    body = b"".join(_varint(int(d)) for d in delta_encode(mask.indices))
    return b"".join(head) + body


def mask_from_bytes(buf):
    buf = bytes(buf)
    if buf[:8] != MASK_MAGIC:
        raise MaskFormatError("bad magic; not a mask file")
    try:
        n_params, k = struct.unpack_from("<QQ", buf, 8)
        pos = 24
        (tl,) = struct.unpack_from("<H", buf, pos)
        tid = buf[pos + 2:pos + 2 + tl].decode()
        pos += 2 + tl
        (gl,) = struct.unpack_from("<H", buf, pos)
        tag = buf[pos + 2:pos + 2 + gl].decode()
        pos += 2 + gl
    except (struct.error, UnicodeDecodeError) as exc:
        raise MaskFormatError(f"corrupt mask header: {exc}") from exc
    if pos > len(buf) or k > n_params:
        raise MaskFormatError("corrupt mask header")
    deltas = []
    cur = shift = 0
    for byte in buf[pos:]:
        cur |= (byte & 0x7F) << shift
        if byte & 0x80:
            shift += 7
        else:
            deltas.append(cur)
            cur = shift = 0
    if shift:
        raise MaskFormatError("truncated varint in mask payload")
    if len(deltas) != k:
        raise MaskFormatError(f"mask payload holds {len(deltas)} indices, header says {k}")
    idx = np.cumsum(np.asarray(deltas, dtype=np.int64))
    if idx.size and idx[-1] >= n_params:
        raise MaskFormatError(f"mask index {int(idx[-1])} out of range for |theta|={n_params}")
    if idx.size > 1 and np.any(np.diff(idx) <= 0):
        raise MaskFormatError("mask indices are not strictly ascending")
    return GradientMask(idx, int(n_params), tag, tid)


def save_mask(path, mask):
    with open(path, "wb") as fh:
        fh.write(mask_to_bytes(mask))


def load_mask(path):
    with open(path, "rb") as fh:
        return mask_from_bytes(fh.read())
