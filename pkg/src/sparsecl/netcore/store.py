"""Flat parameter storage and the binary checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"SCLCKPT1"


@dataclass(frozen=True)
class Adapter:
    """One low-rank adapter attached to a 2-D weight entry."""

    a_name: str
    b_name: str
    scaling: float
    dropout: float = 0.0


@dataclass(frozen=True)
class EntryInfo:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self):
        return self.offset + self.size


class ParameterStore:
    """Named, shaped parameters backed by one contiguous float64 vector.

    Every entry is a view into ``flat``, so global index ``i`` of the flat
    vector and ``(entry, offset)`` address the same number. Entry order is
    the insertion order and never changes.
    """

    def __init__(self, entries, adapters=None):
        infos = []
        offset = 0
        seen = set()
        arrays = []
        for name, value in entries:
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            arr = np.asarray(value, dtype=np.float64)
            if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
                raise ValueError(f"entry {name!r} has invalid shape {arr.shape}")
            infos.append(EntryInfo(name, tuple(int(d) for d in arr.shape), offset))
            offset += arr.size
            arrays.append(arr)
        self.flat = np.empty(offset, dtype=np.float64)
        for info, arr in zip(infos, arrays):
            self.flat[info.offset:info.stop] = arr.reshape(-1)
        self._infos = {info.name: info for info in infos}
        self._order = [info.name for info in infos]
        self._starts = np.array([info.offset for info in infos], dtype=np.int64)
        self.adapters = {k: tuple(v) for k, v in (adapters or {}).items()}

    def __len__(self):
        return self.flat.size

    @property
    def size(self):
        return self.flat.size

    @property
    def names(self):
        return list(self._order)

    def __contains__(self, name):
        return name in self._infos

    def __getitem__(self, name):
        info = self._infos[name]
        return self.flat[info.offset:info.stop].reshape(info.shape)

    def info(self, name):
        return self._infos[name]

    def infos(self):
        return [self._infos[n] for n in self._order]

    def entries(self):
        return [(n, self[n]) for n in self._order]

    def entry_slice(self, name):
        info = self._infos[name]
        return slice(info.offset, info.stop)

    def locate(self, index):
        """Map a global flat index to ``(entry name, offset within entry)``."""
        if not 0 <= index < self.flat.size:
            raise IndexError(f"parameter index {index} out of range [0, {self.flat.size})")
        k = int(np.searchsorted(self._starts, index, side="right")) - 1
        name = self._order[k]
        return name, int(index - self._infos[name].offset)

    def entry_of(self, indices):
        """Vectorised ``locate``: position in ``names`` for each global index."""
        return np.searchsorted(self._starts, np.asarray(indices), side="right") - 1

    def copy(self):
        return ParameterStore(self.entries(), adapters=self.adapters)

    def with_entries(self, extra, adapters=None):
        """New store with ``extra`` entries appended after the existing ones."""
        merged = dict(self.adapters)
        for target, items in (adapters or {}).items():
            merged[target] = tuple(merged.get(target, ())) + tuple(items)
        return ParameterStore(self.entries() + list(extra), adapters=merged)

    def indices_of(self, names):
        """Sorted global indices covering the given entries."""
        parts = [np.arange(self._infos[n].offset, self._infos[n].stop) for n in names]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts)).astype(np.int64)

    def equals(self, other):
        return (self._order == other._order
                and all(self._infos[n].shape == other._infos[n].shape for n in self._order)
                and np.array_equal(self.flat, other.flat))


def _adapters_to_json(adapters):
    return {t: [a.__dict__ for a in items] for t, items in adapters.items()}


def _adapters_from_json(blob):
    return {t: tuple(Adapter(**a) for a in items) for t, items in blob.items()}


def save_checkpoint(path, store, config=None, extra=None):
    """Write ``store`` (and an optional JSON-able config) to ``path``.

    Layout, all little-endian::

        8 bytes   magic b"SCLCKPT1"
        u32       header length H
        H bytes   UTF-8 JSON header {"config", "adapters", "extra"}
        u32       entry count
        per entry:
          u16 name length, name bytes (UTF-8)
          u8  ndim, ndim x u64 extents
          float64 payload, row-major
    """
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(store, config, extra))


def checkpoint_bytes(store, config=None, extra=None):
    header = json.dumps({"config": config, "adapters": _adapters_to_json(store.adapters),
                         "extra": extra or {}}, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header,
           struct.pack("<I", len(store.names))]
    for name, arr in store.entries():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Read a checkpoint; returns ``(store, config, extra)``."""
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def checkpoint_from_bytes(buf):
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(bytes(take(hlen)).decode())
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        entries.append((name, arr))
    if pos != len(view):
        raise CheckpointError("trailing bytes after last entry")
    store = ParameterStore(entries, adapters=_adapters_from_json(header.get("adapters", {})))
    return store, header.get("config"), header.get("extra", {})


@dataclass
class GradientRecord:
    """Flat gradient aligned with a store's global index."""

    values: np.ndarray
    granularity: str = "per-batch"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.values.size
