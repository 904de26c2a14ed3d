"""Synthetic task streams and JSONL task ingestion/export.

Every generator is a pure function of its config. A classification task
stores ``train``/``eval`` as ``(features, labels)``; a generation task
stores teacher-forced ``(inputs, targets)`` arrays (prompt positions carry
the ignore label -100) plus the raw ``(prompt, completion)`` pairs used for
greedy-decoding evaluation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

IGNORE = -100
KINDS = ("gaussian-clusters", "permuted-features", "split-labels", "char-sequence")


class TaskIngestError(ValueError):
    def __init__(self, path, problems):
        self.path = path
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems[:20])
        super().__init__(f"{path}: {len(problems)} malformed line(s): {lines}")


@dataclass
class TaskSpec:
    task_id: str
    train: tuple
    eval: tuple
    kind: str = "classification"
    n_classes: int = 0
    train_pairs: list = field(default_factory=list)
    eval_pairs: list = field(default_factory=list)

    @property
    def metric(self):
        return "accuracy" if self.kind == "classification" else "text"

    def __post_init__(self):
        if len(self.train[1]) == 0 or len(self.eval[1]) == 0:
            raise ValueError(f"task {self.task_id!r}: train and eval sets must be nonempty")

    def fingerprint(self):
        """Shape-level identity used to refuse comparing runs on different tasks."""
        return {"task_id": self.task_id, "kind": self.kind, "n_train": int(len(self.train[1])),
                "n_eval": int(len(self.eval[1]))}


@dataclass
class SyntheticTaskConfig:
    kind: str = "gaussian-clusters"
    dim: int = 20
    n_classes: int = 5
    n_train: int = 1000
    n_eval: int = 500
    seed: int = 0
    drift: float = math.pi / 2
    task_index: int = 0
    stream_seed: int = 0
    separation: float = 3.0
    noise: float = 1.0
    classes_per_task: int = 2
    vocab_size: int = 16
    prompt_len: int = 4
    completion_len: int = 4
    task_id: str | None = None

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator {self.kind!r}; expected one of {KINDS}")
        if self.n_train <= 0 or self.n_eval <= 0:
            raise ValueError("n_train and n_eval must be positive")
        if self.kind != "char-sequence" and (self.n_classes <= 0 or self.dim <= 0):
            raise ValueError("n_classes and dim must be positive")
        if self.kind == "gaussian-clusters" and self.dim < self.n_classes:
            raise ValueError("gaussian-clusters needs dim >= n_classes")
        if self.kind == "char-sequence" and self.vocab_size < 3:
            raise ValueError("char-sequence needs vocab_size >= 3")
        return self

    def to_dict(self):
        return asdict(self)


def _split(x, y, n_train):
    return (x[:n_train], y[:n_train]), (x[n_train:], y[n_train:])


def _orthonormal(rng, dim):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def _cluster_means(cfg):
    """Class means after ``task_index`` rotations of angle ``drift``.

    The base means live in the span of a first block of orthonormal
    directions; each rotation turns every mean toward the matching direction
    of the next block (wrapping around), so with drift pi/2 consecutive tasks
    occupy orthogonal subspaces.
    """
    geo = np.random.default_rng([cfg.stream_seed, 7919])
    basis = _orthonormal(geo, cfg.dim)
    C = cfg.n_classes
    n_blocks = max(1, cfg.dim // C)
    coef = _orthonormal(geo, C) * cfg.separation  # row c: class c's coordinates in a block
    means = coef @ basis[:C]
    for step in range(cfg.task_index):
        nxt = basis[((step + 1) % n_blocks) * C:((step + 1) % n_blocks) * C + C]
        if n_blocks == 1:
            nxt = basis[:C][::-1]
        means = math.cos(cfg.drift) * means + math.sin(cfg.drift) * (coef @ nxt)
    return means


def _gaussian(cfg):
    means = _cluster_means(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    n = cfg.n_train + cfg.n_eval
    y = rng.integers(0, cfg.n_classes, size=n)
    x = means[y] + cfg.noise * rng.normal(size=(n, cfg.dim))
    return x, y


def _permuted(cfg):
    base = SyntheticTaskConfig(**{**cfg.to_dict(), "kind": "gaussian-clusters", "task_index": 0})
    x, y = _gaussian(base)
    if cfg.task_index > 0:
        rng = np.random.default_rng([cfg.stream_seed, cfg.task_index, 31])
        n_move = int(round(min(1.0, max(0.0, cfg.drift)) * cfg.dim))
        perm = np.arange(cfg.dim)
        chosen = np.sort(rng.choice(cfg.dim, size=n_move, replace=False))
        perm[chosen] = rng.permutation(chosen)
        x = x[:, perm]
    return x, y


def _split_labels(cfg):
    C, k = cfg.n_classes, cfg.classes_per_task
    lo = (cfg.task_index * k) % C
    classes = np.array([(lo + j) % C for j in range(k)])
    full = SyntheticTaskConfig(**{**cfg.to_dict(), "kind": "gaussian-clusters", "task_index": 0})
    means = _cluster_means(full)
    rng = np.random.default_rng([cfg.seed, 2, cfg.task_index])
    n = cfg.n_train + cfg.n_eval
    y = classes[rng.integers(0, k, size=n)]
    x = means[y] + cfg.noise * rng.normal(size=(n, cfg.dim))
    return x, y


def _grammar(cfg):
    """Affine successor rule next = (a * prev + b + c * prevprev) mod V for this task."""
    V = cfg.vocab_size
    base = np.random.default_rng([cfg.stream_seed, 5])
    a0, b0, c0 = int(base.integers(1, V)), int(base.integers(0, V)), int(base.integers(0, V))
    if cfg.drift == 0 or cfg.task_index == 0:
        return a0, b0, c0
    rng = np.random.default_rng([cfg.stream_seed, 5, cfg.task_index])
    return int(rng.integers(1, V)), int(rng.integers(0, V)), int(rng.integers(0, V))


def _char_sequence(cfg):
    V, P, Lc = cfg.vocab_size, cfg.prompt_len, cfg.completion_len
    a, b, c = _grammar(cfg)
    n = cfg.n_train + cfg.n_eval
    space = V ** P
    if n > space:
        raise ValueError(f"char-sequence: {n} samples exceed {space} distinct prompts")
    rng = np.random.default_rng([cfg.seed, 3])
    codes = rng.choice(space, size=n, replace=False)
    pairs = []
    for code in codes:
        prompt = [int(code // V ** j) % V for j in range(P)]
        seq = list(prompt)
        for _ in range(Lc):
            seq.append((a * seq[-1] + b + c * seq[-2]) % V if len(seq) > 1 else (a * seq[-1] + b) % V)
        pairs.append((prompt, seq[P:]))
    return pairs


def pairs_to_arrays(pairs):
    """Teacher-forced inputs/targets, right-padded with token 0 / IGNORE."""
    L = max(len(p) + len(c) for p, c in pairs) - 1
    x = np.zeros((len(pairs), L), dtype=np.int64)
    y = np.full((len(pairs), L), IGNORE, dtype=np.int64)
    for r, (p, c) in enumerate(pairs):
        seq = list(p) + list(c)
        x[r, :len(seq) - 1] = seq[:-1]
        y[r, len(p) - 1:len(seq) - 1] = seq[len(p):]
    return x, y


def generation_task(task_id, train_pairs, eval_pairs):
    return TaskSpec(task_id, pairs_to_arrays(train_pairs), pairs_to_arrays(eval_pairs),
                    kind="generation", train_pairs=list(train_pairs), eval_pairs=list(eval_pairs))


def generate_task(cfg):
    cfg.validate()
    tid = cfg.task_id or f"{cfg.kind}-{cfg.task_index}"
    if cfg.kind == "char-sequence":
        pairs = _char_sequence(cfg)
        tr, ev = pairs[:cfg.n_train], pairs[cfg.n_train:]
        assert not {tuple(p) for p, _ in tr} & {tuple(p) for p, _ in ev}
        return generation_task(tid, tr, ev)
    gen = {"gaussian-clusters": _gaussian, "permuted-features": _permuted,
           "split-labels": _split_labels}[cfg.kind]
    x, y = gen(cfg)
    train, ev = _split(x, y, cfg.n_train)
    return TaskSpec(tid, train, ev, "classification", cfg.n_classes)


def generate_sequence(configs):
    if not configs:
        raise ValueError("generate_sequence needs at least one config")
    return [generate_task(c) for c in configs]


def default_stream(n_tasks=3, seed=0, **overrides):
    """Desk-scale stream: gaussian clusters, 20-dim, 5 classes, 1000/500 samples per task."""
    return [SyntheticTaskConfig(**{"kind": "gaussian-clusters", "task_index": t, "seed": seed * 1000 + t,
                                   "stream_seed": seed, "task_id": f"task{t + 1}", **overrides})
            for t in range(n_tasks)]


# --- JSONL ------------------------------------------------------------------

SCHEMAS = ("features+label", "prompt+completion")


def _int_list(v):
    return isinstance(v, list) and v and all(isinstance(t, int) and not isinstance(t, bool) for t in v)


def ingest_jsonl(path, schema, task_id=None, n_classes=None, eval_fraction=0.2):
    """Read one sample per line into a TaskSpec.

    ``features+label`` lines look like ``{"features": [floats], "label": int}``;
    ``prompt+completion`` lines like ``{"prompt": [ints], "completion": [ints]}``.
    An optional ``"split": "train" | "eval"`` field assigns the sample; when
    no line carries it, the last ``eval_fraction`` of lines become eval.
    All malformed lines are reported together.
    """
    if schema not in SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")
    problems, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                problems.append((n, f"invalid JSON ({exc.msg})"))
                continue
            if not isinstance(obj, dict):
                problems.append((n, "expected a JSON object"))
                continue
            split = obj.get("split")
            if split not in (None, "train", "eval"):
                problems.append((n, f"split must be 'train' or 'eval', got {split!r}"))
                continue
            if schema == "features+label":
                feats, label = obj.get("features"), obj.get("label")
                if "label" not in obj:
                    problems.append((n, "missing field 'label'"))
                elif not isinstance(label, int) or isinstance(label, bool) or label < 0:
                    problems.append((n, "label must be a nonnegative integer"))
                elif not isinstance(feats, list) or not feats or not all(
                        isinstance(f, (int, float)) and not isinstance(f, bool) for f in feats):
                    problems.append((n, "features must be a nonempty list of numbers"))
                else:
                    rows.append((n, split, (feats, label)))
            else:
                p, c = obj.get("prompt"), obj.get("completion")
                if not _int_list(p):
                    problems.append((n, "prompt must be a nonempty list of token ids"))
                elif not _int_list(c):
                    problems.append((n, "completion must be a nonempty list of token ids"))
                else:
                    rows.append((n, split, (p, c)))
    if not rows and not problems:
        raise TaskIngestError(path, [(0, "file holds no samples")])
    if schema == "features+label" and rows:
        width = len(rows[0][2][0])
        problems += [(n, f"expected {width} features, got {len(s[0])}") for n, _, s in rows
                     if len(s[0]) != width]
    if problems:
        raise TaskIngestError(path, sorted(problems))
    if all(split is None for _, split, _ in rows):
        n_eval = max(1, int(round(eval_fraction * len(rows))))
        splits = ["train"] * (len(rows) - n_eval) + ["eval"] * n_eval
    else:
        splits = [split or "train" for _, split, _ in rows]
    train = [s for (_, _, s), sp in zip(rows, splits) if sp == "train"]
    ev = [s for (_, _, s), sp in zip(rows, splits) if sp == "eval"]
    tid = task_id or str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    if schema == "prompt+completion":
        return generation_task(tid, [(list(p), list(c)) for p, c in train],
                               [(list(p), list(c)) for p, c in ev])

    def arrays(items):
        return (np.array([f for f, _ in items], dtype=np.float64),
                np.array([lab for _, lab in items], dtype=np.int64))

    labels = [lab for _, lab in train + ev]
    return TaskSpec(tid, arrays(train), arrays(ev), "classification",
                    n_classes or (max(labels) + 1))


def export_jsonl(task, path):
    """Write a task so that ``ingest_jsonl`` rebuilds it exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        if task.kind == "generation":
            for split, pairs in (("train", task.train_pairs), ("eval", task.eval_pairs)):
                for p, c in pairs:
                    fh.write(json.dumps({"split": split, "prompt": list(map(int, p)),
                                         "completion": list(map(int, c))}) + "\n")
            return
        for split, (x, y) in (("train", task.train), ("eval", task.eval)):
            for row, label in zip(x, y):
                fh.write(json.dumps({"split": split, "features": [float(v) for v in row],
                                     "label": int(label)}) + "\n")
