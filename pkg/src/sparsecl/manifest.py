"""Experiment manifests: strict TOML validation into plain config objects."""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .continual import REGISTRY, OptimizerConfig, get_strategy
from .netcore.models import ModelConfig
from .tasks import SCHEMAS, SyntheticTaskConfig, default_stream, generate_sequence, ingest_jsonl


class ManifestError(ValueError):
    def __init__(self, problems):
        self.problems = problems
        super().__init__("invalid manifest:\n" + "\n".join(f"  {p}" for p in problems))


@dataclass
class ExperimentManifest:
    model: ModelConfig
    tasks: list  # SyntheticTaskConfig or {"path", "schema", "task_id"} dicts
    strategy: str
    hyperparameters: dict
    optimizer: OptimizerConfig
    seeds: list = field(default_factory=lambda: [42])
    sparsity_ratios: list = field(default_factory=list)
    output_dir: str = "runs"
    replay_fraction: float = 0.01
    sha256: str = ""

    def build_tasks(self):
        if all(isinstance(t, SyntheticTaskConfig) for t in self.tasks):
            return generate_sequence(self.tasks)
        return [generate_sequence([t])[0] if isinstance(t, SyntheticTaskConfig)
                else ingest_jsonl(t["path"], t["schema"], task_id=t.get("task_id"))
                for t in self.tasks]

    def provenance(self):
        return {"manifest_sha256": self.sha256, "code_version": __version__}

    def runs(self):
        """(ratio or None, seed) pairs: one run per sparsity ratio and seed."""
        ratios = self.sparsity_ratios or [None]
        return [(r, s) for r in ratios for s in self.seeds]


_TOP = {"output_dir", "seeds", "sparsity_ratios", "model", "tasks", "strategy", "optimizer",
        "replay_fraction"}


def _known(cls):
    return {f.name for f in fields(cls)}


def _check_keys(section, table, allowed, problems):
    for key in sorted(set(table) - set(allowed)):
        problems.append(f"{section}.{key}: unknown key")


def parse_manifest(text, sha256=""):
    """Validate a manifest TOML string; every problem is collected before raising."""
    problems = []
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ManifestError([f"TOML syntax: {exc}"]) from exc
    _check_keys("<root>", raw, _TOP, problems)
    missing = [req for req in ("model", "tasks", "strategy") if req not in raw]
    if missing:
        raise ManifestError(problems + [f"{req}: missing required table" for req in missing])

    model_t = raw["model"]
    _check_keys("model", model_t, _known(ModelConfig), problems)
    model = None
    if not set(model_t) - _known(ModelConfig):
        try:
            model = ModelConfig(**model_t).validate()
        except (TypeError, ValueError) as exc:
            problems.append(f"model: {exc}")

    tasks = []
    tasks_t = raw["tasks"]
    _check_keys("tasks", tasks_t, {"synthetic", "jsonl", "default_stream"}, problems)
    if "default_stream" in tasks_t:
        ds = dict(tasks_t["default_stream"])
        n = ds.pop("n_tasks", 3)
        seed = ds.pop("seed", 0)
        _check_keys("tasks.default_stream", ds, _known(SyntheticTaskConfig), problems)
        if not set(ds) - _known(SyntheticTaskConfig):
            tasks += default_stream(n, seed, **ds)
    for i, entry in enumerate(tasks_t.get("synthetic", [])):
        _check_keys(f"tasks.synthetic[{i}]", entry, _known(SyntheticTaskConfig), problems)
        if not set(entry) - _known(SyntheticTaskConfig):
            try:
                cfg = SyntheticTaskConfig(**entry).validate()
                if cfg.task_id is None:
                    cfg.task_id = f"task{len(tasks) + 1}"
                tasks.append(cfg)
            except (TypeError, ValueError) as exc:
                problems.append(f"tasks.synthetic[{i}]: {exc}")
    for i, entry in enumerate(tasks_t.get("jsonl", [])):
        _check_keys(f"tasks.jsonl[{i}]", entry, {"path", "schema", "task_id"}, problems)
        if "path" not in entry:
            problems.append(f"tasks.jsonl[{i}].path: missing")
        if entry.get("schema") not in SCHEMAS:
            problems.append(f"tasks.jsonl[{i}].schema: must be one of {SCHEMAS}")
        tasks.append(dict(entry))
    if not tasks:
        problems.append("tasks: no tasks defined")

    strat_t = dict(raw["strategy"])
    name = strat_t.pop("name", None)
    get_strategy("seqft")  # populate the registry
    hp = {}
    if name is None:
        problems.append("strategy.name: missing")
    elif name not in REGISTRY:
        problems.append(f"strategy.name: unknown strategy {name!r}; valid: {sorted(REGISTRY)}")
    for key, table in strat_t.items():
        if key not in REGISTRY:
            problems.append(f"strategy.{key}: unknown key (per-strategy tables must be named after a strategy)")
            continue
        if not isinstance(table, dict):
            problems.append(f"strategy.{key}: expected a table")
            continue
        _check_keys(f"strategy.{key}", table, REGISTRY[key].defaults, problems)
        if key == name:
            hp = dict(table)

    opt_t = raw.get("optimizer", {})
    _check_keys("optimizer", opt_t, _known(OptimizerConfig), problems)
    optimizer = None
    if not set(opt_t) - _known(OptimizerConfig):
        try:
            optimizer = OptimizerConfig(**opt_t).validate()
        except (TypeError, ValueError) as exc:
            problems.append(f"optimizer: {exc}")

    seeds = raw.get("seeds", [42])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        problems.append("seeds: must be a nonempty list of integers")
    ratios = raw.get("sparsity_ratios", [])
    if not isinstance(ratios, list) or not all(
            isinstance(r, (int, float)) and 0 < r <= 1 and math.isfinite(r) for r in ratios):
        problems.append("sparsity_ratios: must be a list of numbers in (0, 1]")
    elif ratios and name in REGISTRY and "ratio" not in REGISTRY[name].defaults:
        problems.append(f"sparsity_ratios: strategy {name!r} has no sparsity ratio")
    rf = raw.get("replay_fraction", 0.01)
    if not isinstance(rf, (int, float)) or not 0 < rf <= 1:
        problems.append("replay_fraction: must lie in (0, 1]")
    out = raw.get("output_dir", "runs")
    if not isinstance(out, str) or not out:
        problems.append("output_dir: must be a nonempty string")
    if problems:
        raise ManifestError(problems)
    return ExperimentManifest(model, tasks, name, hp, optimizer, list(seeds),
                              [float(r) for r in ratios], out, float(rf), sha256)


def load_manifest(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    m = parse_manifest(blob.decode("utf-8"), hashlib.sha256(blob).hexdigest())
    base = os.path.dirname(os.path.abspath(path))
    for t in m.tasks:
        if isinstance(t, dict) and not os.path.isabs(t["path"]):
            t["path"] = os.path.join(base, t["path"])  # JSONL paths are relative to the manifest
    return m


def manifest_summary(m):
    """JSON-able view of a validated manifest (written next to every run)."""
    tasks = [t.to_dict() if isinstance(t, SyntheticTaskConfig) else t for t in m.tasks]
    return json.loads(json.dumps({
        "model": m.model.to_dict(), "tasks": tasks, "strategy": m.strategy,
        "hyperparameters": m.hyperparameters, "optimizer": m.optimizer.__dict__,
        "seeds": m.seeds, "sparsity_ratios": m.sparsity_ratios,
        "replay_fraction": m.replay_fraction, "provenance": m.provenance()}))
