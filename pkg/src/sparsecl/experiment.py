"""Manifest-driven runs and the analysis/report artifacts built from their outputs."""
from __future__ import annotations

import csv
import glob
import io
import json
import os
from dataclasses import replace

import numpy as np

from .continual import get_strategy, run_sequence
from .importance import save_importance
from .manifest import manifest_summary
from .masking import load_mask, mask_layout, mask_overlap
from .metrics import ScoreMatrix, correlate, forgetting_rate, mean_forgetting, series
from .netcore.models import build_model
from .netcore.store import load_checkpoint


class RunFailure(RuntimeError):
    pass


def run_dirname(strategy, ratio, seed):
    tag = strategy if ratio is None else f"{strategy}-r{ratio:g}"
    return os.path.join(tag, f"seed-{seed}")


def metrics_payload(state, strategy, ratio, seed, tasks, provenance):
    R = state.scores
    return {
        "strategy": strategy, "ratio": ratio, "seed": seed,
        "tasks": [t.fingerprint() for t in tasks],
        "R": R.to_list(), **series(R),
        "final_scores": R.row(R.n_tasks), "mean_forgetting": mean_forgetting(R),
        "n_masks": len(state.masks), "provenance": provenance,
    }


def execute(manifest, ratio, seed, root=None, tasks=None):
    """Run one (ratio, seed) entry of a manifest; returns the run directory."""
    root = root or manifest.output_dir
    out = os.path.join(root, run_dirname(manifest.strategy, ratio, seed))
    os.makedirs(out, exist_ok=True)
    tasks = tasks if tasks is not None else manifest.build_tasks()
    hp = dict(manifest.hyperparameters)
    if ratio is not None:
        hp["ratio"] = ratio
    store, forward = build_model(replace(manifest.model, seed=seed))
    opt = replace(manifest.optimizer, seed=seed)
    prov = manifest.provenance()
    try:
        state = run_sequence((store, forward), tasks, get_strategy(manifest.strategy, **hp), opt,
                             out_dir=out, replay_fraction=manifest.replay_fraction, provenance=prov)
    except Exception as exc:
        raise RunFailure(f"seed {seed}{'' if ratio is None else f', ratio {ratio:g}'}: {exc}") from exc
    os.makedirs(os.path.join(out, "importance"), exist_ok=True)
    for t, imp in enumerate(state.importances, start=1):
        save_importance(os.path.join(out, "importance", f"task{t}.imp"), imp)
    _write_json(os.path.join(out, "manifest.json"), manifest_summary(manifest))
    _write_json(os.path.join(out, "metrics.json"),
                metrics_payload(state, manifest.strategy, ratio, seed, tasks, prov))
    with open(os.path.join(out, "access_log.jsonl"), "w", encoding="utf-8") as fh:
        for rec in state.access.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_metrics(run_dir):
    with open(os.path.join(run_dir, "metrics.json"), encoding="utf-8") as fh:
        return json.load(fh)


# --- analysis -----------------------------------------------------------------

def _sorted_masks(paths):
    def key(p):
        stem = os.path.basename(p).split(".")[0]
        digits = "".join(ch for ch in stem if ch.isdigit())
        return (int(digits) if digits else 0, p)
    return sorted(paths, key=key)


def overlap_matrix(masks):
    n = len(masks)
    M = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            M[i, j] = M[j, i] = mask_overlap(masks[i], masks[j])
    return M


def overlap_forgetting_pairs(masks, R):
    """(overlap(M_i, M_t), forgetting R[i,i] - R[t,i]) for every i < t."""
    xs, ys = [], []
    for t in range(2, R.n_tasks + 1):
        for i in range(1, t):
            xs.append(mask_overlap(masks[i - 1], masks[t - 1]))
            ys.append(forgetting_rate(R, i, t))
    return xs, ys


def analyze(paths, out_dir, checkpoint=None):
    """Layout CSVs, overlap matrix CSV and overlap-vs-forgetting correlation.

    ``paths`` is either one run directory or a list of mask files. Returns
    a dict of the written file paths plus the correlation block.
    """
    run_dir = paths[0] if len(paths) == 1 and os.path.isdir(paths[0]) else None
    mask_paths = _sorted_masks(glob.glob(os.path.join(run_dir, "masks", "*.mask"))) if run_dir else list(paths)
    if len(mask_paths) < 2:
        raise ValueError(f"need at least 2 masks for overlap analysis, found {len(mask_paths)}")
    masks = [load_mask(p) for p in mask_paths]
    os.makedirs(out_dir, exist_ok=True)
    written = {}

    if checkpoint is None and run_dir:
        checkpoint = os.path.join(run_dir, "checkpoints", "task1_pre.ckpt")
    if checkpoint and os.path.exists(checkpoint):
        store, _, _ = load_checkpoint(checkpoint)
        for t, m in enumerate(masks, start=1):
            path = os.path.join(out_dir, f"layout_task{t}.csv")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(mask_layout(m, store).to_csv())
            written[f"layout_task{t}"] = path

    M = overlap_matrix(masks)
    path = os.path.join(out_dir, "overlap.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task"] + [f"task{j + 1}" for j in range(len(masks))])
        for i, row in enumerate(M):
            w.writerow([f"task{i + 1}"] + [f"{v:.10g}" for v in row])
    written["overlap"] = path

    result = {"files": written, "overlap": M.tolist()}
    if run_dir and os.path.exists(os.path.join(run_dir, "metrics.json")):
        met = read_metrics(run_dir)
        R = ScoreMatrix(met["R"])
        xs, ys = overlap_forgetting_pairs(masks, R)
        block = {"pairs": [{"overlap": x, "forgetting": y} for x, y in zip(xs, ys)]}
        if len(xs) >= 3:
            block.update(correlate(xs, ys).to_dict())
        else:
            block["status"] = "insufficient"
        block["provenance"] = met.get("provenance")
        path = os.path.join(out_dir, "correlation.json")
        _write_json(path, block)
        written["correlation"] = path
        result["correlation"] = block
    return result


# --- report -------------------------------------------------------------------

class IncompatibleRuns(ValueError):
    pass


def collect_runs(paths):
    found = []
    for p in paths:
        if os.path.exists(os.path.join(p, "metrics.json")):
            found.append(p)
        else:
            found += sorted(os.path.dirname(m) for m in
                            glob.glob(os.path.join(p, "**", "metrics.json"), recursive=True))
    if not found:
        raise ValueError("no completed runs (metrics.json) under the given paths")
    return sorted(set(found))


def build_report(paths):
    """Per-strategy rows: mean final per-task scores, OP and BWT with seed mean and stddev."""
    runs = [read_metrics(d) for d in collect_runs(paths)]
    ref = runs[0]["tasks"]
    for r in runs[1:]:
        if r["tasks"] != ref:
            diff = [f"task {i + 1}: {a} != {b}" for i, (a, b) in
                    enumerate(zip(ref, r["tasks"])) if a != b]
            if len(ref) != len(r["tasks"]):
                diff.append(f"task count {len(ref)} != {len(r['tasks'])}")
            raise IncompatibleRuns("runs use different task sequences:\n  " + "\n  ".join(diff))
    groups = {}
    for r in runs:
        label = r["strategy"] if r["ratio"] is None else f"{r['strategy']}@{r['ratio']:g}"
        groups.setdefault(label, []).append(r)
    rows = []
    for label, items in groups.items():
        finals = np.array([it["final_scores"] for it in items])
        op = np.array([it["OP"][-1] for it in items])
        bwt = np.array([it["BWT"][-1] for it in items])
        rows.append({"strategy": label, "seeds": len(items),
                     "final": finals.mean(axis=0).tolist(),
                     "OP_mean": float(op.mean()), "OP_std": float(op.std()),
                     "BWT_mean": float(bwt.mean()), "BWT_std": float(bwt.std())})
    rows.sort(key=lambda r: (-r["OP_mean"], r["strategy"]))
    header = (["strategy", "seeds"] + [f"task{i + 1}" for i in range(len(ref))]
              + ["OP_mean", "OP_std", "BWT_mean", "BWT_std"])
    return header, rows


def report_rows(header, rows):
    return [[r["strategy"], r["seeds"], *r["final"], r["OP_mean"], r["OP_std"], r["BWT_mean"],
             r["BWT_std"]] for r in rows]


def report_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for vals in report_rows(header, rows):
        w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in vals])
    return buf.getvalue()


def report_text(header, rows):
    cells = [header] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in vals]
                        for vals in report_rows(header, rows)]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
