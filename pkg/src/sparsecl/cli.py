"""Command line: ``sparsecl {run,importance,analyze,report,export-task}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .experiment import (IncompatibleRuns, RunFailure, analyze, build_report, execute, report_csv,
                         report_text)
from .importance import DEFAULT_XI, ESTIMATORS, estimate, save_importance
from .manifest import ManifestError, load_manifest
from .netcore.models import ModelConfig, make_forward
from .netcore.store import CheckpointError, load_checkpoint
from .tasks import SCHEMAS, TaskIngestError, export_jsonl, ingest_jsonl

log = logging.getLogger("sparsecl")


def _run_one(args):
    manifest_path, ratio, seed, root = args
    return execute(load_manifest(manifest_path), ratio, seed, root=root)


def cmd_run(ns):
    try:
        manifest = load_manifest(ns.manifest)
        manifest.build_tasks()
    except (ManifestError, TaskIngestError) as exc:
        print(exc, file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read manifest: {exc}", file=sys.stderr)
        return 2
    root = ns.output_dir or manifest.output_dir
    jobs = [(ns.manifest, r, s, root) for r, s in manifest.runs()]
    failures = 0
    if ns.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ns.workers) as pool:
            futures = [pool.submit(_run_one, j) for j in jobs]
            for fut in futures:
                try:
                    print(fut.result())
                except RunFailure as exc:
                    failures += 1
                    print(f"run failed: {exc}", file=sys.stderr)
    else:
        for j in jobs:
            try:
                print(_run_one(j))
            except RunFailure as exc:
                failures += 1
                print(f"run failed: {exc}", file=sys.stderr)
    return 1 if failures else 0


def cmd_importance(ns):
    try:
        store, config, _ = load_checkpoint(ns.checkpoint)
    except (OSError, CheckpointError) as exc:
        print(f"cannot read checkpoint: {exc}", file=sys.stderr)
        return 2
    if config is None:
        if ns.model_config is None:
            print("checkpoint has no model config; pass --model-config", file=sys.stderr)
            return 2
        with open(ns.model_config, encoding="utf-8") as fh:
            config = json.load(fh)
    forward = make_forward(ModelConfig.from_dict(config))
    try:
        task = ingest_jsonl(ns.data, ns.schema)
    except (OSError, TaskIngestError) as exc:
        print(exc, file=sys.stderr)
        return 2
    data = task.train if ns.split == "train" else task.eval
    try:
        imp = estimate(forward, store, data, ns.estimator, ns.xi)
    except (ValueError, KeyError) as exc:
        print(f"checkpoint and dataset do not fit together: {exc}", file=sys.stderr)
        return 2
    save_importance(ns.out, imp)
    print(ns.out)
    return 0


def cmd_analyze(ns):
    try:
        res = analyze(ns.paths, ns.out, checkpoint=ns.checkpoint)
    except (ValueError, OSError) as exc:
        print(exc, file=sys.stderr)
        return 2
    for path in res["files"].values():
        print(path)
    return 0


def cmd_report(ns):
    try:
        header, rows = build_report(ns.runs)
    except IncompatibleRuns as exc:
        print(exc, file=sys.stderr)
        return 2
    except ValueError as exc:
        print(exc, file=sys.stderr)
        return 2
    text = report_text(header, rows)
    sys.stdout.write(text)
    if ns.out:
        with open(ns.out + ".csv", "w", encoding="utf-8") as fh:
            fh.write(report_csv(header, rows))
        with open(ns.out + ".txt", "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def cmd_export_task(ns):
    try:
        manifest = load_manifest(ns.manifest)
        tasks = manifest.build_tasks()
    except (ManifestError, TaskIngestError, OSError) as exc:
        print(exc, file=sys.stderr)
        return 2
    if not 1 <= ns.task <= len(tasks):
        print(f"--task must lie in [1, {len(tasks)}]", file=sys.stderr)
        return 2
    export_jsonl(tasks[ns.task - 1], ns.out)
    print(ns.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="sparsecl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every (ratio, seed) entry of a manifest")
    r.add_argument("manifest")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--output-dir", default=None, help="override the manifest's output_dir")
    r.set_defaults(func=cmd_run)

    i = sub.add_parser("importance", help="estimate importance for a checkpoint on a JSONL dataset")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--schema", choices=SCHEMAS, default="features+label")
    i.add_argument("--split", choices=("train", "eval"), default="train")
    i.add_argument("--estimator", choices=ESTIMATORS, required=True)
    i.add_argument("--xi", type=float, default=DEFAULT_XI)
    i.add_argument("--model-config", default=None)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_importance)

    a = sub.add_parser("analyze", help="mask layout, overlap and overlap-vs-forgetting correlation")
    a.add_argument("paths", nargs="+", help="a run directory, or two or more mask files")
    a.add_argument("--checkpoint", default=None, help="checkpoint supplying entry names for layouts")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    rp = sub.add_parser("report", help="comparison table over completed runs")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--out", default=None, help="write <out>.csv and <out>.txt")
    rp.set_defaults(func=cmd_report)

    e = sub.add_parser("export-task", help="write one manifest task as JSONL")
    e.add_argument("manifest")
    e.add_argument("--task", type=int, required=True, help="1-based task position")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export_task)
    return p


def main(argv=None):
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="raise", under="ignore")
    return ns.func(ns)


if __name__ == "__main__":
    sys.exit(main())
