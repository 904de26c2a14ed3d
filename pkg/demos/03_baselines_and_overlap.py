"""
Baselines, and does mask overlap predict forgetting?
====================================================

A few baselines on a smaller stream, then the per-pair analysis: for every
earlier task i and later task t, how much do the masks of i and t overlap,
and how much of task i was lost by the end of t.
"""
from sparsecl.continual import OptimizerConfig, get_strategy, run_sequence
from sparsecl.experiment import overlap_forgetting_pairs, overlap_matrix
from sparsecl.metrics import bwt_metric, correlate, op_metric
from sparsecl.netcore import ModelConfig, build_model
from sparsecl.tasks import default_stream, generate_sequence

tasks = generate_sequence(default_stream(4, seed=1, n_train=400, n_eval=200))
opt = OptimizerConfig(lr=1e-3, epochs=3, seed=7)


def run(name, **hp):
    return run_sequence(build_model(ModelConfig(sizes=[20, 64, 64, 5], seed=7)), tasks,
                        get_strategy(name, **hp), opt)


for name in ("seqft", "ewc", "lwf", "replay-online", "gem", "seqlora", "olora"):
    R = run(name).scores
    print(f"{name:14s} OP {op_metric(R, 4):.3f}  BWT {bwt_metric(R, 4):+.3f}")

# GEM and the replay variants were the only ones that touched stored
# samples; every read went through the buffer, never a past dataset.
state = run("gem")
print("buffer reads:", sum(r["source"] == "buffer" for r in state.access.records),
      "| past-dataset reads:", len(state.access.history_reads()))

state = run("piece-s", ratio=0.02)
print("\noverlap matrix (piece-s, 2%)")
for row in overlap_matrix(state.masks):
    print("  " + "  ".join(f"{v:.2f}" for v in row))

xs, ys = overlap_forgetting_pairs(state.masks, state.scores)
for x, y in zip(xs, ys):
    print(f"  overlap {x:.3f}  forgetting {y:+.3f}")
rep = correlate(xs, ys)
print(rep.to_dict())
