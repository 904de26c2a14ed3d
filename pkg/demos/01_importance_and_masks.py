"""
Importance scores and the masks they pick
=========================================

Two estimators rank the same parameters differently. Here we score a small
MLP on one synthetic task, keep the top 2% under each ranking and look at
where the chosen parameters sit.
"""
import numpy as np

from sparsecl.importance import estimate_fisher, estimate_second_order
from sparsecl.masking import SparsityBudget, mask_layout, mask_overlap, select_topk
from sparsecl.netcore import ModelConfig, build_model
from sparsecl.tasks import SyntheticTaskConfig, generate_task

task = generate_task(SyntheticTaskConfig(n_train=400, n_eval=100, seed=0))
store, forward = build_model(ModelConfig(family="mlp", sizes=[20, 64, 64, 5], seed=42))
print(f"{store.size} parameters, {len(task.train[1])} training samples")

# Fisher: mean squared per-sample gradient.
fisher = estimate_fisher(forward, store, task.train)
# Second-order: |mean gradient| / RMS gradient, always below 1.
second = estimate_second_order(forward, store, task.train)
print("fisher range     ", fisher.scores.min(), fisher.scores.max())
print("second-order range", second.scores.min(), second.scores.max())

budget = SparsityBudget(0.02, store.size)
m_f = select_topk(fisher, budget, task_id=task.task_id)
m_s = select_topk(second, budget, task_id=task.task_id)
print(f"k = {budget.resolved_k}; overlap between the two masks = {mask_overlap(m_f, m_s):.3f}")

# Fisher favours large-gradient entries; the normalized score favours
# consistent gradient signs, whatever their size.
for name, m in (("fisher", m_f), ("second-order", m_s)):
    print(f"\n{name} layout")
    print(mask_layout(m, store).to_csv())

# Ranks agree more near the top than overall?
order_f = np.argsort(-fisher.scores)
order_s = np.argsort(-second.scores)
for k in (10, 50, 200):
    shared = len(set(order_f[:k]) & set(order_s[:k]))
    print(f"top-{k}: {shared} shared")
