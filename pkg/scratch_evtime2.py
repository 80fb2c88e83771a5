"""Time each evasion scenario at benchmark scale on a quick backbone."""
import time

import torch

from invardef.attacks import (
    evasion_edge_flip,
    evasion_feature_pgd,
    node_injection,
    proportional_budget,
)
from invardef.data_io import make_split
from invardef.evaluation import select_targets
from invardef.synthbench import citation_benchmark
from invardef.training import fit_plain_backbone

torch.set_num_threads(1)

graph = citation_benchmark(seed=0)
splits = make_split(graph, 0.1, 0.1, seed=0)
t0 = time.time()
bb = fit_plain_backbone(graph, splits, seed=0)
print(f"backbone fit {time.time()-t0:.0f}s", flush=True)
targets = select_targets(graph, splits, seed=0, fraction=0.2)
budget = proportional_budget(graph, targets, 0.2)
print(f"targets={targets.size} eps={budget.feature_eps:.3f} "
      f"edge_budget={budget.edge_budget} inject={budget.inject_nodes}x"
      f"{budget.inject_edges_per_node}", flush=True)

t = time.time()
evasion_feature_pgd(bb.model, graph, targets, budget.feature_eps, budget.feature_steps)
print(f"feature_pgd {time.time()-t:.0f}s", flush=True)
t = time.time()
evasion_edge_flip(bb.model, graph, targets, budget.edge_budget, flips_per_round=8)
print(f"edge_flip {time.time()-t:.0f}s", flush=True)
t = time.time()
node_injection(bb.model, graph, targets, budget.inject_nodes, budget.inject_edges_per_node)
print(f"node_inject {time.time()-t:.0f}s", flush=True)
