import time

import numpy as np
import torch

from invardef.attacks import (
    evasion_edge_flip, evasion_feature_pgd, node_injection, proportional_budget,
)
from invardef.data_io import make_split
from invardef.models import PlainBackbone, graph_tensors
from invardef.seeds import substream, torch_generator
from invardef.synthbench import citation_benchmark

torch.set_num_threads(1)

g = citation_benchmark(seed=0)
splits = make_split(g, 0.1, 0.1, seed=0)
adj, x = graph_tensors(g)
labels = torch.tensor(g.labels)
tr = torch.tensor(splits.train)
va = torch.tensor(splits.val)

model = PlainBackbone(g.num_features, g.num_classes)
model.reset_parameters(torch_generator(0, "init"))
opt = torch.optim.Adam(model.parameters(), lr=0.01, weight_decay=5e-4)
for _ in range(150):
    opt.zero_grad()
    loss = model.node_loss(adj, x, labels, tr)
    loss.backward()
    opt.step()

rng = substream(0, "targets")
n_targets = int(np.floor(0.2 * splits.test.size))
targets = np.sort(rng.choice(splits.test, size=n_targets, replace=False))
budget = proportional_budget(g, targets, 0.2)
print(f"budget: eps={budget.feature_eps:.3f} edges={budget.edge_budget} "
      f"inject={budget.inject_nodes}x{budget.inject_edges_per_node}")

lab = g.labels


def acc(graph, nodes):
    return (model.predict(graph)[nodes] == lab[nodes]).mean()


print(f"clean target acc {acc(g, targets):.4f}")

t0 = time.time()
pgd = evasion_feature_pgd(model, g, targets, budget.feature_eps, budget.feature_steps)
print(f"feature_pgd {time.time()-t0:.1f}s -> acc {acc(pgd.graph, targets):.4f}")

t0 = time.time()
flip = evasion_edge_flip(model, g, targets, budget.edge_budget)
print(f"edge_flip {time.time()-t0:.1f}s used {flip.provenance['edits_used']} "
      f"-> acc {acc(flip.graph, targets):.4f}")

t0 = time.time()
inj = node_injection(model, g, targets, budget.inject_nodes, budget.inject_edges_per_node)
print(f"node_injection {time.time()-t0:.1f}s edges {inj.provenance['edges_added']} "
      f"-> acc {(model.predict(inj.graph)[targets] == lab[targets]).mean():.4f}")
