import time

import numpy as np
import torch

from invardef.data_io import make_split
from invardef.graph import EdgeEdit, apply_edge_edits
from invardef.models import FeatureInput, PlainBackbone, graph_tensors
from invardef.seeds import substream, torch_generator
from invardef.synthbench import citation_benchmark

torch.set_num_threads(1)

CFG = dict(signature_on=0.08, background_on=0.01, signature_overlap=45,
           homophily=0.70, signal_fraction=0.70)

g = citation_benchmark(seed=0, **CFG)
splits = make_split(g, 0.1, 0.1, seed=0)
adj, x = graph_tensors(g)
labels = torch.tensor(g.labels)
tr = torch.tensor(splits.train)
va = torch.tensor(splits.val)
te = torch.tensor(splits.test)


def train_gcn(graph, epochs=200, seed=0):
    a, xx = graph_tensors(graph)
    model = PlainBackbone(graph.num_features, graph.num_classes)
    model.reset_parameters(torch_generator(seed, "init"))
    opt = torch.optim.Adam(model.parameters(), lr=0.01, weight_decay=5e-4)
    best_va, best_state = -1.0, None
    lab = torch.tensor(graph.labels)
    for epoch in range(epochs):
        opt.zero_grad()
        loss = model.node_loss(a, xx, lab, tr)
        loss.backward()
        opt.step()
        with torch.no_grad():
            acc_v = (model.probs(a, xx).argmax(1)[va] == lab[va]).double().mean().item()
        if acc_v > best_va:
            best_va = acc_v
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    return model


t0 = time.time()
model = train_gcn(g)
with torch.no_grad():
    pred = model.probs(adj, x).argmax(1)
clean_test = (pred[te] == labels[te]).double().mean().item()
print(f"clean test {clean_test:.4f} ({time.time()-t0:.1f}s)")

# --- feature PGD evasion on 20% of test nodes ---
rng = substream(0, "targets")
n_targets = int(np.floor(0.2 * te.shape[0]))
targets = np.sort(rng.choice(splits.test, size=n_targets, replace=False))
targets_t = torch.tensor(targets)

# perturbed rows: targets + their 1-hop neighbors
neigh = set(targets.tolist())
adj_lists = g.adjacency_lists()
for t in targets:
    neigh.update(adj_lists[t].tolist())
rows = torch.tensor(sorted(neigh))
print(f"targets {len(targets)}, perturbed rows {rows.shape[0]}")

frange = float(g.features.max() - g.features.min())
eps = 0.2 * frange
step = eps / 8
delta = torch.zeros(rows.shape[0], g.num_features, dtype=torch.float64, requires_grad=True)

t0 = time.time()
for it in range(20):
    fi = FeatureInput(base=x, rows=rows, delta=delta)
    loss = model.node_loss(adj, fi, labels, targets_t)
    grad, = torch.autograd.grad(loss, delta)
    with torch.no_grad():
        delta += step * grad.sign()
        delta.clamp_(-eps, eps)
print(f"pgd time {time.time()-t0:.1f}s")

with torch.no_grad():
    fi = FeatureInput(base=x, rows=rows, delta=delta.detach())
    pred_adv = model.probs(adj, fi).argmax(1)
adv_acc = (pred_adv[targets_t] == labels[targets_t]).double().mean().item()
clean_tgt = (pred[targets_t] == labels[targets_t]).double().mean().item()
print(f"GCN target acc clean {clean_tgt:.4f} -> adv {adv_acc:.4f}")

# --- random poisoning 20% of edges, retrain ---
rng = substream(0, "poison")
n_flips = int(np.floor(0.2 * g.num_edges))
cur = g
edits = []
t0 = time.time()
es = set(map(tuple, cur.edge_index.tolist()))
n = g.num_nodes
for k in range(n_flips):
    if rng.random() < 0.5 and len(es) > 1:
        u, v = list(es)[rng.integers(0, len(es))]
        es.discard((u, v))
        edits.append(EdgeEdit(u, v, add=False))
    else:
        while True:
            u, v = int(rng.integers(0, n)), int(rng.integers(0, n))
            if u == v:
                continue
            key = (min(u, v), max(u, v))
            if key not in es:
                es.add(key)
                edits.append(EdgeEdit(*key, add=True))
                break
poisoned = apply_edge_edits(g, edits)
print(f"poison {n_flips} flips ({time.time()-t0:.1f}s), edges {poisoned.num_edges}")

t0 = time.time()
pmodel = train_gcn(poisoned)
padj, px = graph_tensors(poisoned)
with torch.no_grad():
    ppred = pmodel.probs(padj, px).argmax(1)
poison_test = (ppred[te] == labels[te]).double().mean().item()
print(f"GCN test acc clean {clean_test:.4f} -> poisoned {poison_test:.4f} "
      f"(drop {clean_test-poison_test:.4f}) ({time.time()-t0:.1f}s)")
