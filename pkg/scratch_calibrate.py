import time

import numpy as np
import torch

from invardef.data_io import make_split
from invardef.models import PlainBackbone, graph_tensors
from invardef.seeds import torch_generator
from invardef.synthbench import citation_benchmark

torch.set_num_threads(1)

t0 = time.time()
g = citation_benchmark(seed=0)
print(f"gen time {time.time()-t0:.2f}s nodes={g.num_nodes} edges={g.num_edges} "
      f"feat={g.num_features} K={g.num_classes} density={np.count_nonzero(g.features)/g.features.size:.4f}")
deg = g.degrees()
print(f"deg mean {deg.mean():.2f} max {deg.max()}")
# homophily check
same = sum(1 for u, v in g.edge_index if g.labels[u] == g.labels[v])
print(f"edge homophily {same/g.num_edges:.3f}")
print("class counts", np.bincount(g.labels))

splits = make_split(g, 0.1, 0.1, seed=0)
adj, x = graph_tensors(g)
print("x sparse?", x.is_sparse)
labels = torch.tensor(g.labels)
tr = torch.tensor(splits.train)
va = torch.tensor(splits.val)
te = torch.tensor(splits.test)

model = PlainBackbone(g.num_features, g.num_classes)
model.reset_parameters(torch_generator(0, "init"))
opt = torch.optim.Adam(model.parameters(), lr=0.01, weight_decay=5e-4)

t0 = time.time()
for epoch in range(200):
    opt.zero_grad()
    loss = model.node_loss(adj, x, labels, tr)
    loss.backward()
    opt.step()
    if epoch % 25 == 0 or epoch == 199:
        with torch.no_grad():
            pred = model.probs(adj, x).argmax(1)
            acc_v = (pred[va] == labels[va]).double().mean().item()
            acc_t = (pred[te] == labels[te]).double().mean().item()
        print(f"ep {epoch:3d} loss {float(loss.detach()):.4f} val {acc_v:.4f} test {acc_t:.4f} "
              f"({(time.time()-t0)/(epoch+1)*1000:.0f} ms/ep)")
print(f"total {time.time()-t0:.1f}s")
