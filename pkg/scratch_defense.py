import sys
import time

import numpy as np
import torch

from invardef.attacks import evasion_feature_pgd, proportional_budget
from invardef.data_io import make_split
from invardef.seeds import substream
from invardef.synthbench import citation_benchmark
from invardef.training import TrainConfig, fit, fit_plain_backbone

torch.set_num_threads(1)

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 120
eps_scale = float(sys.argv[2]) if len(sys.argv) > 2 else 0.05

g = citation_benchmark(seed=0)
splits = make_split(g, 0.1, 0.1, seed=0)
lab = g.labels

t0 = time.time()
cfg = TrainConfig(epochs=epochs, patience=50, feature_eps_scale=eps_scale)
times = []
last = [time.time()]


def tick(m):
    now = time.time()
    times.append(now - last[0])
    last[0] = now
    if m.epoch % 10 == 0:
        print(f"ep {m.epoch:3d} P {m.predictive:.3f} I {m.node_invariance:.1f} "
              f"E {m.structure_invariance:.1f} D {m.diversity:.3f} val {m.val_accuracy:.4f} "
              f"({times[-1]*1000:.0f} ms)", flush=True)


result = fit(g, splits, cfg, progress=tick)
print(f"defense train {time.time()-t0:.0f}s best val {result.best_val_accuracy:.4f} "
      f"@ep {result.best_epoch} stopped_early={result.stopped_early}")

model = result.model
pred = model.predict(g)
test_acc = (pred[splits.test] == lab[splits.test]).mean()
print(f"defense clean test acc {test_acc:.4f}")

t0 = time.time()
bb = fit_plain_backbone(g, splits, epochs=300, patience=50)
bpred = bb.model.predict(g)
btest = (bpred[splits.test] == lab[splits.test]).mean()
print(f"backbone train {time.time()-t0:.0f}s clean test {btest:.4f}")

rng = substream(0, "targets")
targets = np.sort(rng.choice(splits.test, size=int(0.2 * splits.test.size), replace=False))
budget = proportional_budget(g, targets, 0.2)

t0 = time.time()
adv_d = evasion_feature_pgd(model, g, targets, budget.feature_eps, budget.feature_steps)
acc_d = (model.predict(adv_d.graph)[targets] == lab[targets]).mean()
adv_b = evasion_feature_pgd(bb.model, g, targets, budget.feature_eps, budget.feature_steps)
acc_b = (bb.model.predict(adv_b.graph)[targets] == lab[targets]).mean()
print(f"feature_pgd ({time.time()-t0:.0f}s): defense {acc_d:.4f} vs backbone {acc_b:.4f} "
      f"(margin {100*(acc_d-acc_b):.1f} pts, need >= 20)")
