"""Dry run of acceptance criteria 1-3 through the real evaluation path."""
import sys
import time

import torch

from invardef.data_io import make_split
from invardef.evaluation import run_scenarios
from invardef.synthbench import citation_benchmark
from invardef.training import TrainConfig, fit, fit_plain_backbone

torch.set_num_threads(1)

t0 = time.time()
graph = citation_benchmark(seed=0)
splits = make_split(graph, 0.1, 0.1, seed=0)
cfg = TrainConfig(epochs=int(sys.argv[1]) if len(sys.argv) > 1 else 300)

defense = fit(graph, splits, cfg)
print(f"defense fit: best_epoch={defense.best_epoch} "
      f"val={defense.best_val_accuracy:.4f} ({time.time()-t0:.0f}s)", flush=True)
backbone = fit_plain_backbone(graph, splits, seed=cfg.seed)
print(f"backbone fit done ({time.time()-t0:.0f}s)", flush=True)

models = {"defense": defense.model, "backbone": backbone.model}


def retrain(name, poisoned):
    if name == "backbone":
        return fit_plain_backbone(poisoned, splits, seed=cfg.seed).model
    return fit(poisoned, splits, cfg).model


report = run_scenarios(
    models, graph, splits,
    ["clean", "feature_pgd", "random_poison:0.2"],
    seed=0, fraction=0.2, retrain=retrain,
)
wall = time.time() - t0

c_def = report.accuracy("clean", "defense")
c_bb = report.accuracy("clean", "backbone")
p_def = report.accuracy("feature_pgd", "defense")
p_bb = report.accuracy("feature_pgd", "backbone")
o_def = report.accuracy("random_poison:0.2", "defense")
o_bb = report.accuracy("random_poison:0.2", "backbone")
d_drop = c_def - o_def
b_drop = c_bb - o_bb
ratio = d_drop / b_drop if b_drop > 0 else float("inf")

print(f"clean: def {c_def:.4f} bb {c_bb:.4f}")
print(f"pgd:   def {p_def:.4f} bb {p_bb:.4f} margin {100*(p_def-p_bb):.1f}")
print(f"pois:  def {o_def:.4f} bb {o_bb:.4f} "
      f"d_drop {100*d_drop:.2f} b_drop {100*b_drop:.2f} ratio {ratio:.3f}")
print(f"C1 clean>=0.84: {'PASS' if c_def >= 0.84 else 'FAIL'}")
print(f"C2 margin>=20:  {'PASS' if p_def - p_bb >= 0.20 else 'FAIL'}")
print(f"C3 ratio<=0.5:  {'PASS' if d_drop <= 0.5 * b_drop else 'FAIL'}")
print(f"wall {wall:.0f}s")
