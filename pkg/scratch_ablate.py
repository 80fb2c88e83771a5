"""Verify the ablation orderings (criterion-7 shape) at a reduced config."""
import sys
import time

import torch

from invardef.data_io import make_split
from invardef.evaluation import run_ablation
from invardef.synthbench import citation_benchmark
from invardef.training import TrainConfig

torch.set_num_threads(1)

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 80
patience = int(sys.argv[2]) if len(sys.argv) > 2 else 30

graph = citation_benchmark(seed=0)
splits = make_split(graph, 0.1, 0.1, seed=0)
cfg = TrainConfig(epochs=epochs, patience=patience)

t0 = time.time()


def progress(variant, seed):
    print(f"[{time.time()-t0:6.0f}s] {variant} seed={seed}", flush=True)


report = run_ablation(graph, splits, cfg, seeds=(0, 1, 2), progress=progress)

full_avg = report.average("full")
full_spread = report.spread("full")
print(f"\nscenarios: {report.scenarios}")
for v in ("full", "no_node_inv", "no_structure_inv", "no_invariance", "fixed_domains"):
    means = ", ".join(f"{m:.4f}" for m in report.scenario_means(v))
    print(f"{v:18s} avg {report.average(v):.4f} spread {report.spread(v):.4f} [{means}]")
print(f"\nfull>=no_node_inv:      {full_avg >= report.average('no_node_inv')}")
print(f"full>=no_structure_inv: {full_avg >= report.average('no_structure_inv')}")
print(f"full>=no_invariance:    {full_avg >= report.average('no_invariance')}")
print(f"fixed_domains spread>=full spread: "
      f"{report.spread('fixed_domains') >= full_spread}")
print(f"total {time.time()-t0:.0f}s")
