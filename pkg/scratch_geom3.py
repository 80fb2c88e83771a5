import sys
import time

import numpy as np
import torch

from invardef.attacks import evasion_feature_pgd, proportional_budget, random_poison
from invardef.data_io import make_split
from invardef.seeds import substream
from invardef.synthbench import citation_benchmark
from invardef.training import TrainConfig, fit, fit_plain_backbone

torch.set_num_threads(1)

sig_on = float(sys.argv[1])
frac = float(sys.argv[2])
hom = float(sys.argv[3])
ef = float(sys.argv[4])
bg = float(sys.argv[5]) if len(sys.argv) > 5 else 0.01
seed = int(sys.argv[6]) if len(sys.argv) > 6 else 0

g = citation_benchmark(
    signature_on=sig_on, signal_fraction=frac, homophily=hom,
    background_on=bg, seed=0,
)
splits = make_split(g, 0.1, 0.1, seed=0)
lab = g.labels
rng = substream(0, "targets")
targets = np.sort(rng.choice(splits.test, size=int(0.2 * splits.test.size), replace=False))
budget = proportional_budget(g, targets, 0.2)

bb = fit_plain_backbone(g, splits, epochs=300, patience=50, seed=seed)
b_clean = (bb.model.predict(g)[splits.test] == lab[splits.test]).mean()
adv_b = evasion_feature_pgd(bb.model, g, targets, budget.feature_eps, budget.feature_steps)
b_pgd = (bb.model.predict(adv_b.graph)[targets] == lab[targets]).mean()
pois = random_poison(g, 0.2, substream(0, "poison-screen")).graph
bb_p = fit_plain_backbone(pois, splits, epochs=300, patience=50, seed=seed)
b_pois = (bb_p.model.predict(pois)[splits.test] == lab[splits.test]).mean()
b_drop = 100 * (b_clean - b_pois)

cfg = TrainConfig(epochs=200, patience=50, train_edge_frac=ef, seed=seed)
t0 = time.time()
res = fit(g, splits, cfg)
d_clean = (res.model.predict(g)[splits.test] == lab[splits.test]).mean()
adv_d = evasion_feature_pgd(res.model, g, targets, budget.feature_eps, budget.feature_steps)
d_pgd = (res.model.predict(adv_d.graph)[targets] == lab[targets]).mean()
res_p = fit(pois, splits, cfg)
d_pois = (res_p.model.predict(pois)[splits.test] == lab[splits.test]).mean()
d_drop = 100 * (d_clean - d_pois)
ratio = d_drop / b_drop if b_drop > 0 else float("inf")
print(
    f"sig={sig_on} frac={frac} hom={hom} ef={ef} bg={bg} seed={seed}: "
    f"bb clean {b_clean:.4f} pgd {b_pgd:.4f} drop {b_drop:.2f} | "
    f"def clean {d_clean:.4f} pgd {d_pgd:.4f} margin {100*(d_pgd-b_pgd):.1f} "
    f"drop {d_drop:.2f} ratio {ratio:.2f} ({time.time()-t0:.0f}s)",
    flush=True,
)
