import itertools
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

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 120

for sig_on, frac in itertools.product([0.5, 0.65], [0.6, 0.7]):
    g = citation_benchmark(signature_on=sig_on, signal_fraction=frac, seed=0)
    splits = make_split(g, 0.1, 0.1, seed=0)
    lab = g.labels
    rng = substream(0, "targets")
    targets = np.sort(rng.choice(splits.test, size=int(0.2 * splits.test.size), replace=False))
    budget = proportional_budget(g, targets, 0.2)

    bb = fit_plain_backbone(g, splits, epochs=300, patience=50)
    b_clean = (bb.model.predict(g)[splits.test] == lab[splits.test]).mean()
    adv_b = evasion_feature_pgd(bb.model, g, targets, budget.feature_eps, budget.feature_steps)
    b_pgd = (bb.model.predict(adv_b.graph)[targets] == lab[targets]).mean()

    pois = random_poison(g, 0.2, substream(0, "poison-screen")).graph
    bb_p = fit_plain_backbone(pois, splits, epochs=300, patience=50)
    b_pois = (bb_p.model.predict(pois)[splits.test] == lab[splits.test]).mean()

    t0 = time.time()
    cfg = TrainConfig(epochs=epochs, patience=50)
    res = fit(g, splits, cfg)
    d_clean = (res.model.predict(g)[splits.test] == lab[splits.test]).mean()
    adv_d = evasion_feature_pgd(res.model, g, targets, budget.feature_eps, budget.feature_steps)
    d_pgd = (res.model.predict(adv_d.graph)[targets] == lab[targets]).mean()

    print(
        f"sig_on={sig_on:.2f} frac={frac:.1f} | backbone clean {b_clean:.4f} "
        f"pgd {b_pgd:.4f} poisoned {b_pois:.4f} (drop {100*(b_clean-b_pois):.1f}) | "
        f"defense clean {d_clean:.4f} pgd {d_pgd:.4f} "
        f"margin {100*(d_pgd-b_pgd):.1f} ({time.time()-t0:.0f}s, "
        f"best ep {res.best_epoch} val {res.best_val_accuracy:.3f})",
        flush=True,
    )
