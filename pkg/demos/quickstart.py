"""Fit a forest, build a regression sample on its predictions, run ForestIV.

Run with ``python demos/quickstart.py``. Takes well under a minute.
"""

import numpy as np

from forestiv import (
    DGPSpec,
    ForestParams,
    TruthSpec,
    biased_estimate,
    fit_forest,
    forest_iv,
    label_estimate,
    predict_forest,
    simulate_econ,
    split,
    synthesize_truth,
)

SEED = 11

# A synthetic prediction task: 3000 rows, 300 used to train the forest and
# 150 labeled test rows that keep their true covariate value.
data = split(synthesize_truth(3000, TruthSpec(p=6), seed=SEED), n_train=300, n_test=150, seed=SEED)
forest = fit_forest(data, ForestParams(n_trees=40), seed=SEED)
x_hat = predict_forest(forest, data.features)

# The outcome depends on the true covariate; the analyst only sees x_hat on
# unlabeled rows, so the prediction error ends up in the regression.
econ = simulate_econ(DGPSpec(), data.truth, seed=SEED)
print("true beta        ", np.round(DGPSpec().beta, 3))

biased = biased_estimate(x_hat, econ.y, econ.controls, data.partition)
print("plug-in forest   ", np.round(biased.beta, 3))

labeled = label_estimate(econ.y, data.truth, econ.controls, data.partition)
print("labeled rows only", np.round(labeled.beta, 3), "se", np.round(labeled.se, 3))

out = forest_iv(forest, data, econ, alpha=0.05, seed=SEED)
if out.estimate is None:
    print("ForestIV: no candidate passed the Hotelling screen")
else:
    c = out.chosen_candidate
    print("ForestIV         ", np.round(out.estimate.beta, 3), "se", np.round(out.estimate.se, 3))
    print(f"  endogenous tree {c.index}, {len(c.selection.instruments)} instrument trees, "
          f"{len(out.retained())} of {len(out.candidates)} candidates retained")
