"""ForestIV estimation library.

Random-forest predictions used as a regressor in a linear model carry
prediction error that biases the coefficient estimates. ForestIV treats the
forest's aggregate prediction as the endogenous covariate and its individual
trees as candidate instruments, screens them with the lasso, and picks the
instrument set whose 2SLS estimate is closest to the estimate obtained on the
labeled data.

Examples
--------
>>> from forestiv import ExperimentConfig, run_experiment
>>> report = run_experiment(ExperimentConfig(rounds=2))  # doctest: +SKIP
"""

from .baselines import SimexConfig, mc_simex, simex
from .data import Dataset, DataError, EconSample, load_csv, save_csv, split
from .forest import (
    ForestModel,
    ForestParams,
    fit_forest,
    grow_forest,
    predict_forest,
    tree_prediction_matrix,
)
from .lasso import cv_lasso, fit_lasso
from .procedure import (
    ForestIVOutput,
    NoInstrumentsError,
    averaging_estimate,
    biased_estimate,
    bootstrap_se,
    forest_iv,
    forest_iv_from_predictions,
    label_estimate,
    sample_split_iv,
    subset_tree_iv,
)
from .regression import EstimateResult, RankDeficientError, hotelling, ols, tsls
from .simlab import (
    DGPSpec,
    Dist,
    ExperimentConfig,
    TruthSpec,
    run_experiment,
    sensitivity_sweep,
    simulate_econ,
    synthesize_truth,
)

__version__ = "0.1.0"

__all__ = [
    "DGPSpec", "DataError", "Dataset", "Dist", "EconSample", "EstimateResult",
    "ExperimentConfig", "ForestIVOutput", "ForestModel", "ForestParams",
    "NoInstrumentsError", "RankDeficientError", "SimexConfig", "TruthSpec",
    "averaging_estimate", "biased_estimate", "bootstrap_se", "cv_lasso", "fit_forest",
    "fit_lasso", "forest_iv", "forest_iv_from_predictions", "grow_forest", "hotelling",
    "label_estimate", "load_csv", "mc_simex", "ols", "predict_forest", "run_experiment",
    "sample_split_iv", "save_csv", "sensitivity_sweep", "simex", "simulate_econ", "split",
    "subset_tree_iv", "synthesize_truth", "tree_prediction_matrix", "tsls",
]
