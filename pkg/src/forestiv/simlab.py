"""Synthetic data-generating processes and the Monte-Carlo experiment runner.

A round draws a fresh dataset (or a fresh split of a fixed dataset), fits a
fresh forest, simulates the regression outcome, and runs every requested
method on those same draws so comparisons are paired. Seeds for each stage
of each round are derived from a single master seed, so a report is
reproducible bit for bit and independent of how many rounds run at once.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone

import numpy as np
from scipy.special import ndtr

from . import regression as reg
from ._seeding import derive_seed, rng_for
from .baselines import SimexConfig, estimate_misclassification, mc_simex, simex
from .data import TEST, Dataset, EconSample, load_csv, split
from .forest import ForestParams, fit_forest, predict_forest, tree_prediction_matrix
from .lasso import LAMBDA_RULES
from .procedure import (
    NoInstrumentsError,
    averaging_estimate,
    biased_estimate,
    forest_iv_from_predictions,
    label_estimate,
    sample_split_iv,
    subset_tree_iv,
)

METHODS = ("biased", "unbiased", "forestiv", "averaging", "sample_split", "subset",
           "simex", "mcsimex")
SWEEP_AXES = ("unlabel_size", "noise_sd", "n_trees")


# ---------------------------------------------------------------- distributions


@dataclass(frozen=True)
class Dist:
    """``uniform(a, b)``, ``normal(a = mean, b = sd)`` or ``bernoulli(a = p)``."""

    kind: str
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind == "uniform" and self.b < self.a:
            raise ValueError("uniform needs a <= b")
        elif self.kind == "normal" and self.b < 0:
            raise ValueError("normal needs sd >= 0")
        elif self.kind == "bernoulli" and not 0.0 <= self.a <= 1.0:
            raise ValueError("bernoulli needs 0 <= p <= 1")
        elif self.kind not in ("uniform", "normal", "bernoulli"):
            raise ValueError(f"unknown distribution {self.kind!r}")

    def draw(self, rng, n):
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, n)
        if self.kind == "normal":
            return self.a + self.b * rng.standard_normal(n)
        return (rng.random(n) < self.a).astype(np.float64)

    @property
    def sd(self):
        if self.kind == "uniform":
            return (self.b - self.a) / math.sqrt(12.0)
        if self.kind == "normal":
            return self.b
        return math.sqrt(self.a * (1.0 - self.a))

    @classmethod
    def parse(cls, obj):
        """Accept a ``Dist``, a dict ``{kind, a, b}`` or a list ``[kind, a, b]``."""
        if isinstance(obj, Dist):
            return obj
        if isinstance(obj, dict):
            return cls(**obj)
        return cls(*obj)


@dataclass(frozen=True)
class DGPSpec:
    """Outcome model ``y = b0 + bx * x + sum_k b_k z_k + eps``.

    Attributes
    ----------
    beta : tuple
        ``(intercept, x, z_1, ..., z_k)``.
    control_dists : tuple of Dist
        One per non-intercept control.
    noise_sd : float
        Standard deviation of ``eps``.
    error_corr : tuple, optional
        ``(k, rho)`` makes control ``z_k`` (1-based) correlated with the
        forest's aggregate prediction error at ``rho``, keeping its marginal
        mean and sd.
    """

    beta: tuple = (1.0, 0.5, 2.0, 1.0)
    control_dists: tuple = (Dist("uniform", -10.0, 10.0), Dist("normal", 0.0, 10.0))
    noise_sd: float = 2.0
    error_corr: tuple | None = None

    def __post_init__(self):
        dists = tuple(Dist.parse(d) for d in self.control_dists)
        object.__setattr__(self, "control_dists", dists)
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) != len(dists) + 2:
            raise ValueError(f"beta has {len(self.beta)} entries, expected {len(dists) + 2}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.error_corr is not None:
            k, rho = self.error_corr
            if not 1 <= int(k) <= len(dists):
                raise ValueError("error_corr control index out of range")
            if not -1.0 < float(rho) < 1.0:
                raise ValueError("error_corr rho must lie in (-1, 1)")
            object.__setattr__(self, "error_corr", (int(k), float(rho)))

    @property
    def control_names(self):
        return ("const",) + tuple(f"z{j}" for j in range(1, len(self.control_dists) + 1))


def simulate_econ(dgp, x_values, seed, error=None, x_name="x"):
    """Draw controls and noise and compute ``y`` from the true covariate.

    Parameters
    ----------
    dgp : DGPSpec
    x_values : array_like
        True covariate for every row.
    seed : int
    error : array_like, optional
        Aggregate prediction error per row; required when ``dgp.error_corr``
        is set.
    """
    x = np.asarray(x_values, dtype=np.float64)
    n = x.size
    rng = rng_for(seed, "econ")
    cols = [np.ones(n)]
    for d in dgp.control_dists:
        cols.append(d.draw(rng, n))
    eps = dgp.noise_sd * rng.standard_normal(n)
    if dgp.error_corr is not None:
        if error is None:
            raise ValueError("error_corr needs the prediction error")
        k, rho = dgp.error_corr
        e = np.asarray(error, dtype=np.float64)
        sd = e.std()
        e_std = (e - e.mean()) / sd if sd > 0 else np.zeros(n)
        dist = dgp.control_dists[k - 1]
        base = cols[k]
        base_std = (base - base.mean()) / base.std() if base.std() > 0 else np.zeros(n)
        mean = dist.a if dist.kind == "normal" else base.mean()
        cols[k] = mean + dist.sd * (rho * e_std + math.sqrt(1.0 - rho ** 2) * base_std)
    Z = np.column_stack(cols)
    b = np.asarray(dgp.beta)
    y = b[0] + b[1] * x + Z[:, 1:] @ b[2:] + eps
    return EconSample(y, x, Z, None, x_name, dgp.control_names)


# ---------------------------------------------------------------- synthetic truth


def _f_sin(f):
    return np.sin(2.0 * np.pi * f)


def _f_quad(f):
    return 4.0 * (f - 0.5) ** 2


def _f_linear(f):
    return 2.0 * f - 1.0


def _f_bump(f):
    return np.exp(-20.0 * (f - 0.5) ** 2)


def _f_step(f):
    return np.tanh(10.0 * (f - 0.5))


def _f_cubic(f):
    return 8.0 * (f - 0.5) ** 3


def _f_zero(f):
    return np.zeros_like(f)


COMPONENTS = {
    "sin": _f_sin, "quad": _f_quad, "linear": _f_linear, "bump": _f_bump,
    "step": _f_step, "cubic": _f_cubic, "zero": _f_zero,
}
DEFAULT_COMPONENTS = ("sin", "step", "linear", "quad", "bump", "cubic")


@dataclass(frozen=True)
class TruthSpec:
    """Additive truth ``loc + scale * (sum_j w_j m_j(f_j) + zeta)`` on ``[0, 1]^p``.

    Features beyond ``len(components)`` carry no signal. In ``binary`` mode
    the latent additive score is thresholded at its sample median.
    """

    p: int = 10
    components: tuple = DEFAULT_COMPONENTS
    weights: tuple | None = None
    zeta_sd: float = 0.3
    loc: float = 0.0
    scale: float = 1.0
    task: str = "regression"

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        comps = tuple(self.components)[: self.p]
        unknown = [c for c in comps if c not in COMPONENTS]
        if unknown:
            raise ValueError(f"unknown component functions {unknown}")
        object.__setattr__(self, "components", comps)
        if self.weights is not None:
            w = tuple(float(v) for v in self.weights)
            if len(w) != len(comps):
                raise ValueError("one weight per component")
            object.__setattr__(self, "weights", w)
        if self.zeta_sd < 0:
            raise ValueError("zeta_sd must be >= 0")
        if self.task not in ("regression", "classification"):
            raise ValueError("task must be regression or classification")


def synthesize_truth(n, spec=None, seed=0):
    """Uniform features with an additive truth; every row tagged unlabel.

    Parameters
    ----------
    n : int
    spec : TruthSpec, optional
    seed : int
    """
    spec = spec or TruthSpec()
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_for(seed, "truth")
    F = rng.random((n, spec.p))
    w = spec.weights or (1.0,) * len(spec.components)
    score = np.zeros(n)
    for j, (name, wj) in enumerate(zip(spec.components, w)):
        score += wj * COMPONENTS[name](F[:, j])
    score += spec.zeta_sd * rng.standard_normal(n)
    if spec.task == "classification":
        truth = (score > np.median(score)).astype(np.float64)
    else:
        truth = spec.loc + spec.scale * score
    return Dataset(F, truth, None, tuple(f"f{j}" for j in range(spec.p)))


# ---------------------------------------------------------------- experiments


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; see :func:`run_experiment`.

    ``data_path`` switches from synthetic truth to a CSV dataset (with
    ``schema``); the unlabeled partition is then every row outside the
    labeled ones and ``n_unlabel`` is ignored.
    """

    dgp: DGPSpec = field(default_factory=DGPSpec)
    truth: TruthSpec = field(default_factory=TruthSpec)
    forest: ForestParams = field(default_factory=ForestParams)
    n_train: int = 1000
    n_test: int = 200
    n_unlabel: int = 5000
    methods: tuple = ("biased", "unbiased", "forestiv")
    rounds: int = 30
    master_seed: int = 0
    alpha: float = 0.05
    final_sample: str = "unlabel"
    n_folds: int = 10
    lambda_rule: str = "1se"
    simex: SimexConfig = field(default_factory=SimexConfig)
    subset_q: float = 50.0
    subset_draws: int = 100
    data_path: str | None = None
    schema: dict | None = None
    name: str = "experiment"

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if min(self.n_train, self.n_test, self.n_unlabel) < 0:
            raise ValueError("partition sizes must be non-negative")
        if "mcsimex" in self.methods and self.forest.task != "classification":
            raise ValueError("mcsimex needs a binary covariate (classification task)")
        if "simex" in self.methods and self.forest.task == "classification":
            raise ValueError("simex needs a continuous covariate (regression task)")
        if self.lambda_rule not in LAMBDA_RULES:
            raise ValueError(f"lambda_rule must be one of {LAMBDA_RULES}")
        if self.truth.task != self.forest.task:
            raise ValueError("truth.task and forest.task disagree")

    def to_dict(self):
        d = asdict(self)
        d["dgp"]["control_dists"] = [asdict(c) for c in self.dgp.control_dists]
        return d


@dataclass(frozen=True, eq=False)
class RoundResult:
    index: int
    seed: int
    estimates: dict  # method -> EstimateResult or None
    reference: reg.EstimateResult
    errors: dict
    extras: dict


def _round(cfg, r, dataset=None):
    seed = derive_seed(cfg.master_seed, "round", r)
    if dataset is None:
        n = cfg.n_train + cfg.n_test + cfg.n_unlabel
        d = synthesize_truth(n, cfg.truth, derive_seed(seed, "truth"))
    else:
        d = dataset
    d = split(d, cfg.n_train, cfg.n_test, derive_seed(seed, "split"))
    forest = fit_forest(d, cfg.forest, derive_seed(seed, "forest"))
    P = tree_prediction_matrix(forest, d.features)
    xhat = predict_forest(forest, d.features)
    truth = d.truth
    if np.any(np.isnan(truth)):
        raise ValueError("simulating the outcome needs truth on every row")
    econ = simulate_econ(cfg.dgp, truth, derive_seed(seed, "econ"), xhat - truth)
    y, Z, part = econ.y, econ.controls, d.partition
    names = cfg.dgp.control_names
    ref = label_estimate(y, truth, Z, part, "x", names)

    est, errors, extras = {}, {}, {}
    fiv = None

    def attempt(name, fn):
        try:
            est[name] = fn()
        except (ValueError, np.linalg.LinAlgError) as exc:
            est[name] = None
            errors[name] = str(exc)

    for m in cfg.methods:
        if m == "biased":
            attempt(m, lambda: biased_estimate(xhat, y, Z, part, cfg.final_sample, "x", names))
        elif m == "unbiased":
            est[m] = ref
        elif m in ("forestiv", "averaging"):
            if fiv is None:
                try:
                    fiv = forest_iv_from_predictions(
                        P, truth, part, y, Z, cfg.alpha, cfg.final_sample, cfg.n_folds,
                        derive_seed(seed, "lasso"), 1, "x", names, cfg.lambda_rule)
                except NoInstrumentsError as exc:
                    fiv = exc
            if isinstance(fiv, Exception):
                est[m], errors[m] = None, str(fiv)
            elif m == "forestiv":
                est[m] = fiv.estimate
                if fiv.estimate is None:
                    errors[m] = "no valid tuple"
                else:
                    extras["forestiv_H"] = fiv.chosen_candidate.hotelling.statistic
                extras["forestiv_retained"] = len(fiv.retained())
            else:
                attempt(m, lambda: averaging_estimate(fiv))
        elif m == "sample_split":
            attempt(m, lambda: sample_split_iv(d, y, Z, cfg.forest,
                                               derive_seed(seed, "sample-split"),
                                               cfg.final_sample, 1, "x", names))
        elif m == "subset":
            def run_subset():
                out = subset_tree_iv(P, truth, part, y, Z, cfg.subset_q, cfg.subset_draws,
                                     derive_seed(seed, "subset"), cfg.alpha,
                                     cfg.final_sample, cfg.n_folds, 1, "x", names,
                                     cfg.lambda_rule)
                return out.estimate
            attempt(m, run_subset)
        elif m == "simex":
            test = d.rows(TEST)
            sigma_e = float(np.std(xhat[test] - truth[test], ddof=1))
            final = _final(part, cfg.final_sample)
            sc = replace(cfg.simex, seed=derive_seed(seed, "simex"))
            attempt(m, lambda: simex(y[final], xhat[final], Z[final], sigma_e, sc, "x", names))
        elif m == "mcsimex":
            test = d.rows(TEST)
            final = _final(part, cfg.final_sample)
            sc = replace(cfg.simex, seed=derive_seed(seed, "mcsimex"))

            def run_mc():
                Pi = estimate_misclassification(xhat[test], truth[test])
                return mc_simex(y[final], xhat[final], Z[final], Pi, sc, "x", names)
            attempt(m, run_mc)
        if est.get(m) is None and m not in errors:
            errors[m] = "no estimate"
    return RoundResult(r, seed, est, ref, errors, extras)


def _final(partition, final_sample):
    if final_sample == "unlabel":
        return np.flatnonzero(partition == "unlabel")
    return np.arange(partition.size)


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    """Across-round summary plus the raw per-round coefficient vectors.

    ``summary[method][coef]`` holds ``mean``, ``sd`` (across rounds),
    ``mean_se`` (average reported standard error), ``p_value`` and
    ``n_ok``; ``ave_mse[method]`` averages the empirical MSE against the
    labeled-data estimate (0 for the unbiased method by convention).
    """

    config: dict
    names: tuple
    true_beta: tuple
    seeds: tuple
    summary: dict
    ave_mse: dict
    raw: dict  # method -> list over rounds of beta lists (None on failure)
    raw_se: dict
    failures: dict
    extras: dict

    def stat(self, method, coef, key="mean"):
        return self.summary[method][coef][key]

    def to_dict(self, timestamp=True):
        d = {
            "config": self.config,
            "names": list(self.names),
            "true_beta": list(self.true_beta),
            "seeds": list(self.seeds),
            "summary": self.summary,
            "ave_mse": self.ave_mse,
            "raw": self.raw,
            "raw_se": self.raw_se,
            "failures": self.failures,
            "extras": self.extras,
        }
        if timestamp:
            d["timestamp"] = datetime.now(timezone.utc).isoformat()
        return d

    def to_json(self, timestamp=True):
        return json.dumps(_clean(self.to_dict(timestamp)), sort_keys=True, indent=1)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "coef", "true", "mean", "sd", "mean_se", "p_value", "n_ok",
                    "ave_mse"])
        for m, per in self.summary.items():
            for k, name in enumerate(self.names):
                s = per[name]
                w.writerow([m, name, self.true_beta[k], _fmt(s["mean"]), _fmt(s["sd"]),
                            _fmt(s["mean_se"]), _fmt(s["p_value"]), s["n_ok"],
                            _fmt(self.ave_mse[m])])
        return buf.getvalue()

    def raw_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "seed", "method"] + [f"beta_{n}" for n in self.names]
                   + [f"se_{n}" for n in self.names])
        for m, rows in self.raw.items():
            for r, beta in enumerate(rows):
                se = self.raw_se[m][r]
                blank = [""] * len(self.names)
                w.writerow([r, self.seeds[r], m] + (list(map(_fmt, beta)) if beta else blank)
                           + (list(map(_fmt, se)) if se else blank))
        return buf.getvalue()


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _clean(obj):
    """Replace non-finite floats so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def _aggregate(cfg, results):
    names = results[0].reference.names
    truth = np.asarray(cfg.dgp.beta)
    summary, ave_mse, raw, raw_se, failures = {}, {}, {}, {}, {}
    for m in cfg.methods:
        betas, ses, mses = [], [], []
        raw[m], raw_se[m] = [], []
        failures[m] = {}
        for res in results:
            e = res.estimates.get(m)
            if e is None:
                raw[m].append(None)
                raw_se[m].append(None)
                failures[m][str(res.index)] = res.errors.get(m, "no estimate")
                continue
            betas.append(e.beta)
            ses.append(e.se)
            raw[m].append(e.beta.tolist())
            raw_se[m].append(e.se.tolist())
            mses.append(0.0 if m == "unbiased" else reg.empirical_mse(e, res.reference))
        per = {}
        B = np.array(betas) if betas else np.empty((0, len(names)))
        S = np.array(ses) if ses else np.empty((0, len(names)))
        for k, name in enumerate(names):
            col = B[:, k]
            n_ok = col.size
            mean = float(col.mean()) if n_ok else math.nan
            sd = float(col.std(ddof=1)) if n_ok > 1 else math.nan
            if n_ok > 1 and sd > 0:
                p = float(np.mean(2.0 * (1.0 - ndtr(np.abs(col - truth[k]) / sd))))
            else:
                p = math.nan
            per[name] = {
                "mean": mean,
                "sd": sd,
                "mean_se": float(S[:, k].mean()) if n_ok else math.nan,
                "p_value": p,
                "n_ok": n_ok,
            }
        summary[m] = per
        ave_mse[m] = float(np.mean(mses)) if mses else math.nan
    extras = {}
    hs = [r.extras["forestiv_H"] for r in results if "forestiv_H" in r.extras]
    if hs:
        extras["mean_chosen_hotelling"] = float(np.mean(hs))
    rk = [r.extras["forestiv_retained"] for r in results if "forestiv_retained" in r.extras]
    if rk:
        extras["mean_retained"] = float(np.mean(rk))
    return ExperimentReport(cfg.to_dict(), names, tuple(cfg.dgp.beta),
                            tuple(r.seed for r in results), summary, ave_mse, raw, raw_se,
                            failures, extras)


def run_experiment(cfg, threads=1):
    """Run ``cfg.rounds`` independent rounds and aggregate them.

    Rounds may run on ``threads`` worker threads; results are merged by
    round index, so the report does not depend on ``threads``.
    """
    dataset = None
    if cfg.data_path is not None:
        dataset = load_csv(cfg.data_path, cfg.schema)

    def one(r):
        return _round(cfg, r, dataset)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, range(cfg.rounds)))
    else:
        results = [one(r) for r in range(cfg.rounds)]
    return _aggregate(cfg, results)


def sensitivity_sweep(base, axis, values, threads=1):
    """Re-run ``base`` once per value along ``axis``.

    ``axis`` is ``unlabel_size``, ``noise_sd`` (the outcome noise) or
    ``n_trees``. Each report's ``extras`` carries the mean Hotelling
    statistic of the chosen candidates, the model-selection signal for the
    number of trees.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    reports = []
    for v in values:
        if axis == "unlabel_size":
            if int(v) < 0:
                raise ValueError("unlabel size must be non-negative")
            cfg = replace(base, n_unlabel=int(v))
        elif axis == "noise_sd":
            cfg = replace(base, dgp=replace(base.dgp, noise_sd=float(v)))
        else:
            if int(v) < 1:
                raise ValueError("n_trees must be >= 1")
            cfg = replace(base, forest=replace(base.forest, n_trees=int(v)))
        reports.append(run_experiment(cfg, threads))
    return reports
