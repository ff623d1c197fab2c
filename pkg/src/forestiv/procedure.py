"""ForestIV: individual trees as endogenous covariates and instruments.

The workflow is

1. predict every row with every tree (an n x M matrix ``P``);
2. for each tree ``i``, select instruments among the other trees by
   alternating two lasso screens until the set stops changing:
   drop trees whose predictions explain tree ``i``'s error on the test rows,
   then keep trees that explain tree ``i``'s predictions on test + unlabeled
   rows;
3. run 2SLS per tree, compare each estimate with the labeled-data OLS by a
   Hotelling statistic, and pick the retained candidate with the smallest
   empirical MSE.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import regression as reg
from ._seeding import derive_seed, rng_for
from .data import TEST, TRAIN, UNLABEL
from .forest import grow_forest, predict_forest, tree_prediction_matrix
from .lasso import LAMBDA_RULES, TOL, FoldStats

FINAL_SAMPLES = ("unlabel", "label_plus_unlabel")
SELECTION_RULE = "1se"


class NoInstrumentsError(ValueError):
    """Every candidate ended up with an empty instrument set."""


@dataclass(frozen=True)
class IVSelection:
    endog_index: int
    instruments: tuple
    trace: tuple = ()  # per iteration: (|V_i|, |S_i|)
    converged: bool = True
    iterations: int = 0

    def to_dict(self):
        return {
            "endog_index": self.endog_index,
            "instruments": list(self.instruments),
            "trace": [list(t) for t in self.trace],
            "converged": self.converged,
            "iterations": self.iterations,
        }


@dataclass(frozen=True, eq=False)
class Candidate:
    index: int
    selection: IVSelection
    estimate: reg.EstimateResult | None = None
    hotelling: reg.HotellingResult | None = None
    mse: float = math.nan
    retained: bool = False
    error: str | None = None

    def row(self):
        beta = [] if self.estimate is None else self.estimate.beta.tolist()
        return {
            "i": self.index,
            "n_instruments": len(self.selection.instruments),
            "H": None if self.hotelling is None else self.hotelling.statistic,
            "p": None if self.hotelling is None else self.hotelling.p_value,
            "mse": None if math.isnan(self.mse) else self.mse,
            "retained": self.retained,
            "beta": beta,
            "error": self.error,
        }


@dataclass(frozen=True, eq=False)
class ForestIVOutput:
    """All per-tree candidates plus the chosen one.

    ``chosen`` is the position in ``candidates`` of the retained candidate
    with the smallest empirical MSE, or ``None`` when nothing was retained.
    """

    candidates: tuple
    chosen: int | None
    reference: reg.EstimateResult
    alpha: float
    critical_value: float
    n_empty: int = 0
    final_sample: str = "unlabel"
    bootstrap_se: np.ndarray | None = None
    bootstrap_degenerate: int | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def chosen_candidate(self):
        return None if self.chosen is None else self.candidates[self.chosen]

    @property
    def estimate(self):
        c = self.chosen_candidate
        return None if c is None else c.estimate

    def retained(self):
        return [c for c in self.candidates if c.retained]

    def retained_indices(self):
        return [c.index for c in self.candidates if c.retained]

    def to_dict(self):
        chosen = self.chosen_candidate
        out = {
            "alpha": self.alpha,
            "critical_value": self.critical_value,
            "final_sample": self.final_sample,
            "reference": self.reference.to_dict(),
            "n_candidates": len(self.candidates),
            "n_empty_instrument_sets": self.n_empty,
            "n_retained": len(self.retained()),
            "no_valid_tuple": chosen is None,
            "chosen": None,
            "candidates": [c.row() for c in self.candidates],
            "diagnostics": self.diagnostics,
        }
        if chosen is not None:
            out["chosen"] = {
                "i": chosen.index,
                "instruments": list(chosen.selection.instruments),
                "estimate": chosen.estimate.to_dict(),
                "hotelling": chosen.hotelling.to_dict(),
                "mse": chosen.mse,
            }
        if self.bootstrap_se is not None:
            out["bootstrap_se"] = np.asarray(self.bootstrap_se).tolist()
            out["bootstrap_degenerate"] = self.bootstrap_degenerate
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_csv(self):
        names = self.reference.names
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "n_instruments", "H", "p", "mse", "retained", "chosen"]
                   + [f"beta_{n}" for n in names])
        for pos, c in enumerate(self.candidates):
            r = c.row()
            beta = r["beta"] or [""] * len(names)
            w.writerow([r["i"], r["n_instruments"], r["H"], r["p"], r["mse"],
                        int(r["retained"]), int(pos == self.chosen)] + list(beta))
        return buf.getvalue()

    def with_bootstrap(self, se, degenerate):
        return ForestIVOutput(self.candidates, self.chosen, self.reference, self.alpha,
                              self.critical_value, self.n_empty, self.final_sample,
                              np.asarray(se), degenerate, self.diagnostics)


# ---------------------------------------------------------------- selection


class _Selector:
    """Shared lasso statistics for all selection runs on one prediction matrix.

    ``stats_test`` covers ``[P_test, truth_test]`` and ``stats_pool`` covers
    ``P_pool``; responses and predictor subsets are expressed as column
    weights, so nothing is recomputed per tree.
    """

    def __init__(self, P_test, truth_test, P_pool, n_folds=10, seed=0, rule=SELECTION_RULE,
                 tol=TOL):
        P_test = np.asarray(P_test, dtype=np.float64)
        P_pool = np.asarray(P_pool, dtype=np.float64)
        truth_test = np.asarray(truth_test, dtype=np.float64).ravel()
        if P_test.ndim != 2 or P_test.shape[0] == 0:
            raise ValueError("test partition empty")
        M = P_test.shape[1]
        if M < 2:
            raise ValueError("need M >= 2 trees")
        if P_pool.ndim != 2 or P_pool.shape[1] != M:
            raise ValueError("test and pool prediction matrices disagree on M")
        if truth_test.size != P_test.shape[0]:
            raise ValueError("truth_test length does not match the test predictions")
        self.M = M
        if rule not in LAMBDA_RULES:
            raise ValueError(f"lambda_rule must be one of {LAMBDA_RULES}, got {rule!r}")
        self.rule = rule
        self.tol = tol
        nf1 = min(n_folds, P_test.shape[0])
        nf2 = min(n_folds, P_pool.shape[0])
        self.stats_test = FoldStats(np.column_stack([P_test, truth_test]), nf1,
                                    derive_seed(seed, "folds", "test"))
        self.stats_pool = FoldStats(P_pool, nf2, derive_seed(seed, "folds", "pool"))

    def run(self, weights, candidates, label):
        """Iterate the two screens for the response ``P @ weights``."""
        M = self.M
        w1 = np.append(weights, -1.0)  # error = prediction - truth
        curr = np.asarray(candidates, dtype=np.int64)
        trace = []
        converged = False
        for _ in range(M - 1):
            if curr.size == 0:
                converged = True
                break
            _, coef, _ = self.stats_test.cv_select(curr, w1, self.rule, self.tol)
            valid = curr[coef == 0.0]
            if valid.size:
                _, coef2, _ = self.stats_pool.cv_select(valid, weights, self.rule, self.tol)
                strong = valid[coef2 != 0.0]
            else:
                strong = valid
            trace.append((int(valid.size), int(strong.size)))
            if np.array_equal(strong, curr):
                converged = True
                break
            if not (strong.size < curr.size and np.all(np.isin(strong, curr))):
                raise RuntimeError("instrument selection failed to shrink the candidate set")
            curr = strong
        else:
            converged = curr.size == 0 or converged
        if len(trace) > M - 1:
            raise RuntimeError("instrument selection exceeded M - 1 iterations")
        return IVSelection(label, tuple(int(j) for j in curr), tuple(trace),
                           converged, len(trace))

    def select(self, i):
        w = np.zeros(self.M)
        w[i] = 1.0
        others = np.array([j for j in range(self.M) if j != i], dtype=np.int64)
        return self.run(w, others, int(i))


def select_instruments(i, tree_pred_test, truth_test, tree_pred_pool, n_folds=10, seed=0,
                       lambda_rule=SELECTION_RULE):
    """Instrument set for tree ``i``.

    Parameters
    ----------
    i : int
        Index of the endogenous tree.
    tree_pred_test : ndarray, shape (n_test, M)
        Tree predictions on the test rows.
    truth_test : ndarray, shape (n_test,)
    tree_pred_pool : ndarray, shape (n_test + n_unlabel, M)
        Tree predictions on test and unlabeled rows.
    n_folds, seed
        Cross-validation settings for both lasso screens.
    lambda_rule : {"1se", "min"}
        Penalty choice along the CV curve of both screens. The
        one-standard-error rule is the default because the minimum-error
        penalty tends to admit pure-noise columns.

    Returns
    -------
    IVSelection
    """
    sel = _Selector(tree_pred_test, truth_test, tree_pred_pool, n_folds, seed, lambda_rule)
    if not 0 <= i < sel.M:
        raise ValueError(f"tree index {i} out of range for M={sel.M}")
    return sel.select(i)


# ---------------------------------------------------------------- estimation


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _final_rows(partition, final_sample):
    if final_sample == "unlabel":
        return np.flatnonzero(partition == UNLABEL)
    if final_sample == "label_plus_unlabel":
        return np.arange(partition.size)
    raise ValueError(f"final_sample must be one of {FINAL_SAMPLES}")


def label_estimate(y, truth, Z, partition, x_name="x", control_names=None):
    """OLS with the true covariate on the labeled (train + test) rows."""
    rows = np.flatnonzero((partition == TRAIN) | (partition == TEST))
    Z = np.asarray(Z, dtype=np.float64)
    if rows.size <= Z.shape[1] + 1:
        raise ValueError("labeled sample too small for OLS")
    names = reg.coef_names(x_name, control_names, Z.shape[1])
    return reg.ols(y[rows], reg.design(truth[rows], Z[rows]), names)


def _estimate_candidates(selections, xs, Pf, yf, Zf, ref, crit, names, threads):
    def one(args):
        sel, x = args
        if not sel.instruments:
            return Candidate(sel.endog_index, sel)
        try:
            est = reg.tsls(yf, x, Zf, Pf[:, list(sel.instruments)], names)
        except ValueError as exc:
            return Candidate(sel.endog_index, sel, error=str(exc))
        est = reg.EstimateResult(est.beta, est.vcov, est.n, "forestiv", names)
        h = reg.hotelling(est, ref)
        return Candidate(sel.endog_index, sel, est, h, reg.empirical_mse(est, ref),
                         h.statistic < crit)

    return _map(one, list(zip(selections, xs)), threads)


def _assemble(cands, ref, alpha, crit, final_sample):
    n_empty = sum(1 for c in cands if not c.selection.instruments)
    if n_empty == len(cands):
        raise NoInstrumentsError("all instrument selections are empty")
    chosen = None
    best = math.inf
    for pos, c in enumerate(cands):
        if c.retained and c.mse < best:
            best, chosen = c.mse, pos
    return ForestIVOutput(tuple(cands), chosen, ref, alpha, crit, n_empty, final_sample)


def forest_iv_from_predictions(P, truth, partition, y, Z, alpha=0.05,
                               final_sample="unlabel", n_folds=10, seed=0, threads=1,
                               x_name="x", control_names=None, lambda_rule=SELECTION_RULE):
    """Run the full procedure from a precomputed n x M prediction matrix.

    Parameters
    ----------
    P : ndarray, shape (n, M)
        Tree predictions for every row.
    truth : ndarray, shape (n,)
        True covariate; only train and test rows are read.
    partition : ndarray of str, shape (n,)
    y : ndarray, shape (n,)
    Z : ndarray, shape (n, k)
        Controls with the intercept in column 0.
    alpha : float
        Hotelling level; candidates with ``H >= chi2_{K, 1 - alpha}`` are rejected.
    final_sample : {"unlabel", "label_plus_unlabel"}
        Rows used for the per-candidate 2SLS.
    n_folds, seed
        Lasso cross-validation settings.
    threads : int
        Workers for the per-candidate loop; the result does not depend on it.
    lambda_rule : {"1se", "min"}
        Penalty choice in both lasso screens; see :func:`select_instruments`.
    """
    P = np.asarray(P, dtype=np.float64)
    partition = np.asarray(partition)
    truth = np.asarray(truth, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    ref = label_estimate(y, truth, Z, partition, x_name, control_names)
    crit = reg.chi2_critical(alpha, ref.k)

    test = np.flatnonzero(partition == TEST)
    pool = np.flatnonzero((partition == TEST) | (partition == UNLABEL))
    selector = _Selector(P[test], truth[test], P[pool], n_folds, seed, lambda_rule)
    selections = _map(selector.select, range(P.shape[1]), threads)

    final = _final_rows(partition, final_sample)
    Pf = P[final]
    xs = [Pf[:, i] for i in range(P.shape[1])]
    cands = _estimate_candidates(selections, xs, Pf, y[final], Z[final], ref, crit,
                                 ref.names, threads)
    return _assemble(cands, ref, alpha, crit, final_sample)


def forest_iv(forest, d, econ, alpha=0.05, final_sample="unlabel", n_folds=10, seed=0,
              threads=1, lambda_rule=SELECTION_RULE):
    """ForestIV on a dataset and its regression sample.

    ``econ`` must cover every row of ``d`` in the same order. Its ``y`` and
    ``controls`` are used as given; the covariate of interest is taken from
    ``d.truth`` on labeled rows and from the trees elsewhere, so ``econ.x``
    is ignored.
    """
    if econ.m != d.n:
        raise ValueError("econ sample must cover every dataset row")
    P = tree_prediction_matrix(forest, d.features)
    return forest_iv_from_predictions(P, d.truth, d.partition, econ.y, econ.controls, alpha,
                                      final_sample, n_folds, seed, threads,
                                      econ.x_name, econ.control_names, lambda_rule)


def biased_estimate(x_hat, y, Z, partition, final_sample="unlabel", x_name="x",
                    control_names=None):
    """OLS that plugs the forest prediction in for the covariate."""
    rows = _final_rows(np.asarray(partition), final_sample)
    Z = np.asarray(Z, dtype=np.float64)
    names = reg.coef_names(x_name, control_names, Z.shape[1])
    return reg.ols(np.asarray(y)[rows], reg.design(np.asarray(x_hat)[rows], Z[rows]), names)


# ---------------------------------------------------------------- alternatives


def averaging_estimate(out):
    """Unweighted mean of every retained candidate.

    The reported covariance is the mean of the candidates' covariances. It
    is descriptive only and not a valid sampling variance of the average.
    """
    kept = out.retained()
    if not kept:
        raise ValueError("no retained candidates to average")
    beta = np.mean([c.estimate.beta for c in kept], axis=0)
    vcov = np.mean([c.estimate.vcov for c in kept], axis=0)
    return reg.EstimateResult(beta, vcov, kept[0].estimate.n, "averaging",
                              out.reference.names,
                              {"n_averaged": len(kept), "vcov": "descriptive mean of vcovs"})


def sample_split_iv(d, y, Z, params=None, seed=0, final_sample="unlabel", threads=1,
                    x_name="x", control_names=None):
    """Two forests on disjoint halves of the training rows.

    Forest 1's prediction is the endogenous covariate and forest 2's the
    single instrument in a 2SLS on the final sample.
    """
    train = d.rows(TRAIN)
    if train.size < 4:
        raise ValueError(f"training partition too small to split ({train.size} rows)")
    perm = rng_for(seed, "sample-split").permutation(train)
    half = train.size // 2
    halves = (np.sort(perm[:half]), np.sort(perm[half:2 * half]))
    preds = []
    for k, rows in enumerate(halves):
        f = grow_forest(d.features[rows], d.truth[rows], params,
                        derive_seed(seed, "sample-split", k), threads)
        preds.append(predict_forest(f, d.features))
    final = _final_rows(d.partition, final_sample)
    Z = np.asarray(Z, dtype=np.float64)
    names = reg.coef_names(x_name, control_names, Z.shape[1])
    est = reg.tsls(np.asarray(y)[final], preds[0][final], Z[final], preds[1][final], names)
    return reg.EstimateResult(est.beta, est.vcov, est.n, "tsls", names,
                              {"design": "sample-split"})


def subset_tree_iv(P, truth, partition, y, Z, q_percent=50, n_draws=100, seed=0,
                   alpha=0.05, final_sample="unlabel", n_folds=10, threads=1,
                   x_name="x", control_names=None, lambda_rule=SELECTION_RULE):
    """Average of a random ``q_percent`` of trees as the endogenous covariate.

    Each draw averages ``ceil(q M / 100)`` randomly chosen trees, selects
    instruments among the remaining trees with the same two lasso screens,
    and yields one candidate. ``Candidate.index`` is the draw number; the
    drawn tree indices are recorded in ``diagnostics["subsets"]``.
    """
    if not 0 < q_percent < 100:
        raise ValueError("q_percent must lie strictly between 0 and 100")
    P = np.asarray(P, dtype=np.float64)
    partition = np.asarray(partition)
    truth = np.asarray(truth, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    M = P.shape[1]
    size = math.ceil(q_percent * M / 100)
    if size >= M:
        raise ValueError("subset leaves no trees to serve as instruments")
    rng = rng_for(seed, "subset-draws")
    subsets = [np.sort(rng.choice(M, size=size, replace=False)) for _ in range(n_draws)]

    ref = label_estimate(y, truth, Z, partition, x_name, control_names)
    crit = reg.chi2_critical(alpha, ref.k)
    test = np.flatnonzero(partition == TEST)
    pool = np.flatnonzero((partition == TEST) | (partition == UNLABEL))
    selector = _Selector(P[test], truth[test], P[pool], n_folds, seed, lambda_rule)

    def select(k):
        w = np.zeros(M)
        w[subsets[k]] = 1.0 / size
        rest = np.setdiff1d(np.arange(M), subsets[k])
        return selector.run(w, rest, k)

    selections = _map(select, range(n_draws), threads)
    final = _final_rows(partition, final_sample)
    Pf = P[final]
    xs = [Pf[:, s].mean(axis=1) for s in subsets]
    cands = _estimate_candidates(selections, xs, Pf, y[final], Z[final], ref, crit,
                                 ref.names, threads)
    out = _assemble(cands, ref, alpha, crit, final_sample)
    out.diagnostics["subsets"] = [s.tolist() for s in subsets]
    return out


# ---------------------------------------------------------------- bootstrap


@dataclass(frozen=True)
class BootstrapResult:
    se: np.ndarray
    n_ok: int
    n_degenerate: int
    draws: np.ndarray


def resample_within_partitions(partition, rng):
    """Row indices drawn with replacement separately inside each partition."""
    partition = np.asarray(partition)
    parts = []
    for tag in (TRAIN, TEST, UNLABEL):
        rows = np.flatnonzero(partition == tag)
        if rows.size:
            parts.append(rng.choice(rows, size=rows.size, replace=True))
    return np.sort(np.concatenate(parts))


def bootstrap_se(pipeline, partition, B=50, seed=0, threads=1):
    """Bootstrap standard errors of a pipeline's chosen coefficients.

    Parameters
    ----------
    pipeline : callable
        ``pipeline(rows, seed)`` reruns the whole procedure (forest included)
        on the resampled row indices and returns a :class:`ForestIVOutput`,
        an :class:`~forestiv.regression.EstimateResult`, or ``None``.
    partition : ndarray of str
        Partition tags of the original rows; resampling stays within each tag.
    B : int
        Number of replicates, at least 2.

    Replicates that raise :class:`NoInstrumentsError` or retain no
    candidate are counted as degenerate and left out.
    """
    if B < 2:
        raise ValueError("B must be >= 2")

    def one(b):
        rows = resample_within_partitions(partition, rng_for(seed, "bootstrap-rows", b))
        try:
            res = pipeline(rows, derive_seed(seed, "bootstrap-fit", b))
        except NoInstrumentsError:
            return None
        if isinstance(res, ForestIVOutput):
            res = res.estimate
        return None if res is None else res.beta

    betas = _map(one, range(B), threads)
    ok = [b for b in betas if b is not None]
    if not ok:
        raise ValueError("all bootstrap replicates were degenerate")
    draws = np.array(ok)
    se = draws.std(axis=0, ddof=1) if len(ok) > 1 else np.full(draws.shape[1], math.nan)
    return BootstrapResult(se, len(ok), B - len(ok), draws)


# ---------------------------------------------------------------- binary diagnostics


@dataclass(frozen=True)
class BinaryCellCounts:
    """Counts of ``(X, Xhat_i, Xhat_j)`` over {0,1}^3, indexed ``counts[x, i, j]``."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64).reshape(2, 2, 2)
        if np.any(c < 0):
            raise ValueError("cell counts must be non-negative")
        if c.sum() < 1:
            raise ValueError("cell counts must sum to at least 1")
        object.__setattr__(self, "counts", c)

    @property
    def N(self):
        return int(self.counts.sum())

    @classmethod
    def from_vectors(cls, x, xi, xj):
        c = np.zeros((2, 2, 2), dtype=np.int64)
        np.add.at(c, (np.asarray(x, int), np.asarray(xi, int), np.asarray(xj, int)), 1)
        return cls(c)

    def expand(self):
        """Materialize the 0/1 vectors ``(x, xi, xj)`` the counts describe."""
        rows = [(a, b, g) for a in (0, 1) for b in (0, 1) for g in (0, 1)
                for _ in range(int(self.counts[a, b, g]))]
        return tuple(np.array(v, dtype=np.float64) for v in zip(*rows))


def _ncov(c, fa, fb):
    """``N * sum(a b) - sum(a) sum(b)`` over cells, in exact integers."""
    sab = sa = sb = 0
    for x in (0, 1):
        for i in (0, 1):
            for j in (0, 1):
                n = int(c[x, i, j])
                a, b = fa(x, i, j), fb(x, i, j)
                sab += n * a * b
                sa += n * a
                sb += n * b
    return int(c.sum()) * sab - sa * sb


def theorem3_value(c):
    """``n10 (n00 + 2 n01) + n01 n11`` on the (X, Xhat_i) margin; positive means Cov(e_i, X) < 0."""
    m = c.sum(axis=2)
    n00, n01, n10, n11 = (int(v) for v in (m[0, 0], m[0, 1], m[1, 0], m[1, 1]))
    return n10 * (n00 + 2 * n01) + n01 * n11


def theorem4_value(c):
    """Cell-count polynomial whose sign is the sign of Cov(e_i, e_j)."""
    n = {(a, b, g): int(c[a, b, g]) for a in (0, 1) for b in (0, 1) for g in (0, 1)}
    n0 = sum(v for k, v in n.items() if k[0] == 0)
    n1 = sum(v for k, v in n.items() if k[0] == 1)
    return ((n[0, 0, 0] + n[1, 1, 1]) * (n[0, 1, 1] + n[1, 0, 0])
            + 2 * (n0 - n[0, 0, 0]) * n[1, 0, 0]
            + 2 * (n1 - n[1, 1, 1]) * n[0, 1, 1]
            + (n[0, 1, 0] - n[1, 0, 1]) * (n[1, 1, 0] - n[0, 0, 1]))


def binary_cov_diagnostics(c):
    """Population covariances (divisor N) of the tree errors, from cell counts.

    Returns a dict with ``cov_ei_x`` = Cov(e_i, X), ``cov_ei_ej`` =
    Cov(e_i, e_j), ``cov_ej_xhat`` = Cov(e_i, Xhat_j), the Theorem-3 check
    ``theorem3_sign_ok`` and the boolean ``theorem4_condition``. When every
    row has the same X, all covariances are reported as 0 and ``degenerate``
    is set.
    """
    if not isinstance(c, BinaryCellCounts):
        c = BinaryCellCounts(c)
    cnt = c.counts
    N = c.N
    if N < 2:
        raise ValueError("need N >= 2")
    degenerate = cnt[0].sum() == 0 or cnt[1].sum() == 0
    ei = lambda x, i, j: i - x  # noqa: E731
    ej = lambda x, i, j: j - x  # noqa: E731
    n2 = N * N
    if degenerate:
        cov_x = cov_ij = cov_jhat = 0.0
    else:
        cov_x = _ncov(cnt, ei, lambda x, i, j: x) / n2
        cov_ij = _ncov(cnt, ei, ej) / n2
        cov_jhat = _ncov(cnt, ei, lambda x, i, j: j) / n2
    t3 = theorem3_value(cnt)
    return {
        "cov_ei_x": cov_x,
        "cov_ei_ej": cov_ij,
        "cov_ej_xhat": cov_jhat,
        "theorem3_value": t3,
        "theorem3_sign_ok": bool(t3 <= 0 or cov_x < 0 or degenerate),
        "theorem4_value": theorem4_value(cnt),
        "theorem4_condition": bool(theorem4_value(cnt) > 0),
        "degenerate": bool(degenerate),
    }


@dataclass(frozen=True, eq=False)
class Theorem1Diagnostic:
    """``matrix[i, j]`` = Cov(Xhat_j, e_i) on the test rows; the diagonal is nan."""

    matrix: np.ndarray
    mean: float
    max_abs: float

    def to_dict(self):
        return {"mean_cov": self.mean, "max_abs_cov": self.max_abs}


def theorem1_diagnostic(P_test, truth_test):
    """Empirical covariance between each tree's prediction and other trees' errors.

    ``P_test`` may also be a fitted forest paired with a test
    :class:`~forestiv.data.Dataset` through :func:`theorem1_from_forest`.
    """
    P = np.asarray(P_test, dtype=np.float64)
    x = np.asarray(truth_test, dtype=np.float64).ravel()
    if P.shape[0] < 3:
        raise ValueError("need at least 3 test rows")
    E = P - x[:, None]
    Pc = P - P.mean(axis=0)
    Ec = E - E.mean(axis=0)
    C = Ec.T @ Pc / P.shape[0]
    np.fill_diagonal(C, np.nan)
    off = C[~np.isnan(C)]
    if off.size == 0:
        return Theorem1Diagnostic(C, 0.0, 0.0)
    return Theorem1Diagnostic(C, float(off.mean()), float(np.abs(off).max()))


def theorem1_from_forest(forest, d):
    rows = d.rows(TEST)
    return theorem1_diagnostic(tree_prediction_matrix(forest, d.features[rows]), d.truth[rows])


def instrument_diagnostics(out, P, truth, partition, Z):
    """First-stage F and exclusion adjusted R^2 for the chosen candidate.

    Both are reported for the selected instruments and for the full set of
    other trees, so the effect of selection is visible.
    """
    c = out.chosen_candidate
    if c is None:
        return {}
    P = np.asarray(P, dtype=np.float64)
    partition = np.asarray(partition)
    final = _final_rows(partition, out.final_sample)
    test = np.flatnonzero(partition == TEST)
    i = c.index
    sel = list(c.selection.instruments)
    others = [j for j in range(P.shape[1]) if j != i]
    e = P[test, i] - np.asarray(truth)[test]

    def safe(fn, *args):
        try:
            v = fn(*args)
        except ValueError:
            return None
        return None if math.isnan(v) else (v if math.isfinite(v) else "inf")

    return {
        "first_stage_f_selected": safe(reg.first_stage_f, P[final, i], P[final][:, sel], Z[final]),
        "first_stage_f_all": safe(reg.first_stage_f, P[final, i], P[final][:, others], Z[final]),
        "exclusion_r2_selected": safe(reg.exclusion_r2, e, P[test][:, sel]),
        "exclusion_r2_all": safe(reg.exclusion_r2, e, P[test][:, others]),
    }
