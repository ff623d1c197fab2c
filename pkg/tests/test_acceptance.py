"""End-to-end acceptance checks; each test prints one PASS/FAIL verdict line.

The Monte Carlo experiments take several minutes each; deselect them with
``-m "not slow"``.
"""

import itertools
import math
import os
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, special

from forestiv import regression as reg
from forestiv.baselines import SimexConfig, simex
from forestiv.cli import experiment_config, load_preset
from forestiv.lasso import fit_lasso
from forestiv.procedure import binary_cov_diagnostics, select_instruments, theorem3_value
from forestiv.simlab import ExperimentConfig, TruthSpec, run_experiment, sensitivity_sweep

THREADS = os.cpu_count() or 1
BETA_X = 0.5


def preset(name, **overrides):
    return replace(experiment_config(load_preset(name)), **overrides)


@pytest.fixture(scope="module")
def continuous():
    return run_experiment(preset("bike"), THREADS)


@pytest.fixture(scope="module")
def binary():
    return run_experiment(preset("bank"), THREADS)


def x_mean(rep, method, coef="x"):
    return rep.stat(method, coef)


@pytest.mark.slow
def test_criterion_1_continuous_correction(continuous, verdict):
    rep = continuous
    assert rep.config["rounds"] == 30 and rep.config["forest"]["n_trees"] == 100
    b = x_mean(rep, "biased") - BETA_X
    f = x_mean(rep, "forestiv") - BETA_X
    ok = abs(b) > 0.04 and abs(f) < 0.03 and abs(f) < 0.5 * abs(b)
    assert verdict(1, ok, f"biased {b + BETA_X:.4f}, ForestIV {f + BETA_X:.4f} "
                          f"(need |bias| > 0.04, < 0.03 and below half the biased one)")


@pytest.mark.slow
def test_criterion_2_binary_correction(binary, verdict):
    rep = binary
    assert rep.config["rounds"] == 30
    b = x_mean(rep, "biased") - BETA_X
    f = x_mean(rep, "forestiv") - BETA_X
    ok = b < -0.1 and abs(f) <= 0.06
    assert verdict(2, ok, f"biased {b + BETA_X:.4f}, ForestIV {f + BETA_X:.4f} "
                          f"(need biased < 0.4, ForestIV within 0.06 of 0.5)")


@pytest.mark.slow
def test_criterion_3_precision_gain(continuous, verdict):
    sd_f = continuous.stat("forestiv", "x", "sd")
    sd_u = continuous.stat("unbiased", "x", "sd")
    assert verdict(3, sd_f < sd_u, f"sd ForestIV {sd_f:.4f} vs unbiased {sd_u:.4f}")


def _simex_classical(reps=20, n=5000, beta=1.0, s1=1.0, se=0.5):
    """Grid means, their MC standard errors and the SIMEX/naive estimates over replicates."""
    grids, fits = [], []
    for r in range(reps):
        rng = np.random.default_rng(1000 + r)
        x = s1 * rng.standard_normal(n)
        z = rng.standard_normal(n)
        y = 2.0 + beta * x + 0.5 * z + 0.5 * rng.standard_normal(n)
        w = x + se * rng.standard_normal(n)
        out = simex(y, w, np.column_stack([np.ones(n), z]), se, SimexConfig(B=50, seed=r))
        grids.append(np.array(out.info["grid_beta"])[:, 1])
        fits.append(out.beta[1])
        lambdas = np.array(out.info["lambdas"])
    grids = np.array(grids)
    curve = beta * s1 ** 2 / (s1 ** 2 + (1 + lambdas) * se ** 2)
    mc_se = grids.std(axis=0, ddof=1) / np.sqrt(reps)
    return grids.mean(axis=0), mc_se, curve, float(np.mean(fits))


@pytest.mark.slow
def test_criterion_4_simex_benchmark(verdict):
    grid, mc_se, curve, simex_beta = _simex_classical()
    on_curve = bool(np.all(np.abs(grid - curve) <= 3 * mc_se))
    naive_bias, simex_bias = abs(grid[0] - 1.0), abs(simex_beta - 1.0)
    reduction = 1 - simex_bias / naive_bias

    rep = run_experiment(preset("boston_simex"), THREADS)
    fiv = abs(x_mean(rep, "forestiv") - BETA_X)
    sx = abs(x_mean(rep, "simex") - BETA_X)
    ok = on_curve and reduction >= 0.7 and fiv <= sx
    assert verdict(4, ok, f"grid on curve {on_curve}, SIMEX bias reduction {reduction:.1%}; "
                          f"small design |bias| ForestIV {fiv:.4f} vs SIMEX {sx:.4f} "
                          f"(sd {rep.stat('forestiv', 'x', 'sd'):.4f} vs "
                          f"{rep.stat('simex', 'x', 'sd'):.4f})")


@pytest.mark.slow
def test_criterion_5_simex_blindspot(verdict):
    cfg = preset("blindspot")
    assert cfg.dgp.error_corr == (2, 0.3)
    rep = run_experiment(cfg, THREADS)
    truth = cfg.dgp.beta[3]
    bias = {m: abs(x_mean(rep, m, "z2") - truth) for m in ("biased", "simex", "forestiv")}
    ok = bias["simex"] > bias["biased"] > bias["forestiv"]
    assert verdict(5, ok, "|bias| on z2: naive {biased:.4f}, SIMEX {simex:.4f}, "
                          "ForestIV {forestiv:.4f}".format(**bias))


def all_counts(N):
    """Every 2x2x2 table of non-negative counts summing to N (stars and bars)."""
    for bars in itertools.combinations(range(N + 7), 7):
        cuts = (-1,) + bars + (N + 7,)
        yield np.array([cuts[k + 1] - cuts[k] - 1 for k in range(8)]).reshape(2, 2, 2)


def test_criterion_6_binary_oracles(verdict):
    total = checked = t4_agree = t3_cases = t3_ok = 0
    for c in all_counts(6):
        total += 1
        d = binary_cov_diagnostics(c)
        if theorem3_value(c) > 0:
            t3_cases += 1
            t3_ok += d["cov_ei_x"] < 0
        if d["degenerate"]:
            continue
        checked += 1
        t4_agree += (d["cov_ei_ej"] > 0) == d["theorem4_condition"]
    assert total == math.comb(13, 7)
    ok = t4_agree == checked and t3_ok == t3_cases and checked > 0
    assert verdict(6, ok, f"Theorem 4 sign agreement {t4_agree}/{checked} non-degenerate "
                          f"tables; Theorem 3 sign {t3_ok}/{t3_cases}")


def _kkt_violation(X, y, fit):
    Xc = X - X.mean(axis=0)
    sd = np.sqrt(np.mean(Xc ** 2, axis=0))
    sd[sd == 0] = 1.0
    Xs = Xc / sd
    g = Xs.T @ (y - y.mean() - Xs @ fit.coef_std) / y.size
    b = fit.coef_std
    zero = b == 0
    return max(np.max(np.abs(g[zero]) - fit.lam, initial=0.0),
               np.max(np.abs(g[~zero] - fit.lam * np.sign(b[~zero])), initial=0.0))


def _chi2_density(t, k):
    return t ** (k / 2 - 1) * math.exp(-t / 2) / (2 ** (k / 2) * special.gamma(k / 2))


def test_criterion_7_estimator_oracles(verdict):
    rng = np.random.default_rng(7)
    notes = []

    # 2SLS with the regressor as its own instrument is OLS
    n = 200
    x, z = rng.standard_normal(n), rng.standard_normal(n)
    y = 1 + 2 * x - z + rng.standard_normal(n)
    Z = np.column_stack([np.ones(n), z])
    self_iv = reg.tsls(y, x, Z, x).beta
    ols = reg.ols(y, reg.design(x, Z)).beta
    e1 = float(np.max(np.abs(self_iv - ols) / np.abs(ols)))
    notes.append(f"self-IV {e1:.1e}")

    # exactly identified 2SLS with only an intercept is the Wald ratio
    w = rng.standard_normal(n)
    xx = w + rng.standard_normal(n)
    yy = 0.5 * xx + rng.standard_normal(n)
    wald = np.cov(w, yy)[0, 1] / np.cov(w, xx)[0, 1]
    e2 = abs(reg.tsls(yy, xx, np.ones((n, 1)), w).beta[1] - wald) / abs(wald)
    notes.append(f"Wald {e2:.1e}")

    # lasso KKT conditions on random problems
    worst = 0.0
    for _ in range(1000):
        n_k, q = int(rng.integers(20, 80)), int(rng.integers(2, 15))
        X = rng.standard_normal((n_k, q)) * rng.uniform(0.5, 3, q)
        yk = X[:, : min(3, q)] @ rng.normal(0, 2, min(3, q)) + rng.standard_normal(n_k)
        fit = fit_lasso(X, yk, float(rng.uniform(0.01, 0.5)))
        worst = max(worst, _kkt_violation(X, yk, fit))
    notes.append(f"KKT {worst:.1e}")

    # Hotelling rejection rate under the null
    K, reps = 4, 2000
    Sa, Sb = np.diag([1.0, 2, 0.5, 1]), np.eye(K) * 0.3
    crit = reg.chi2_critical(0.05, K)
    rejects = 0
    for _ in range(reps):
        a = reg.EstimateResult(rng.multivariate_normal(np.zeros(K), Sa), Sa, 10, "ols")
        b = reg.EstimateResult(rng.multivariate_normal(np.zeros(K), Sb), Sb, 10, "ols")
        rejects += reg.hotelling(a, b).statistic >= crit
    rate = rejects / reps
    notes.append(f"Hotelling rate {rate:.3f}")

    # chi-square tail against numerical integration
    tail_err = 0.0
    for k in range(1, 11):
        for h in (0.3, 1.0, 4.0, 9.5, 20.0, 35.0):
            tail, _ = integrate.quad(_chi2_density, h, np.inf, args=(k,), epsabs=1e-13,
                                     epsrel=1e-12, limit=200)
            tail_err = max(tail_err, abs(reg.chi2_sf(h, k) - tail))
    notes.append(f"chi2 tail {tail_err:.1e}")

    ok = (e1 < 1e-10 and e2 < 1e-10 and worst < 1e-6 and 0.03 <= rate <= 0.07
          and tail_err < 1e-6)
    assert verdict(7, ok, ", ".join(notes))


def _planted(seed, n_test=200, n_pool=2000, M=12, sd=0.6):
    """Tree-like columns with an invalid column (M - 2) and a weak one (M - 1).

    The invalid column shares tree 0's error; the weak column is unrelated
    to the covariate.
    """
    rng = np.random.default_rng(seed)
    n = n_test + n_pool
    x = rng.standard_normal(n)
    E = sd * rng.standard_normal((n, M))
    P = x[:, None] + E
    P[:, M - 2] = E[:, 0] + 0.1 * rng.standard_normal(n)
    P[:, M - 1] = rng.standard_normal(n)
    return P[:n_test], x[:n_test], P


def _shrinks(sel, M):
    sizes = [M - 1] + [s for _, s in sel.trace]
    steps = list(zip(sizes[:-1], sizes[1:]))
    return (sel.iterations <= M - 1 and all(b < a for a, b in steps[:-1])
            and all(b <= a for a, b in steps[-1:]))


def test_criterion_8_selection_excludes_planted(verdict):
    M, trials = 12, 50
    excluded_invalid = excluded_weak = runs = well_formed = 0
    for seed in range(trials):
        P_test, x_test, P_pool = _planted(seed, M=M)
        sel = select_instruments(0, P_test, x_test, P_pool, seed=seed)
        excluded_invalid += (M - 2) not in sel.instruments
        excluded_weak += (M - 1) not in sel.instruments
        for i in range(M):
            s = sel if i == 0 else select_instruments(i, P_test, x_test, P_pool, seed=seed)
            runs += 1
            well_formed += _shrinks(s, M)
    ok = (well_formed == runs and excluded_invalid >= 0.9 * trials
          and excluded_weak >= 0.9 * trials)
    assert verdict(8, ok, f"termination and shrinkage on {well_formed}/{runs} selections; "
                          f"invalid excluded {excluded_invalid}/{trials}, "
                          f"weak excluded {excluded_weak}/{trials}")


@pytest.mark.slow
def test_criterion_9_interval_narrows(verdict):
    base = preset("bike", rounds=10, methods=("forestiv",))
    sizes = [500, 5000, 20000]
    reps = sensitivity_sweep(base, "unlabel_size", sizes, THREADS)
    widths = [2 * 1.96 * r.stat("forestiv", "x", "mean_se") for r in reps]
    ok = widths[0] > widths[1] > widths[2]
    shown = ", ".join(f"{s}: {w:.4f}" for s, w in zip(sizes, widths))
    assert verdict(9, ok, f"mean CI width over 10 seeds by unlabeled size {shown}")


def test_criterion_10_determinism(verdict):
    cfg = ExperimentConfig(n_train=200, n_test=80, n_unlabel=400, rounds=4,
                           truth=TruthSpec(p=5), methods=("biased", "unbiased", "forestiv",
                                                          "averaging", "simex"),
                           master_seed=11)
    cfg = replace(cfg, forest=replace(cfg.forest, n_trees=25))
    one = run_experiment(cfg, threads=1).to_json(timestamp=False)
    again = run_experiment(cfg, threads=1).to_json(timestamp=False)
    four = run_experiment(cfg, threads=4).to_json(timestamp=False)
    ok = one == again == four
    assert verdict(10, ok, f"reports identical across reruns and threads {{1, 4}}: {ok} "
                           f"({len(one)} bytes)")
