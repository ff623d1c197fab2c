"""Simulation-extrapolation correctors for mismeasured covariates.

``simex`` handles additive noise on a continuous covariate; ``mc_simex``
handles misclassification of a binary one. Both add extra error at levels
``lambda`` on a grid, fit a quadratic in ``lambda`` through the averaged
coefficients (including the naive fit at ``lambda = 0``) and extrapolate to
``lambda = -1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import regression as reg
from ._seeding import rng_for

DEFAULT_GRID = (0.5, 1.0, 1.5, 2.0)
EIG_TOL = 1e-10


@dataclass(frozen=True)
class SimexConfig:
    lambda_grid: tuple = DEFAULT_GRID
    B: int = 50
    degree: int = 2
    seed: int = 0

    def __post_init__(self):
        grid = tuple(float(v) for v in self.lambda_grid)
        if not grid or any(v <= 0 for v in grid):
            raise ValueError("lambda grid must contain positive values")
        if list(grid) != sorted(grid):
            raise ValueError("lambda grid must be ascending")
        if self.B < 2:
            raise ValueError("B must be >= 2")
        if self.degree < 1 or self.degree > len(grid):
            raise ValueError("extrapolant degree must be between 1 and the grid size")
        object.__setattr__(self, "lambda_grid", grid)


def extrapolate(lambdas, values, degree=2, at=-1.0):
    """Per-column polynomial least-squares fit in ``lambda`` evaluated at ``at``."""
    lambdas = np.asarray(lambdas, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    coefs = np.polynomial.polynomial.polyfit(lambdas, values, degree)
    return np.polynomial.polynomial.polyval(at, coefs)


def _finish(naive, grid, means, config, method, info):
    lambdas = np.concatenate([[0.0], grid])
    values = np.vstack([naive.beta, means])
    if np.all(means == naive.beta):
        beta = naive.beta.copy()
    else:
        beta = extrapolate(lambdas, values, config.degree)
    info = dict(info)
    info.update({
        "lambdas": lambdas.tolist(),
        "grid_beta": values.tolist(),
        "vcov": "naive OLS covariance; not a SIMEX variance",
    })
    return reg.EstimateResult(beta, naive.vcov, naive.n, method, naive.names, info)


def simex(y, x_noisy, Z, sigma_e, config=None, x_name="x", control_names=None):
    """SIMEX for classical additive error of known standard deviation.

    Pseudo-data at level ``lambda`` add ``sqrt(lambda) * sigma_e * z`` with
    standard normal ``z``. The ``z`` draws depend only on the seed, the grid
    position and the replicate, so rescaling the grid and ``sigma_e`` so
    that ``lambda * sigma_e**2`` is unchanged yields identical pseudo-data.
    """
    config = config or SimexConfig()
    if sigma_e < 0:
        raise ValueError("sigma_e must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x_noisy, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    names = reg.coef_names(x_name, control_names, Z.shape[1])
    naive = reg.ols(y, reg.design(x, Z), names)
    grid = np.array(config.lambda_grid)
    if sigma_e == 0:
        means = np.tile(naive.beta, (grid.size, 1))
        return _finish(naive, grid, means, config, "simex", {"sigma_e": 0.0})
    rng = rng_for(config.seed, "simex")
    noise = rng.standard_normal((grid.size, config.B, y.size))
    means = np.empty((grid.size, naive.k))
    for g, lam in enumerate(grid):
        scale = np.sqrt(lam) * sigma_e
        betas = [reg.ols(y, reg.design(x + scale * noise[g, b], Z), names).beta
                 for b in range(config.B)]
        means[g] = np.mean(betas, axis=0)
    return _finish(naive, grid, means, config, "simex", {"sigma_e": float(sigma_e)})


# ---------------------------------------------------------------- misclassification


def estimate_misclassification(pred, truth):
    """Column-stochastic ``P[r, c] = Pr(pred = r | truth = c)`` from test-set counts.

    Empty cells get a count of one before normalizing.
    """
    pred = np.asarray(pred).astype(int).ravel()
    truth = np.asarray(truth).astype(int).ravel()
    if pred.size != truth.size:
        raise ValueError("pred and truth differ in length")
    counts = np.zeros((2, 2))
    np.add.at(counts, (pred, truth), 1)
    for c in (0, 1):
        if counts[:, c].sum() == 0:
            raise ValueError(f"truth class {c} absent from the test set")
    counts[counts == 0] = 1.0
    return counts / counts.sum(axis=0)


def _eig(Pi):
    Pi = np.asarray(Pi, dtype=np.float64)
    if Pi.shape != (2, 2):
        raise ValueError("misclassification matrix must be 2 x 2")
    if np.any(Pi < 0) or not np.allclose(Pi.sum(axis=0), 1.0, atol=1e-10):
        raise ValueError("misclassification matrix must be column-stochastic")
    d, V = np.linalg.eig(Pi)
    if np.any(np.abs(d.imag) > EIG_TOL) or np.any(d.real <= EIG_TOL):
        raise ValueError("misclassification matrix must have positive real eigenvalues")
    if np.linalg.cond(V) > 1.0 / EIG_TOL:
        raise ValueError("misclassification matrix is not diagonalizable")
    return d.real, V.real


def matrix_power(Pi, lam):
    """``Pi ** lam`` through the eigendecomposition ``V diag(d ** lam) V^-1``."""
    d, V = _eig(Pi)
    return V @ np.diag(d ** lam) @ np.linalg.inv(V)


def _clamped_power(Pi, lam):
    P = matrix_power(Pi, lam)
    clamped = bool(np.any(P < 0) or np.any(P > 1))
    if clamped:
        P = np.clip(P, 0.0, 1.0)
        P = P / P.sum(axis=0)
    return P, clamped


def mc_simex(y, x_mis, Z, Pi, config=None, x_name="x", control_names=None):
    """MC-SIMEX for a misclassified binary covariate.

    At level ``lambda`` each observed label ``c`` is redrawn as 1 with
    probability ``(Pi ** lambda)[1, c]``, so the pseudo-data carry the
    misclassification ``Pi ** (1 + lambda)`` relative to the truth.
    """
    config = config or SimexConfig()
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x_mis, dtype=np.float64)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("misclassified covariate must be 0/1")
    Z = np.asarray(Z, dtype=np.float64)
    names = reg.coef_names(x_name, control_names, Z.shape[1])
    naive = reg.ols(y, reg.design(x, Z), names)
    _eig(Pi)
    grid = np.array(config.lambda_grid)
    rng = rng_for(config.seed, "mc-simex")
    u = rng.random((grid.size, config.B, y.size))
    obs = x.astype(int)
    means = np.empty((grid.size, naive.k))
    any_clamped = False
    for g, lam in enumerate(grid):
        P, clamped = _clamped_power(Pi, lam)
        any_clamped |= clamped
        p1 = P[1, obs]
        betas = []
        for b in range(config.B):
            xb = (u[g, b] < p1).astype(np.float64)
            betas.append(reg.ols(y, reg.design(xb, Z), names).beta)
        means[g] = np.mean(betas, axis=0)
    return _finish(naive, grid, means, config, "mcsimex",
                   {"clamped": any_clamped, "Pi": np.asarray(Pi).tolist()})


# ---------------------------------------------------------------- blindspot


def blindspot_condition(sigma1_sq, sigma2_sq, sigma_e_sq, sigma_2e):
    """``|s2 s1 - c^2| < |s2 (s1 + se) - c^2|`` and the gap between the two sides."""
    lhs = abs(sigma2_sq * sigma1_sq - sigma_2e ** 2)
    rhs = abs(sigma2_sq * (sigma1_sq + sigma_e_sq) - sigma_2e ** 2)
    return lhs < rhs, rhs - lhs


def blindspot_from_sample(y, x_true, x_noisy, Z, control, beta_true, sigma_e=None,
                          config=None):
    """Naive and SIMEX bias on the coefficient of control column ``control``.

    Parameters
    ----------
    control : int
        Column of ``Z`` (the intercept is column 0) whose coefficient is
        inspected; it sits at position ``control + 1`` of the coefficients.
    beta_true : float
        True coefficient of that control.
    sigma_e : float, optional
        Error sd handed to SIMEX; the sample sd of ``x_noisy - x_true`` by default.
    """
    x_true = np.asarray(x_true, dtype=np.float64)
    x_noisy = np.asarray(x_noisy, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    e = x_noisy - x_true
    z2 = Z[:, control]
    s1 = float(np.var(x_true))
    se = float(np.var(e))
    s2 = float(np.var(z2))
    s2e = float(np.mean((z2 - z2.mean()) * (e - e.mean())))
    holds, gap = blindspot_condition(s1, s2, se, s2e)
    sig = np.sqrt(se) if sigma_e is None else sigma_e
    naive = reg.ols(y, reg.design(x_noisy, Z))
    corrected = simex(y, x_noisy, Z, sig, config)
    pos = control + 1
    bias_naive = float(naive.beta[pos] - beta_true)
    bias_simex = float(corrected.beta[pos] - beta_true)
    return {
        "bias_naive": bias_naive,
        "bias_simex": bias_simex,
        "simex_worse": abs(bias_simex) > abs(bias_naive),
        "condition_holds": bool(holds),
        "condition_value": float(gap),
        "moments": {"sigma1_sq": s1, "sigma2_sq": s2, "sigma_e_sq": se, "sigma_2e": s2e},
    }


def simex_blindspot_check(rho, n=5000, sigma1=1.0, sigma2=1.0, sigma_e=1.0,
                          beta=(1.0, 1.0, 1.0), noise_sd=1.0, seed=0, config=None):
    """Classical-error design where a precise control correlates with the error.

    ``y = b0 + b1 x1 + b2 x2 + eps`` with ``x1 ~ N(0, sigma1^2)`` observed as
    ``x1 + e``, ``e ~ N(0, sigma_e^2)``, ``Corr(x2, e) = rho`` and
    ``Cov(x1, x2) = 0``. Reports the bias of the naive and SIMEX
    coefficients on ``x2`` and the closed-form condition.
    """
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie in (-1, 1)")
    rng = rng_for(seed, "blindspot")
    x1 = sigma1 * rng.standard_normal(n)
    e = sigma_e * rng.standard_normal(n)
    xi = rng.standard_normal(n)
    x2 = sigma2 * (rho * e / sigma_e + np.sqrt(1.0 - rho ** 2) * xi)
    y = beta[0] + beta[1] * x1 + beta[2] * x2 + noise_sd * rng.standard_normal(n)
    Z = np.column_stack([np.ones(n), x2])
    return blindspot_from_sample(y, x1, x1 + e, Z, 1, beta[2], sigma_e,
                                 config or SimexConfig(seed=seed))
