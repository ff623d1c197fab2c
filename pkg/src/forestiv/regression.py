"""OLS, 2SLS, Hotelling comparison and instrument diagnostics.

Coefficient vectors are ordered ``(intercept, x, other controls)``; the
controls matrix ``Z`` always carries the intercept in its first column.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import gammaincc

RANK_TOL = 1e-10


class RankDeficientError(ValueError):
    """Design matrix is numerically rank deficient."""


@dataclass(frozen=True, eq=False)
class EstimateResult:
    """Coefficients with their variance-covariance matrix.

    Attributes
    ----------
    beta : ndarray, shape (K,)
    vcov : ndarray, shape (K, K)
    n : int
        Number of rows the estimate was computed on.
    method : str
        One of ``ols``, ``tsls``, ``forestiv``, ``simex``, ``mcsimex``,
        ``averaging``.
    names : tuple of str
    info : dict
        Free-form diagnostics (flags, caveats).
    """

    beta: np.ndarray
    vcov: np.ndarray
    n: int
    method: str
    names: tuple = ()
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).ravel()
        vcov = np.asarray(self.vcov, dtype=np.float64).reshape(beta.size, beta.size)
        vcov = 0.5 * (vcov + vcov.T)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "vcov", vcov)
        names = tuple(self.names) or tuple(f"b{j}" for j in range(beta.size))
        if len(names) != beta.size:
            raise ValueError(f"{len(names)} names for {beta.size} coefficients")
        object.__setattr__(self, "names", names)

    @property
    def k(self):
        return self.beta.size

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def coef(self, name):
        return float(self.beta[self.names.index(name)])

    def to_dict(self):
        return {
            "method": self.method,
            "n": int(self.n),
            "names": list(self.names),
            "beta": self.beta.tolist(),
            "se": self.se.tolist(),
            "vcov": self.vcov.tolist(),
            "info": self.info,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class HotellingResult:
    statistic: float
    dof: int
    p_value: float
    singular_flag: bool = False

    def to_dict(self):
        return {"statistic": self.statistic, "dof": self.dof,
                "p_value": self.p_value, "singular_flag": self.singular_flag}


# ---------------------------------------------------------------- least squares


def _qr_solve(A, y):
    """Least squares through pivoted QR.

    Returns ``(beta, R, perm)``; raises when a pivot falls below
    ``RANK_TOL`` times the largest one.
    """
    n, k = A.shape
    if n < k:
        raise RankDeficientError(f"{n} rows for {k} columns")
    Q, R, perm = linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if k and (d[0] == 0.0 or d[-1] < RANK_TOL * d[0]):
        raise RankDeficientError("design matrix is rank deficient")
    coef = linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty(k)
    beta[perm] = coef
    return beta, R, perm


def _unscaled_cov(R, perm):
    """(A'A)^{-1} from the pivoted R factor."""
    Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]))
    inner = Rinv @ Rinv.T
    out = np.empty_like(inner)
    out[np.ix_(perm, perm)] = inner
    return out


def _rss(A, y):
    beta, _, _ = _qr_solve(A, y)
    r = y - A @ beta
    return float(r @ r)


def _as_2d(a, m):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] != m:
        raise ValueError(f"expected {m} rows, got {a.shape[0]}")
    return a


def ols(y, A, names=(), method="ols"):
    """Ordinary least squares with the classical covariance ``s^2 (A'A)^{-1}``."""
    y = np.asarray(y, dtype=np.float64).ravel()
    A = _as_2d(A, y.size)
    n, k = A.shape
    if n <= k:
        raise ValueError(f"need n > K, got n={n}, K={k}")
    beta, R, perm = _qr_solve(A, y)
    resid = y - A @ beta
    s2 = float(resid @ resid) / (n - k)
    vcov = s2 * _unscaled_cov(R, perm)
    return EstimateResult(beta, vcov, n, method, names)


def design(x, Z):
    """Stack ``[Z[:, 0], x, Z[:, 1:]]`` so the x slot is coefficient 1."""
    Z = _as_2d(Z, np.shape(x)[0])
    return np.column_stack([Z[:, :1], np.asarray(x, dtype=np.float64), Z[:, 1:]])


def coef_names(x_name="x", control_names=None, k=None):
    if control_names is None:
        control_names = ("const",) + tuple(f"z{j}" for j in range(1, k))
    return (control_names[0], x_name) + tuple(control_names[1:])


def ols_sample(s, method="ols"):
    """OLS of ``s.y`` on ``(intercept, s.x, other controls)``."""
    return ols(s.y, design(s.x, s.controls),
               coef_names(s.x_name, s.control_names), method)


def tsls(y, x, Z, W, names=(), method="tsls"):
    """Two-stage least squares with one endogenous regressor.

    Stage 1 projects ``x`` on ``[W, Z]``; stage 2 regresses ``y`` on the
    projection and ``Z``. The covariance uses residuals evaluated at the
    original ``x``, with ``n - K`` degrees of freedom.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    n = y.size
    x = np.asarray(x, dtype=np.float64).ravel()
    Z = _as_2d(Z, n)
    W = _as_2d(W, n)
    if W.shape[1] < 1:
        raise ValueError("need at least one instrument")
    k = Z.shape[1] + 1
    if n <= k + W.shape[1]:
        raise ValueError(f"need n > K + |W|, got n={n}, K={k}, |W|={W.shape[1]}")
    WZ = np.column_stack([W, Z])
    try:
        g, _, _ = _qr_solve(WZ, x)
    except RankDeficientError:
        raise RankDeficientError("first stage [W, Z] is rank deficient") from None
    xhat = WZ @ g
    C = design(xhat, Z)
    try:
        beta, R, perm = _qr_solve(C, y)
    except RankDeficientError:
        raise RankDeficientError("second stage is rank deficient (weak instruments)") from None
    resid = y - design(x, Z) @ beta
    s2 = float(resid @ resid) / (n - k)
    vcov = s2 * _unscaled_cov(R, perm)
    return EstimateResult(beta, vcov, n, method, names)


# ---------------------------------------------------------------- chi-square


def chi2_sf(h, k):
    """Upper tail of the chi-square distribution with ``k`` degrees of freedom."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if h <= 0:
        return 1.0
    if math.isinf(h):
        return 0.0
    return float(gammaincc(0.5 * k, 0.5 * h))


def chi2_ppf(q, k, tol=1e-10):
    """Quantile of chi-square(k) by bisection on :func:`chi2_sf`."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must be in (0, 1)")
    target = 1.0 - q
    lo, hi = 0.0, max(1.0, float(k))
    while chi2_sf(hi, k) > target:
        hi *= 2.0
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if chi2_sf(mid, k) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def chi2_critical(alpha, k):
    return chi2_ppf(1.0 - alpha, k)


# ---------------------------------------------------------------- comparisons


def _same_shape(a, b):
    if a.k != b.k:
        raise ValueError(f"dimension mismatch: K={a.k} vs K={b.k}")


def hotelling(a, b):
    """Unequal-variance comparison ``H = d' (S_a + S_b)^{-1} d`` against chi2(K)."""
    _same_shape(a, b)
    d = a.beta - b.beta
    S = a.vcov + b.vcov
    singular = False
    try:
        c, lower = linalg.cho_factor(S)
        if np.min(np.abs(np.diag(c))) ** 2 < RANK_TOL * np.max(np.abs(np.diag(S))):
            raise linalg.LinAlgError
        h = float(d @ linalg.cho_solve((c, lower), d))
    except (linalg.LinAlgError, ValueError):
        singular = True
        h = float(d @ np.linalg.pinv(S, rcond=RANK_TOL, hermitian=True) @ d)
    h = max(h, 0.0)
    return HotellingResult(h, a.k, chi2_sf(h, a.k), singular)


def empirical_mse(iv, ref):
    """Squared distance to the reference plus the trace of ``iv``'s covariance."""
    _same_shape(iv, ref)
    d = iv.beta - ref.beta
    return float(d @ d + np.trace(iv.vcov))


def first_stage_f(x, W, Z):
    """F statistic for the joint exclusion of ``W`` from ``x ~ [W, Z]``.

    Returns ``inf`` when the full regression fits exactly.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    W = _as_2d(W, n)
    Z = _as_2d(Z, n)
    q, k = W.shape[1], Z.shape[1]
    if n <= q + k:
        raise ValueError("too few rows for the first-stage regression")
    rss_f = _rss(np.column_stack([W, Z]), x)
    rss_r = _rss(Z, x)
    if rss_f <= 1e-24 * max(rss_r, 1e-300) or rss_f == 0.0:
        return math.inf
    return ((rss_r - rss_f) / q) / (rss_f / (n - q - k))


def exclusion_r2(e, W):
    """Adjusted R^2 of ``e`` regressed on an intercept and ``W``."""
    e = np.asarray(e, dtype=np.float64).ravel()
    n = e.size
    W = _as_2d(W, n)
    q = W.shape[1]
    if n <= q + 1:
        raise ValueError(f"need n > |W| + 1, got n={n}, |W|={q}")
    tss = float(np.sum((e - e.mean()) ** 2))
    if tss == 0.0:
        return 0.0
    rss = _rss(np.column_stack([np.ones(n), W]), e)
    r2 = 1.0 - rss / tss
    return 1.0 - (1.0 - r2) * (n - 1) / (n - q - 1)
