"""Lasso by cyclic coordinate descent, with K-fold cross-validation.

The objective on standardized predictors is::

    (1 / 2n) ||y - b0 - X b||^2 + lam * ||b||_1

Everything is solved from sufficient statistics (the Gram matrix of the
standardized predictors and their cross-products with the response), which
lets the cross-validation engine in :class:`FoldStats` reuse one set of
per-fold cross-products for many responses and predictor subsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

N_LAMBDA = 100
LAMBDA_RATIO = 1e-3
TOL = 1e-7
MAX_ITER = 10_000
CONST_VAR_RTOL = 1e-12
LAMBDA_RULES = ("min", "1se")


@dataclass(frozen=True, eq=False)
class LassoFit:
    """Result of a single-penalty lasso fit.

    ``coef_std`` lives on the standardized scale, ``coef`` on the original
    one. Constant predictors always receive an exact zero.
    """

    coef: np.ndarray
    coef_std: np.ndarray
    intercept: float
    lam: float
    iterations: int
    converged: bool
    constant: np.ndarray

    @property
    def active_set(self):
        return np.flatnonzero(self.coef_std != 0.0)

    def predict(self, X):
        return self.intercept + np.asarray(X, dtype=np.float64) @ self.coef


# ---------------------------------------------------------------- kernels


@njit(cache=True, nogil=True, inline="always")
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True, nogil=True)
def _sweep(G, grad, b, lam, idx, n_idx):
    """One cyclic pass over ``idx[:n_idx]``; returns the max coefficient change."""
    q = G.shape[0]
    dmax = 0.0
    for t in range(n_idx):
        j = idx[t]
        gjj = G[j, j]
        old = b[j]
        new = _soft(grad[j] + gjj * old, lam) / gjj
        if new != old:
            d = new - old
            b[j] = new
            for k in range(q):
                grad[k] -= G[j, k] * d
            if abs(d) > dmax:
                dmax = abs(d)
    return dmax


@njit(cache=True, nogil=True)
def _chol_append(G, R, idx, n, j):
    """Grow the upper factor ``R' R = G[idx, idx]`` by column ``j``; False if singular."""
    r = np.empty(n)
    for u in range(n):
        s = G[idx[u], j]
        for v in range(u):
            s -= R[v, u] * r[v]
        r[u] = s / R[u, u]
    d = G[j, j]
    for u in range(n):
        d -= r[u] * r[u]
    if d <= 1e-10 * G[j, j]:
        return False
    for u in range(n):
        R[u, n] = r[u]
        R[n, u] = 0.0
    R[n, n] = np.sqrt(d)
    idx[n] = j
    return True


@njit(cache=True, nogil=True)
def _chol_delete(R, idx, n, k):
    """Drop position ``k`` from the factor, restoring triangularity by Givens rotations."""
    for u in range(n):
        for v in range(k, n - 1):
            R[u, v] = R[u, v + 1]
    for v in range(k, n - 1):
        a = R[v, v]
        b = R[v + 1, v]
        h = np.hypot(a, b)
        c = a / h
        s = b / h
        for w in range(v, n - 1):
            x = R[v, w]
            y = R[v + 1, w]
            R[v, w] = c * x + s * y
            R[v + 1, w] = -s * x + c * y
        R[v + 1, v] = 0.0
    for v in range(k, n - 1):
        idx[v] = idx[v + 1]


@njit(cache=True, nogil=True)
def _newton(G, grad, b, lam, cache_idx, cache_R, cache_n):
    """Move the active coefficients toward the sign-constrained minimizer.

    On the orthant fixed by the current signs the objective is a smooth
    quadratic whose minimizer solves ``G_AA x = c_A - lam * sign(b_A)``.
    The step stops where the first coefficient reaches zero, so the
    objective cannot increase. Returns False if ``G_AA`` is singular.

    A Cholesky factor of the active block is carried in ``cache_*`` across
    calls and updated one variable at a time as the active set changes,
    which is cheap along a warm-started path.
    """
    q = G.shape[0]
    n = cache_n[0]
    idx = cache_idx
    R = cache_R
    k = n - 1
    while k >= 0:
        if b[idx[k]] == 0.0:
            _chol_delete(R, idx, n, k)
            n -= 1
        k -= 1
    inset = np.zeros(q, np.bool_)
    for u in range(n):
        inset[idx[u]] = True
    for j in range(q):
        if b[j] != 0.0 and not inset[j]:
            if not _chol_append(G, R, idx, n, j):
                cache_n[0] = 0
                return False
            n += 1
    cache_n[0] = n
    if n == 0:
        return True
    rhs = np.empty(n)
    for u in range(n):
        ju = idx[u]
        s = grad[ju]
        for v in range(n):
            s += G[ju, idx[v]] * b[idx[v]]
        rhs[u] = s - lam * (1.0 if b[ju] > 0 else -1.0)
    z = np.empty(n)
    for u in range(n):
        s = rhs[u]
        for v in range(u):
            s -= R[v, u] * z[v]
        z[u] = s / R[u, u]
    x = np.empty(n)
    for u in range(n - 1, -1, -1):
        s = z[u]
        for v in range(u + 1, n):
            s -= R[u, v] * x[v]
        x[u] = s / R[u, u]
    t = 1.0
    hit = -1
    for u in range(n):
        bj = b[idx[u]]
        if bj * x[u] <= 0.0:
            tj = bj / (bj - x[u])
            if tj < t:
                t = tj
                hit = u
    for u in range(n):
        j = idx[u]
        d = t * (x[u] - b[j])
        if u == hit:
            d = -b[j]
        if d != 0.0:
            b[j] += d
            for m in range(q):
                grad[m] -= G[j, m] * d
    return True


@njit(cache=True, nogil=True)
def _solve(G, grad, b, lam, tol, max_iter, cache_idx, cache_L, cache_n):
    """Coordinate descent from a warm start ``b`` with ``grad = c - G b``.

    Each iteration is a full cyclic sweep followed, when the sweep still
    moved something, by an acceleration step on the active set: a
    sign-constrained Newton step, or restricted sweeps when the active
    Gram block is singular. A warm start begins with the Newton step. Stops once a full sweep moves no coefficient
    by ``tol`` or more. Returns ``(iterations, converged)``; ``b`` and
    ``grad`` are updated in place.
    """
    q = G.shape[0]
    full = np.arange(q)
    active = np.empty(q, np.int64)
    sweeps = 0
    warm = False
    for j in range(q):
        if b[j] != 0.0:
            warm = True
            break
    if warm and max_iter > 1 and _newton(G, grad, b, lam, cache_idx, cache_L, cache_n):
        sweeps += 1
    while sweeps < max_iter:
        d = _sweep(G, grad, b, lam, full, q)
        sweeps += 1
        if d < tol:
            return sweeps, True
        if sweeps < max_iter and _newton(G, grad, b, lam, cache_idx, cache_L, cache_n):
            sweeps += 1
            continue
        na = 0
        for j in range(q):
            if b[j] != 0.0:
                active[na] = j
                na += 1
        while sweeps < max_iter:
            d = _sweep(G, grad, b, lam, active, na)
            sweeps += 1
            if d < tol:
                break
    return sweeps, False


@njit(cache=True, nogil=True)
def _path(G, c, lambdas, tol, max_iter):
    """Warm-started solutions along ``lambdas`` (descending); one row per penalty."""
    q = G.shape[0]
    L = lambdas.shape[0]
    out = np.zeros((L, q))
    b = np.zeros(q)
    grad = c.copy()
    cache_idx, cache_L, cache_n = _new_cache(q)
    for l in range(L):
        _solve(G, grad, b, lambdas[l], tol, max_iter, cache_idx, cache_L, cache_n)
        out[l] = b
    return out


@njit(cache=True, nogil=True)
def _new_cache(q):
    return np.zeros(q, np.int64), np.zeros((q, q)), np.zeros(1, np.int64)


@njit(cache=True, nogil=True)
def _solve_fresh(G, grad, b, lam, tol, max_iter):
    cache_idx, cache_L, cache_n = _new_cache(G.shape[0])
    return _solve(G, grad, b, lam, tol, max_iter, cache_idx, cache_L, cache_n)


# ---------------------------------------------------------------- helpers


def _objective(G, c, yy, b, lam):
    return 0.5 * yy - c @ b + 0.5 * b @ G @ b + lam * np.abs(b).sum()


def lambda_grid(lam_max, n=N_LAMBDA, ratio=LAMBDA_RATIO):
    if lam_max <= 0.0:
        return np.zeros(1)
    return np.geomspace(lam_max, ratio * lam_max, n)


def _solve_std(G, c, lam, tol, max_iter):
    q = c.size
    b = np.zeros(q)
    if q == 0:
        return b, 0, True
    grad = c.copy()
    sweeps, ok = _solve_fresh(np.ascontiguousarray(G), grad, b, float(lam), float(tol),
                              int(max_iter))
    return b, int(sweeps), bool(ok)


def _validate(X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] != y.size:
        raise ValueError("predictors and response have different numbers of rows")
    if y.size < 2:
        raise ValueError("need n >= 2")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in lasso inputs")
    return X, y


def _standardize(X, y):
    n = y.size
    mx = X.mean(axis=0)
    my = y.mean()
    const = np.ptp(X, axis=0) == 0.0
    Xc = X - mx
    Xc[:, const] = 0.0
    sd = np.sqrt(np.mean(Xc * Xc, axis=0))
    sd[const] = 1.0
    Xs = Xc / sd
    yc = y - my
    return Xs, yc, mx, my, sd, const, n


def _finish(b_std, sd, mx, my, lam, sweeps, ok, const):
    coef = b_std / sd
    return LassoFit(coef, b_std, float(my - mx @ coef), float(lam), sweeps, ok, const)


def fit_lasso(X, y, lam, tol=TOL, max_iter=MAX_ITER):
    """Lasso at a single penalty.

    Parameters
    ----------
    X : array_like, shape (n, q)
    y : array_like, shape (n,)
    lam : float
        Penalty on the standardized scale (see module docstring).
    tol : float
        Convergence threshold on the largest standardized coefficient change
        within a full sweep.
    max_iter : int
        Cap on coordinate-descent sweeps. Hitting it sets
        ``converged=False`` rather than raising.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    X, y = _validate(X, y)
    Xs, yc, mx, my, sd, const, n = _standardize(X, y)
    keep = np.flatnonzero(~const)
    G = Xs[:, keep].T @ Xs[:, keep] / n
    c = Xs[:, keep].T @ yc / n
    b = np.zeros(X.shape[1])
    bk, sweeps, ok = _solve_std(G, c, lam, tol, max_iter)
    b[keep] = bk
    return _finish(b, sd, mx, my, lam, sweeps, ok, const)


def lasso_objective(X, y, fit):
    """Objective value of ``fit`` on the standardized problem."""
    X, y = _validate(X, y)
    Xs, yc, *_ = _standardize(X, y)
    r = yc - Xs @ fit.coef_std
    return 0.5 * float(r @ r) / y.size + fit.lam * float(np.abs(fit.coef_std).sum())


# ---------------------------------------------------------------- cross-validation


def make_folds(n, n_folds, seed):
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if n_folds > n:
        raise ValueError(f"degenerate folds: {n_folds} folds for {n} rows")
    if n - int(np.ceil(n / n_folds)) < 2:
        raise ValueError("degenerate folds: a training fold has fewer than 2 rows")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, n_folds)


class FoldStats:
    """Per-fold sufficient statistics of an augmented data matrix ``A``.

    Any response that is a linear combination ``A @ w`` and any subset of
    columns as predictors can then be cross-validated without touching the
    rows again.

    Parameters
    ----------
    A : array_like, shape (n, m)
    n_folds : int
    seed : int
        Seeds the fold assignment.
    """

    def __init__(self, A, n_folds=10, seed=0):
        A = np.asarray(A, dtype=np.float64)
        if not np.all(np.isfinite(A)):
            raise ValueError("non-finite values in lasso inputs")
        n, m = A.shape
        if n < 2:
            raise ValueError("need n >= 2")
        self.n, self.m = n, m
        self.folds = make_folds(n, n_folds, seed)
        A0 = A - A.mean(axis=0)
        A0[:, np.ptp(A, axis=0) == 0.0] = 0.0
        self.cross = A0.T @ A0
        self.var = np.diag(self.cross) / n
        self.fold_n = np.array([f.size for f in self.folds])
        self.fold_sum = np.array([A0[f].sum(axis=0) for f in self.folds])
        self.fold_cross = np.array([A0[f].T @ A0[f] for f in self.folds])

    def _train_moments(self, k):
        if k is None:
            return self.n, np.zeros(self.m), self.cross / self.n
        nt = self.n - self.fold_n[k]
        mu = -self.fold_sum[k] / nt
        cov = (self.cross - self.fold_cross[k]) / nt - np.outer(mu, mu)
        return nt, mu, cov

    def _problem(self, cov, pred, w):
        var = np.diag(cov)[pred]
        const = var <= CONST_VAR_RTOL * np.maximum(self.var[pred], 1e-300)
        const |= self.var[pred] == 0.0
        keep = pred[~const]
        sd = np.sqrt(np.diag(cov)[keep])
        G = cov[np.ix_(keep, keep)] / np.outer(sd, sd)
        c = cov[keep] @ w / sd
        return keep, sd, np.ascontiguousarray(G), c

    def lambda_max(self, pred, w):
        _, _, _, c = self._problem(self._train_moments(None)[2], pred, w)
        return float(np.max(np.abs(c))) if c.size else 0.0

    def fold_errors(self, pred, w, lambdas, tol=TOL, max_iter=MAX_ITER):
        """Held-out sum of squared errors, shape ``(n_folds, len(lambdas))``."""
        sse = np.zeros((len(self.folds), lambdas.size))
        for k in range(len(self.folds)):
            nt, mu, cov = self._train_moments(k)
            keep, sd, G, c = self._problem(cov, pred, w)
            gamma = np.repeat(w[:, None], lambdas.size, axis=1)
            if keep.size:
                B = _path(G, c, lambdas, tol, max_iter)
                gamma[keep] -= (B / sd).T
            nf, sf = self.fold_n[k], self.fold_sum[k]
            H = self.fold_cross[k] - np.outer(sf, mu) - np.outer(mu, sf) + nf * np.outer(mu, mu)
            sse[k] = np.sum((H @ gamma) * gamma, axis=0)
        return sse

    def cv_curve(self, pred, w, lambdas, tol=TOL, max_iter=MAX_ITER):
        """Mean held-out squared error for each penalty in ``lambdas``."""
        return self.fold_errors(pred, w, lambdas, tol, max_iter).sum(axis=0) / self.n

    def fit(self, pred, w, lam, tol=TOL, max_iter=MAX_ITER):
        """Full-data standardized coefficients for ``pred`` (zeros for constants)."""
        _, _, cov = self._train_moments(None)
        keep, sd, G, c = self._problem(cov, pred, w)
        b = np.zeros(self.m)
        bk, sweeps, ok = _solve_std(G, c, lam, tol, max_iter)
        b[keep] = bk
        return b[pred], sweeps, ok

    def cv_select(self, pred, w, rule="min", tol=TOL, max_iter=MAX_ITER):
        """Cross-validate over the default grid; return ``(lam, coef_std, curve)``.

        ``rule="min"`` takes the penalty with the smallest CV error;
        ``rule="1se"`` takes the largest penalty whose CV error is within one
        standard error (across folds) of that minimum. ``coef_std`` is
        aligned with ``pred`` and exactly zero for unselected or constant
        columns.
        """
        if rule not in LAMBDA_RULES:
            raise ValueError(f"rule must be one of {LAMBDA_RULES}, got {rule!r}")
        pred = np.asarray(pred, dtype=np.int64)
        w = np.asarray(w, dtype=np.float64)
        lam_max = self.lambda_max(pred, w)
        if lam_max == 0.0:
            return 0.0, np.zeros(pred.size), np.zeros(1)
        lambdas = lambda_grid(lam_max)
        sse = self.fold_errors(pred, w, lambdas, tol, max_iter)
        curve = sse.sum(axis=0) / self.n
        best = int(np.argmin(curve))
        if rule == "1se":
            mse = sse / self.fold_n[:, None]
            se = mse[:, best].std(ddof=1) / np.sqrt(mse.shape[0])
            best = int(np.flatnonzero(curve <= curve[best] + se)[0])
        lam = float(lambdas[best])
        coef, _, _ = self.fit(pred, w, lam, tol, max_iter)
        return lam, coef, curve


def cv_lasso(X, y, n_folds=10, seed=0, rule="min", tol=TOL, max_iter=MAX_ITER):
    """Choose the penalty by K-fold CV and refit on all rows.

    ``rule`` is ``"min"`` (smallest CV error) or ``"1se"`` (one-standard-error
    rule); see :meth:`FoldStats.cv_select`.

    Returns
    -------
    lam : float
    fit : LassoFit
    curve : ndarray
        Mean held-out squared error along the penalty grid.
    """
    X, y = _validate(X, y)
    q = X.shape[1]
    stats = FoldStats(np.column_stack([X, y]), n_folds, seed)
    pred = np.arange(q)
    w = np.zeros(q + 1)
    w[q] = 1.0
    lam, _, curve = stats.cv_select(pred, w, rule, tol, max_iter)
    return lam, fit_lasso(X, y, lam, tol, max_iter), curve
