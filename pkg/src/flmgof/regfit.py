"""Estimators of the truncated coefficient matrix of a functional linear model.

The model on scores is ``Y = X B + E`` with ``X`` (n x p) and ``Y`` (n x q)
column-centered, so no intercept is fitted. Four estimators are provided:

* ``fpcr``  -- ordinary least squares,
* ``ridge`` -- Frobenius (L2) penalty,
* ``lasso`` -- row-wise group penalty (elastic net over rows of ``B``),
* ``l1s``   -- lasso for row selection, then least squares on the kept rows.

Penalised objectives follow the multi-response elastic net::

    1/(2n) ||Y - X B||_F^2 + lam * ((1 - alpha)/2 ||B||_F^2 + alpha * sum_j ||B_j||_2)
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .fdata import FpcBasis

log = logging.getLogger(__name__)

__all__ = [
    "Kind",
    "EstimatorSpec",
    "Fit",
    "CvResult",
    "ConvergenceError",
    "fit_fpcr",
    "fit_ridge",
    "fit_lasso",
    "fit_l1s",
    "fit",
    "lambda_max",
    "default_lambda_grid",
    "select_lambda",
    "predict",
    "beta_surface",
]


class Kind(str, enum.Enum):
    FPCR = "fpcr"
    RIDGE = "ridge"
    LASSO = "lasso"
    L1S = "l1s"


class ConvergenceError(RuntimeError):
    def __init__(self, message, kkt_gap):
        super().__init__(f"{message} (final KKT gap {kkt_gap:.3g})")
        self.kkt_gap = kkt_gap


class RankDeficientDesign(np.linalg.LinAlgError):
    pass


def default_lambda_grid(lower=1e-3, upper=1e2, size=100) -> np.ndarray:
    """Decreasing log-spaced penalty grid."""
    return np.logspace(np.log10(upper), np.log10(lower), size)


@dataclass(frozen=True)
class EstimatorSpec:
    """How to estimate ``B``.

    ``policy`` is ``"fixed"`` (use ``lam``), ``"cv"`` or ``"1se"``.
    """

    kind: Kind = Kind.L1S
    policy: str = "1se"
    lam: float | None = None
    alpha: float | None = None
    lambda_grid: tuple | None = None
    folds: int = 10
    expand_grid: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.policy not in ("fixed", "cv", "1se"):
            raise ValueError(f"unknown lambda policy {self.policy!r}")
        if self.policy == "fixed" and self.kind is not Kind.FPCR and self.lam is None:
            raise ValueError("a fixed lambda policy needs lam")
        if self.alpha is None:
            object.__setattr__(
                self, "alpha", 0.0 if self.kind is Kind.RIDGE else 1.0
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.kind is Kind.L1S and self.alpha != 1.0:
            raise ValueError("the l1s estimator uses alpha = 1")
        if self.lambda_grid is not None:
            grid = np.asarray(self.lambda_grid, dtype=float)
            if grid.size == 0:
                raise ValueError("empty lambda grid")
            if np.any(grid <= 0) or np.any(np.diff(grid) >= 0):
                raise ValueError("lambda grid must be positive and strictly decreasing")
            object.__setattr__(self, "lambda_grid", tuple(grid.tolist()))

    def grid(self) -> np.ndarray:
        if self.lambda_grid is None:
            return default_lambda_grid()
        return np.asarray(self.lambda_grid)


@dataclass
class Fit:
    """Result of an estimator.

    ``residuals`` is ``Y - X B``. ``hat`` is present for estimators that are
    linear smoothers in ``Y`` (fpcr, ridge, l1s).
    """

    kind: Kind
    B: np.ndarray
    selected: np.ndarray
    lam: float
    residuals: np.ndarray
    hat: np.ndarray | None = None
    n_iter: int = 0
    objective_trace: list = field(default_factory=list, repr=False)

    @property
    def p_tilde(self) -> int:
        return int(self.selected.size)


def _as2d(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {a.shape}")
    return a


def _check_xy(X, Y):
    X = _as2d(X, "X")
    Y = _as2d(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    return X, Y


def _solve_spd(G, R):
    # G symmetric positive definite; Cholesky solve with a condition check
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(G)
        raise RankDeficientDesign(
            f"X'X is singular (condition number {cond:.3g})"
        ) from None
    d = np.diag(L)
    cond_est = (d.max() / d.min()) ** 2
    if cond_est > 1e14:
        raise RankDeficientDesign(
            f"X'X is numerically singular (condition number ~{cond_est:.3g})"
        )
    z = np.linalg.solve(L, R)
    return np.linalg.solve(L.T, z)


def fit_fpcr(X, Y) -> Fit:
    """Least squares ``B = (X'X)^-1 X'Y`` and its projection hat matrix."""
    X, Y = _check_xy(X, Y)
    n, p = X.shape
    if n <= p:
        raise RankDeficientDesign(f"need n > p for least squares (n={n}, p={p})")
    return _ridge(X, Y, 0.0, Kind.FPCR)


def fit_ridge(X, Y, lam: float) -> Fit:
    """Ridge estimator ``B = (X'X + lam I)^-1 X'Y``; ``lam = 0`` is least squares."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    X, Y = _check_xy(X, Y)
    return _ridge(X, Y, float(lam), Kind.RIDGE)


def _ridge(X, Y, lam, kind):
    n, p = X.shape
    G = X.T @ X
    if lam:
        G = G + lam * np.eye(p)
    # the hat matrix and B share one factorisation
    M = _solve_spd(G, np.hstack([X.T, X.T @ Y]))
    XtGinv = M[:, :n]
    B = M[:, n:]
    hat = X @ XtGinv
    hat = (hat + hat.T) / 2
    return Fit(kind, B, np.arange(p), lam, Y - X @ B, hat)


def lambda_max(X, Y, alpha: float = 1.0) -> float:
    """Smallest penalty for which the group lasso solution is exactly zero."""
    X, Y = _check_xy(X, Y)
    if alpha <= 0:
        return np.inf
    n = X.shape[0]
    return float(np.max(np.linalg.norm(X.T @ Y, axis=1)) / (n * alpha))


def _objective(X, Y, B, lam, alpha):
    n = X.shape[0]
    r = Y - X @ B
    return (
        0.5 / n * np.sum(r * r)
        + lam * (0.5 * (1 - alpha) * np.sum(B * B)
                 + alpha * np.sum(np.linalg.norm(B, axis=1)))
    )


def kkt_gap(X, Y, B, lam, alpha) -> float:
    """Largest violation of the group lasso optimality conditions."""
    n = X.shape[0]
    grad = -X.T @ (Y - X @ B) / n + lam * (1 - alpha) * B
    norms = np.linalg.norm(B, axis=1)
    active = norms > 0
    gap = 0.0
    if np.any(active):
        sub = grad[active] + lam * alpha * B[active] / norms[active, None]
        gap = max(gap, float(np.max(np.linalg.norm(sub, axis=1))))
    if np.any(~active):
        viol = np.linalg.norm(grad[~active], axis=1) - lam * alpha
        gap = max(gap, float(np.max(viol, initial=0.0)))
    return gap


def fit_lasso(X, Y, lam: float, alpha: float = 1.0, *, B0=None, tol: float = 1e-7,
              max_sweeps: int = 10_000, track_objective: bool = False) -> Fit:
    """Row-wise group lasso by cyclic block coordinate descent.

    Each row update is the exact minimiser of the objective in that row,
    a group soft-thresholding of the partial correlation ``x_j'R/n``.
    Iteration stops once the largest row change falls below
    ``tol * max(1, max_j ||B_j||)``.
    """
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    X, Y = _check_xy(X, Y)
    n, p = X.shape
    B = np.zeros((p, Y.shape[1])) if B0 is None else np.array(B0, dtype=float)
    col_sq = np.einsum("ij,ij->j", X, X) / n
    R = Y - X @ B
    thresh = lam * alpha
    ridge = lam * (1 - alpha)
    trace = []
    if track_objective:
        trace.append(_objective(X, Y, B, lam, alpha))
    converged = False
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        for j in range(p):
            denom = col_sq[j] + ridge
            if denom <= 0:
                continue
            bj = B[j]
            xj = X[:, j]
            z = xj @ R / n + col_sq[j] * bj
            nz = np.sqrt(z @ z)
            if nz <= thresh:
                new = np.zeros_like(bj)
            else:
                new = (1.0 - thresh / nz) / denom * z
            delta = new - bj
            if np.any(delta):
                R -= np.outer(xj, delta)
                B[j] = new
                max_change = max(max_change, float(np.sqrt(delta @ delta)))
        if track_objective:
            trace.append(_objective(X, Y, B, lam, alpha))
        scale = max(1.0, float(np.max(np.linalg.norm(B, axis=1), initial=0.0)))
        if max_change <= tol * scale:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"group lasso did not converge in {max_sweeps} sweeps",
            kkt_gap(X, Y, B, lam, alpha),
        )
    selected = np.nonzero(np.linalg.norm(B, axis=1) > 0)[0]
    return Fit(Kind.LASSO, B, selected, float(lam), Y - X @ B, None,
               n_iter=sweep, objective_trace=trace)


def _refit_selected(X, Y, selected, lam, kind=Kind.L1S) -> Fit:
    n, p = X.shape
    q = Y.shape[1]
    B = np.zeros((p, q))
    if selected.size == 0:
        return Fit(kind, B, selected, lam, Y.copy(), np.zeros((n, n)))
    ols = fit_fpcr(X[:, selected], Y)
    B[selected] = ols.B
    return Fit(kind, B, selected, lam, ols.residuals, ols.hat)


def fit_l1s(X, Y, lam: float, *, B0=None) -> Fit:
    """Lasso row selection followed by least squares on the selected rows."""
    X, Y = _check_xy(X, Y)
    lasso = fit_lasso(X, Y, lam, 1.0, B0=B0)
    return _refit_selected(X, Y, lasso.selected, float(lam))


def fit(X, Y, kind: Kind, lam: float | None = None, alpha: float | None = None) -> Fit:
    kind = Kind(kind)
    if kind is Kind.FPCR:
        return fit_fpcr(X, Y)
    if kind is Kind.RIDGE:
        return fit_ridge(X, Y, lam)
    if kind is Kind.LASSO:
        return fit_lasso(X, Y, lam, 1.0 if alpha is None else alpha)
    return fit_l1s(X, Y, lam)


@dataclass
class CvResult:
    lam_cv: float
    lam_1se: float
    lambdas: np.ndarray
    cv_mean: np.ndarray
    cv_se: np.ndarray
    folds: np.ndarray | None = None

    def chosen(self, policy: str) -> float:
        return self.lam_cv if policy == "cv" else self.lam_1se


def _fold_ids(n, folds, rng):
    if folds >= n:
        return np.arange(n)
    ids = np.arange(n) % folds
    return rng.permutation(ids) if rng is not None else ids


def _lasso_path(X, Y, lambdas, alpha):
    """Warm-started group lasso path, largest penalty first."""
    out = []
    B = None
    for lam in lambdas:
        f = fit_lasso(X, Y, lam, alpha, B0=B)
        B = f.B
        out.append(B.copy())
    return out


def _cv_errors(X, Y, kind, lambdas, alpha, fold_ids):
    """Per-fold mean squared prediction error, shape (folds, len(lambdas))."""
    n = X.shape[0]
    labels = np.unique(fold_ids)
    if kind is Kind.RIDGE and labels.size == n:
        # leave-one-out through the hat diagonal
        U, s, Vt = np.linalg.svd(X, full_matrices=False)
        UtY = U.T @ Y
        err = np.empty((n, lambdas.size))
        for k, lam in enumerate(lambdas):
            shrink = s**2 / (s**2 + lam)
            fitted = U @ (shrink[:, None] * UtY)
            h = np.einsum("ij,j,ij->i", U, shrink, U)
            loo = (Y - fitted) / (1.0 - h)[:, None]
            err[:, k] = np.sum(loo**2, axis=1)
        return err[np.argsort(fold_ids)], np.ones(n)
    err = np.empty((labels.size, lambdas.size))
    sizes = np.empty(labels.size)
    for f, label in enumerate(labels):
        test = fold_ids == label
        Xtr, Ytr = X[~test], Y[~test]
        Xte, Yte = X[test], Y[test]
        sizes[f] = test.sum()
        if kind is Kind.RIDGE:
            Bs = [fit_ridge(Xtr, Ytr, lam).B for lam in lambdas]
        else:
            Bs = _lasso_path(Xtr, Ytr, lambdas, alpha)
        for k, B in enumerate(Bs):
            r = Yte - Xte @ B
            err[f, k] = np.sum(r * r) / sizes[f]
    return err, sizes


def select_lambda(X, Y, spec: EstimatorSpec, rng=None, folds: int | None = None) -> CvResult:
    """Cross-validated penalty (minimum) and one-standard-error penalty.

    Ridge with ``folds >= n`` uses the leave-one-out hat-matrix shortcut.
    Lasso and l1s cross-validate the lasso fit on shuffled folds. The
    standard error is taken across folds of the per-fold mean errors. When
    the minimiser sits on an end of the grid, the grid is extended by a
    decade on that side (up to five times).
    """
    X, Y = _check_xy(X, Y)
    n = X.shape[0]
    kind = spec.kind
    if kind is Kind.FPCR:
        raise ValueError("least squares has no penalty to select")
    folds = spec.folds if folds is None else folds
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    lambdas = spec.grid()
    if lambdas.size == 0:
        raise ValueError("empty lambda grid")
    fold_ids = _fold_ids(n, min(folds, n), rng)
    alpha = spec.alpha

    def run(lams):
        err, w = _cv_errors(X, Y, kind, lams, alpha, fold_ids)
        return err, w

    err, w = run(lambdas)
    if spec.expand_grid and lambdas.size > 1:
        step = lambdas[0] / lambdas[1]
        per_decade = np.arange(1, int(np.ceil(np.log(10) / np.log(step))) + 1)
        lmax = lambda_max(X, Y, alpha) if kind is not Kind.RIDGE else np.inf
        for _ in range(5):
            k = _first_argmin(np.average(err, axis=0, weights=w))
            if k == 0 and lambdas[0] < lmax:
                extra = lambdas[0] * step ** per_decade[::-1]
                lambdas = np.concatenate([extra, lambdas])
                err = np.concatenate([run(extra)[0], err], axis=1)
            elif k == lambdas.size - 1:
                extra = lambdas[-1] / step ** per_decade
                lambdas = np.concatenate([lambdas, extra])
                err = np.concatenate([err, run(extra)[0]], axis=1)
            else:
                break
    mean = np.average(err, axis=0, weights=w)
    nf = err.shape[0]
    var = np.average((err - mean) ** 2, axis=0, weights=w)
    se = np.sqrt(var / max(nf - 1, 1))
    k = _first_argmin(mean)
    within = np.nonzero(mean <= mean[k] + se[k])[0]
    k1 = int(within[0])  # lambdas decrease, so the first index is the largest
    return CvResult(float(lambdas[k]), float(lambdas[k1]), lambdas, mean, se, fold_ids)


def _first_argmin(a):
    # ties resolved toward the largest penalty (first in a decreasing grid)
    a = np.asarray(a)
    return int(np.nonzero(a <= a.min() * (1 + 1e-12) + 1e-300)[0][0])


def predict(fit_or_B, Xnew) -> np.ndarray:
    B = fit_or_B.B if isinstance(fit_or_B, Fit) else np.asarray(fit_or_B, dtype=float)
    Xnew = _as2d(Xnew, "Xnew")
    if Xnew.shape[1] != B.shape[0]:
        raise ValueError(f"Xnew has {Xnew.shape[1]} columns, B has {B.shape[0]} rows")
    return Xnew @ B


def beta_surface(fit_or_B, basis_x: FpcBasis, basis_y: FpcBasis) -> np.ndarray:
    """Kernel ``sum_jk B_jk psi_j(s) phi_k(t)`` on the product grid (s rows, t columns)."""
    B = fit_or_B.B if isinstance(fit_or_B, Fit) else np.asarray(fit_or_B, dtype=float)
    if B.shape != (basis_x.k, basis_y.k):
        raise ValueError(
            f"B is {B.shape} but the bases have {basis_x.k} and {basis_y.k} terms"
        )
    return basis_x.eigenfunctions.T @ B @ basis_y.eigenfunctions
