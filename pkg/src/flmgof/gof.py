"""Goodness-of-fit test for the functional linear model with functional response.

The composite test estimates the coefficient matrix on truncated FPC scores,
measures the residual marked process with the projected Cramer-von Mises
statistic and calibrates it by a wild bootstrap on the residual scores.
The simple variant tests a fixed kernel ``beta0`` (``beta0 = 0`` is the
no-effects test) and performs no estimation at all.

Randomness is organised in counter-based substreams of a single seed: one
stream for the cross-validation folds, and one per bootstrap replicate, so
bootstrap statistic ``b`` only depends on ``(seed, b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import pcvm
from .fdata import FunctionalSample, GridMismatchError, center, fpc, truncate_by_ev
from .regfit import EstimatorSpec, Fit, Kind, fit_fpcr, fit_l1s, fit_lasso, fit_ridge, select_lambda

__all__ = [
    "GofConfig",
    "GofResult",
    "GofError",
    "Simple",
    "ADOT_COUNTER",
    "golden_multipliers",
    "pvalue",
    "run_gof",
    "run_gof_simple",
    "bootstrap_residuals",
    "stream",
]

_SQRT5 = math.sqrt(5.0)
GOLDEN_LOW = (1 - _SQRT5) / 2
GOLDEN_HIGH = (1 + _SQRT5) / 2
GOLDEN_P_LOW = (5 + _SQRT5) / 10

# substream labels under the run seed
_CV_STREAM = 0
_BOOT_STREAM = 1


class GofError(RuntimeError):
    pass


class _Counter:
    """Counts closed-form angle matrix evaluations."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


ADOT_COUNTER = _Counter()


def _adot(X, threads):
    ADOT_COUNTER.count += 1
    return pcvm.adot(X, threads=threads)


@dataclass(frozen=True, eq=False)
class Simple:
    """Simple null hypothesis ``beta = beta0``; ``beta0`` is (m_x, m_y)."""

    beta0: np.ndarray

    @classmethod
    def no_effects(cls, mx: int, my: int) -> "Simple":
        return cls(np.zeros((mx, my)))


@dataclass(frozen=True)
class GofConfig:
    """Settings of one test run.

    Attributes
    ----------
    ev_x, ev_y : float
        Explained-variance targets fixing the truncations ``p`` and ``q``.
    B : int
        Bootstrap replicates.
    estimator : EstimatorSpec
        Estimator and penalty policy for the composite test.
    seed : int
        Root seed for folds and multipliers.
    hypothesis : "composite" or Simple
    threads : int
        Threads used for the angle matrix; results do not depend on it.
    """

    ev_x: float = 0.99
    ev_y: float = 0.99
    B: int = 500
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    seed: int = 0
    hypothesis: object = "composite"
    threads: int = 1

    def __post_init__(self):
        if self.B < 1:
            raise ValueError(f"B must be at least 1, got {self.B}")
        for name in ("ev_x", "ev_y"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if not (self.hypothesis == "composite" or isinstance(self.hypothesis, Simple)):
            raise ValueError("hypothesis must be 'composite' or a Simple instance")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(eq=False)
class GofResult:
    statistic: pcvm.PcvmValue
    boot_stats: np.ndarray
    p_value: float
    p_tilde: int
    q: int
    p: int
    lam: float
    selected: np.ndarray
    B_hat: np.ndarray
    cum_ev_x: float
    cum_ev_y: float

    def payload(self) -> dict:
        """Plain-data view used for reports and reproducibility checks."""
        return {
            "statistic": self.statistic.value,
            "p_value": self.p_value,
            "p": self.p,
            "p_tilde": self.p_tilde,
            "q": self.q,
            "lambda": self.lam,
            "selected": [int(i) + 1 for i in self.selected],
            "cum_ev_x": self.cum_ev_x,
            "cum_ev_y": self.cum_ev_y,
            "boot_stats": [float(b) for b in self.boot_stats],
        }


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the substream ``key`` of ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def golden_multipliers(n: int, rng: np.random.Generator) -> np.ndarray:
    """Two-point golden-section multipliers with mean 0, variance 1 and third moment 1."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    return np.where(rng.random(n) < GOLDEN_P_LOW, GOLDEN_LOW, GOLDEN_HIGH)


def pvalue(stat: float, boot_stats) -> float:
    """Fraction of bootstrap statistics at or above ``stat``."""
    boot = np.asarray(boot_stats, dtype=float)
    if boot.size < 1:
        raise ValueError("need at least one bootstrap statistic")
    return np.count_nonzero(stat <= boot) / boot.size


# bootstrap replicates evaluated per batch, bounding memory at large B
_BOOT_BATCH = 256


def _multiplier_matrix(seed, start, stop, n):
    return np.stack([golden_multipliers(n, stream(seed, _BOOT_STREAM, b)) for b in range(start, stop)])


def _bootstrap(seed, B, n, stats_of):
    """Concatenate ``stats_of(V)`` over consecutive multiplier batches."""
    out = [stats_of(_multiplier_matrix(seed, lo, min(B, lo + _BOOT_BATCH), n))
           for lo in range(0, B, _BOOT_BATCH)]
    return np.concatenate(out)


@dataclass
class _Truncation:
    Xs: np.ndarray
    Ys: np.ndarray
    basis_x: object
    basis_y: object
    p: int
    q: int


def _truncate(X: FunctionalSample, Y: FunctionalSample, cfg: GofConfig) -> _Truncation:
    if X.n != Y.n:
        raise ValueError(f"X has {X.n} curves but Y has {Y.n}")
    if X.n < 3:
        raise ValueError(f"need at least 3 curves, got {X.n}")
    Xc, mx = center(X)
    Yc, my = center(Y)
    bx, sx = fpc(Xc, mean=mx)
    by, sy = fpc(Yc, mean=my)
    p = truncate_by_ev(bx, cfg.ev_x)
    q = truncate_by_ev(by, cfg.ev_y)
    return _Truncation(sx.scores[:, :p], sy.scores[:, :q], bx.truncated(p), by.truncated(q), p, q)


def _negligible(E, Y):
    # residuals at round-off level of the response count as an exact fit
    return float(np.max(np.abs(E), initial=0.0)) <= 1e-10 * max(1.0, float(np.max(np.abs(Y), initial=0.0)))


def _fit_composite(X, Y, spec: EstimatorSpec, seed: int) -> Fit:
    n, p = X.shape
    try:
        if spec.kind is Kind.FPCR:
            if n <= p:
                raise ValueError(f"least squares with p={p} components needs more than {p} curves")
            return fit_fpcr(X, Y)
        if spec.policy == "fixed":
            lam = float(spec.lam)
        else:
            cv = select_lambda(X, Y, spec, rng=stream(seed, _CV_STREAM))
            lam = cv.chosen(spec.policy)
        if spec.kind is Kind.RIDGE:
            return fit_ridge(X, Y, lam)
        if spec.kind is Kind.LASSO:
            return fit_lasso(X, Y, lam, spec.alpha)
        return fit_l1s(X, Y, lam)
    except (np.linalg.LinAlgError, ArithmeticError, RuntimeError, ValueError) as exc:
        raise GofError(f"{spec.kind.value} fit on {n}x{p} scores failed: {exc}") from exc


def bootstrap_residuals(fit: Fit, Xt: np.ndarray, V: np.ndarray, path: str = "fast") -> np.ndarray:
    """Residual scores of every bootstrap replicate, shape (B, n, q).

    ``Xt`` holds the covariate scores of the selected rows and ``V`` the
    (B, n) multipliers. The bootstrap responses ``Xt B + e V`` are column
    centered and refitted with the frozen penalty and selection; ``"fast"``
    applies the cached hat matrix, ``"slow"`` refits explicitly.
    """
    Bt = fit.B[fit.selected] if fit.selected.size else np.zeros((0, fit.B.shape[1]))
    E = fit.residuals
    Ystar = (Xt @ Bt)[None, :, :] + E[None, :, :] * V[:, :, None]
    Ystar -= Ystar.mean(axis=1, keepdims=True)
    if path == "fast":
        if fit.hat is None:
            raise ValueError(f"{fit.kind.value} has no hat matrix; use the slow path")
        return Ystar - fit.hat @ Ystar
    if path != "slow":
        raise ValueError(f"unknown path {path!r}")
    out = np.empty_like(Ystar)
    for b in range(Ystar.shape[0]):
        out[b] = _refit(fit, Xt, Ystar[b]).residuals
    return out


def _refit(fit: Fit, Xt, Ystar) -> Fit:
    if Xt.shape[1] == 0:
        return Fit(fit.kind, np.zeros((0, Ystar.shape[1])), fit.selected, fit.lam, Ystar.copy())
    if fit.kind is Kind.RIDGE:
        return fit_ridge(Xt, Ystar, fit.lam)
    if fit.kind is Kind.LASSO:
        # only the lasso kind needs full refits; selection stays frozen
        return fit_lasso(Xt, Ystar, fit.lam)
    return fit_fpcr(Xt, Ystar)


def _finish(stat, boots, tr: _Truncation, fit_B, lam, selected, p_tilde):
    return GofResult(
        statistic=stat,
        boot_stats=boots,
        p_value=pvalue(stat.value, boots),
        p_tilde=p_tilde,
        q=tr.q,
        p=tr.p,
        lam=lam,
        selected=selected,
        B_hat=fit_B,
        cum_ev_x=float(tr.basis_x.cum_ev[-1]),
        cum_ev_y=float(tr.basis_y.cum_ev[-1]),
    )


def run_gof(X: FunctionalSample, Y: FunctionalSample, cfg: GofConfig | None = None) -> GofResult:
    """Composite test of the functional linear model.

    Steps: center both samples, compute FPCs and truncate by explained
    variance, estimate ``B`` (selecting ``p_tilde`` rows for the lasso
    estimators), compute the statistic on the residual scores, then
    bootstrap with golden-section multipliers reusing the same angle matrix.

    If the selection keeps no rows, the angle matrix is built from all
    ``p`` covariate components.
    """
    cfg = GofConfig() if cfg is None else cfg
    if isinstance(cfg.hypothesis, Simple):
        return run_gof_simple(X, Y, cfg.hypothesis.beta0, cfg)
    tr = _truncate(X, Y, cfg)
    fit = _fit_composite(tr.Xs, tr.Ys, cfg.estimator, cfg.seed)
    sel = fit.selected
    Xt = tr.Xs[:, sel]
    A = _adot(Xt if sel.size else tr.Xs, cfg.threads)
    E = fit.residuals
    if _negligible(E, tr.Ys):
        E = np.zeros_like(E)
    stat = pcvm.pcvm_statistic(E, A)
    fit_b = Fit(fit.kind, fit.B, sel, fit.lam, E, fit.hat)
    path = "fast" if fit.hat is not None else "slow"
    boots = _bootstrap(cfg.seed, cfg.B, tr.Xs.shape[0],
                       lambda V: pcvm.pcvm_statistic_many(bootstrap_residuals(fit_b, Xt, V, path), A))
    return _finish(stat, boots, tr, fit.B, fit.lam, sel, int(sel.size))


def project_kernel(beta0, basis_x, basis_y) -> np.ndarray:
    """Coefficients ``<<beta0, psi_j phi_k>>`` by quadrature in both arguments."""
    beta0 = np.asarray(beta0, dtype=float)
    mx, my = basis_x.grid.m, basis_y.grid.m
    if beta0.shape != (mx, my):
        raise GridMismatchError(f"beta0 is {beta0.shape}, the product grid is {(mx, my)}")
    left = basis_x.eigenfunctions * basis_x.grid.weights
    right = basis_y.eigenfunctions * basis_y.grid.weights
    return left @ beta0 @ right.T


def run_gof_simple(X: FunctionalSample, Y: FunctionalSample, beta0, cfg: GofConfig | None = None) -> GofResult:
    """Test of the simple hypothesis ``beta = beta0``.

    ``beta0`` is given on ``grid_X x grid_Y``; its double projection onto the
    truncated FPC bases replaces the estimate and is never refitted, so the
    bootstrap residuals are the centered multiplied residual scores.
    """
    cfg = GofConfig() if cfg is None else cfg
    tr = _truncate(X, Y, cfg)
    B0 = project_kernel(beta0, tr.basis_x, tr.basis_y)
    A = _adot(tr.Xs, cfg.threads)
    E = tr.Ys - tr.Xs @ B0
    if _negligible(E, tr.Ys):
        E = np.zeros_like(E)
    stat = pcvm.pcvm_statistic(E, A)

    def stats_of(V):
        Estar = E[None, :, :] * V[:, :, None]
        Estar -= Estar.mean(axis=1, keepdims=True)
        return pcvm.pcvm_statistic_many(Estar, A)

    boots = _bootstrap(cfg.seed, cfg.B, tr.Xs.shape[0], stats_of)
    sel = np.arange(tr.p)
    return _finish(stat, boots, tr, B0, 0.0, sel, tr.p)
