"""Closed form of the projected Cramer-von Mises statistic.

For residual scores ``E`` (n x q) and covariate scores ``X`` (n x p) on
orthonormal bases the statistic is::

    PCvM = 1/n^2 * 2 pi^(p/2 + q/2 - 1) / (q Gamma(p/2) Gamma(q/2)) * tr(E' A E)

where ``A[i, j] = sum_r angle(x_i, x_j, x_r)`` collects the solid angles of
spherical wedges. ``A`` stores the *angular* sums; every pi/Gamma factor
lives in the leading constant.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .fdata import GramFactor

__all__ = [
    "AdotMatrix",
    "PcvmValue",
    "tie_tolerance",
    "wedge_angle",
    "adot",
    "sphere_area",
    "lemma3_constant",
    "statistic_constant",
    "pcvm_statistic",
    "pcvm_statistic_many",
    "pcvm_statistic_general",
    "pcvm_scalar_response",
]

# entries of the r-blocks processed at once when building A
_CHUNK_ELEMENTS = 1 << 20


@dataclass(frozen=True, eq=False)
class AdotMatrix:
    A: np.ndarray
    n: int
    p: int


@dataclass(frozen=True)
class PcvmValue:
    value: float
    p: int
    q: int
    n: int

    def __float__(self):
        return self.value


def tie_tolerance(X) -> float:
    """Distance below which two score rows count as equal."""
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return 1e-10
    return 1e-10 * (1.0 + float(np.max(np.linalg.norm(X, axis=1))))


def wedge_angle(xi, xj, xr, tie_tol: float = 1e-10) -> float:
    """Solid-angle factor of the region where both ``xi - xr`` and ``xj - xr``
    have nonpositive projection.

    ``2 pi`` when the three points coincide, ``pi`` when exactly one of
    ``xi, xj`` coincides with ``xr``, else ``pi - arccos(cos angle)``.
    """
    di = np.asarray(xi, dtype=float) - np.asarray(xr, dtype=float)
    dj = np.asarray(xj, dtype=float) - np.asarray(xr, dtype=float)
    ni = float(np.linalg.norm(di))
    nj = float(np.linalg.norm(dj))
    zi, zj = ni <= tie_tol, nj <= tie_tol
    if zi and zj:
        return 2 * math.pi
    if zi or zj:
        return math.pi
    if np.array_equal(di, dj):
        return math.pi
    c = float(di @ dj) / (ni * nj)
    return math.pi - math.acos(min(1.0, max(-1.0, c)))


def _adot_block(X, rs, tie_tol):
    """Sum over ``r in rs`` of the n x n angle matrices."""
    D = X[None, :, :] - X[rs][:, None, :]          # (b, n, p)
    norms = np.sqrt(np.einsum("bip,bip->bi", D, D))
    zero = norms <= tie_tol
    safe = np.where(zero, 1.0, norms)
    U = D / safe[:, :, None]
    C = U @ U.transpose(0, 2, 1)
    # a unit vector against itself; arccos is ill-conditioned near 1
    diag = np.arange(C.shape[1])
    C[:, diag, diag] = 1.0
    np.clip(C, -1.0, 1.0, out=C)
    ang = np.pi - np.arccos(C)
    # coincidence cases override the wedge formula
    zi = zero[:, :, None]
    zj = zero[:, None, :]
    ang = np.where(zi | zj, np.pi, ang)
    ang = np.where(zi & zj, 2 * np.pi, ang)
    return ang.sum(axis=0)


def adot(X, tie_tol: float | None = None, threads: int = 1) -> AdotMatrix:
    """Matrix of summed wedge angles, ``A[i, j] = sum_r wedge_angle(x_i, x_j, x_r)``.

    The ``r`` index is split into fixed-size blocks; blocks may be run on
    several threads and are summed in block order, so the result does not
    depend on ``threads``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if n < 1:
        raise ValueError("need at least one score row")
    if tie_tol is None:
        tie_tol = tie_tolerance(X)
    per_block = max(1, _CHUNK_ELEMENTS // max(1, n * n))
    blocks = [np.arange(s, min(n, s + per_block)) for s in range(0, n, per_block)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda b: _adot_block(X, b, tie_tol), blocks))
    else:
        parts = [_adot_block(X, b, tie_tol) for b in blocks]
    A = parts[0]
    for part in parts[1:]:
        A = A + part
    A = (A + A.T) / 2
    return AdotMatrix(A, n, p)


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d (2 for the two points of S^0)."""
    return 2.0 * math.exp(0.5 * d * math.log(math.pi) - gammaln(d / 2))


def lemma3_constant(q: int) -> float:
    """``int_{S^{q-1}} (x'w)(y'w) dw = c_q x'y`` with ``c_q = 2 pi^(q/2) / (q Gamma(q/2))``."""
    if q < 1:
        raise ValueError(f"q must be positive, got {q}")
    return sphere_area(q) / q


def statistic_constant(p: int, q: int) -> float:
    """``2 pi^(p/2 + q/2 - 1) / (q Gamma(p/2) Gamma(q/2))`` via log-gamma."""
    if p < 1 or q < 1:
        raise ValueError(f"p and q must be positive, got p={p}, q={q}")
    log_c = (
        math.log(2.0)
        + (p / 2 + q / 2 - 1) * math.log(math.pi)
        - math.log(q)
        - gammaln(p / 2)
        - gammaln(q / 2)
    )
    return math.exp(log_c)


def _as_matrix(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def pcvm_statistic(E, A: AdotMatrix, p: int | None = None) -> PcvmValue:
    E = _as_matrix(E)
    n, q = E.shape
    if A.A.shape != (n, n):
        raise ValueError(f"A is {A.A.shape} but E has {n} rows")
    p = A.p if p is None else p
    quad = float(np.sum(E * (A.A @ E)))
    value = statistic_constant(p, q) * quad / n**2
    return PcvmValue(max(value, 0.0), p, q, n)


def pcvm_statistic_many(Es, A: AdotMatrix, p: int | None = None) -> np.ndarray:
    """Statistic for a stack of residual matrices ``Es`` of shape (B, n, q)."""
    Es = np.asarray(Es, dtype=float)
    nb, n, q = Es.shape
    p = A.p if p is None else p
    flat = np.moveaxis(Es, 0, 1).reshape(n, nb * q)
    quad = np.sum(flat * (A.A @ flat), axis=0).reshape(nb, q).sum(axis=1)
    return np.maximum(statistic_constant(p, q) * quad / n**2, 0.0)


def pcvm_statistic_general(E, Q: GramFactor, P: GramFactor, A: AdotMatrix) -> PcvmValue:
    """Statistic for residual and covariate scores on non-orthonormal bases.

    ``P`` and ``Q`` are the Gram factors (``gram = R'R``) of the covariate
    and response bases. ``A`` must be built from the covariate scores mapped
    through the covariate factor, i.e. ``adot(X @ P.cholesky.T)``. The
    residual rows enter as ``Q e_i``, and the result is divided by
    ``|P| |Q|``. For identity factors this is :func:`pcvm_statistic`.
    """
    E = _as_matrix(E)
    n, q = E.shape
    p = A.p
    if Q.cholesky.shape != (q, q):
        raise ValueError(f"response factor is {Q.cholesky.shape}, need {(q, q)}")
    if P.cholesky.shape != (p, p):
        raise ValueError(f"covariate factor is {P.cholesky.shape}, need {(p, p)}")
    if not (np.isfinite(P.logdet) and np.isfinite(Q.logdet)):
        raise np.linalg.LinAlgError("singular Gram factor")
    EQ = E @ Q.cholesky.T
    quad = float(np.sum(EQ * (A.A @ EQ)))
    value = statistic_constant(p, q) * quad / n**2 * math.exp(-(P.logdet + Q.logdet))
    return PcvmValue(max(value, 0.0), p, q, n)


def pcvm_scalar_response(e, X) -> float:
    """Scalar-response statistic written out directly.

    ``1/n^2 * sum_ijr A_ijr e_i e_j`` with surface-area weights ``A_ijr``
    (angle times ``pi^(p/2-1) / Gamma(p/2)``) and the q = 1 sphere factor 2.
    Kept as an independent code path for the q = 1 reduction.
    """
    e = np.asarray(e, dtype=float).ravel()
    X = _as_matrix(X)
    n, p = X.shape
    tol = tie_tolerance(X)
    scale = math.exp((p / 2 - 1) * math.log(math.pi) - gammaln(p / 2))
    total = 0.0
    for r in range(n):
        for i in range(n):
            for j in range(n):
                total += wedge_angle(X[i], X[j], X[r], tol) * scale * e[i] * e[j]
    return 2.0 * total / n**2
