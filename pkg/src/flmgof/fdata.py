"""Functional data on a discretized interval.

Curves are stored as rows of a matrix evaluated on a shared :class:`Grid`.
All L2 geometry (inner products, norms, orthonormality) is realised by the
grid's quadrature weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid",
    "FunctionalSample",
    "FpcBasis",
    "ScoreMatrix",
    "GramFactor",
    "make_grid",
    "inner_product",
    "center",
    "fpc",
    "truncate_by_ev",
    "project",
    "reconstruct",
    "gram_factor",
    "grid_from_nodes",
    "CsvFormatError",
    "read_curves",
    "write_curves",
    "read_surface",
    "write_surface",
]


class GridMismatchError(ValueError):
    pass


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    """Nodes and quadrature weights on ``[lower, upper]``."""

    lower: float
    upper: float
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a grid needs at least two nodes")
        if weights.shape != nodes.shape:
            raise ValueError("weights and nodes must have the same length")
        if not (np.all(np.isfinite(nodes)) and np.all(np.isfinite(weights))):
            raise ValueError("grid nodes and weights must be finite")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        if nodes[0] < self.lower or nodes[-1] > self.upper:
            raise ValueError("grid nodes must lie inside [lower, upper]")
        if np.any(weights < 0):
            raise ValueError("quadrature weights must be nonnegative")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def m(self) -> int:
        return self.nodes.size

    def same_as(self, other: "Grid") -> bool:
        return self is other or (
            self.m == other.m
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.weights, other.weights)
        )


def make_grid(lower: float, upper: float, m: int, rule: str = "trapezoid") -> Grid:
    """Equispaced grid with composite trapezoid (default) or Simpson weights.

    Examples
    --------
    >>> make_grid(2, 3, 3).weights
    array([0.25, 0.5 , 0.25])
    """
    if m < 2:
        raise ValueError(f"m must be at least 2, got {m}")
    if not lower < upper:
        raise ValueError(f"need lower < upper, got [{lower}, {upper}]")
    nodes = np.linspace(lower, upper, m)
    h = (upper - lower) / (m - 1)
    if rule == "trapezoid":
        weights = np.full(m, h)
        weights[[0, -1]] = h / 2
    elif rule == "simpson":
        if m % 2 == 0:
            raise ValueError("Simpson's rule needs an odd number of nodes")
        weights = np.full(m, 2.0)
        weights[1::2] = 4.0
        weights[[0, -1]] = 1.0
        weights *= h / 3
    else:
        raise ValueError(f"unknown quadrature rule {rule!r}")
    return Grid(float(lower), float(upper), nodes, weights)


def inner_product(f, g, grid: Grid) -> float:
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != (grid.m,) or g.shape != (grid.m,):
        raise ValueError(
            f"functions must have {grid.m} values, got {f.shape} and {g.shape}"
        )
    return float(np.sum(grid.weights * f * g))


@dataclass(frozen=True, eq=False)
class FunctionalSample:
    """``n`` curves evaluated on ``grid.nodes`` (one curve per row)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float, ndmin=2)
        if values.ndim != 2 or values.shape[1] != self.grid.m:
            raise ValueError(
                f"values must be n x {self.grid.m}, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("functional sample contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.n

    def norms(self) -> np.ndarray:
        """L2 norm of each curve."""
        return np.sqrt(self.values**2 @ self.grid.weights)


@dataclass(frozen=True, eq=False)
class FpcBasis:
    """Empirical functional principal components of a sample.

    ``eigenvalues`` use the ``1/n`` covariance divisor. ``cum_ev`` is the
    cumulative explained variance relative to the total variance of the
    sample, so it ends below one when fewer than all components are kept.
    """

    grid: Grid
    mean: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    cum_ev: np.ndarray

    @property
    def k(self) -> int:
        return self.eigenfunctions.shape[0]

    def truncated(self, k: int) -> "FpcBasis":
        if not 0 <= k <= self.k:
            raise ValueError(f"cannot truncate a {self.k}-term basis to {k} terms")
        return FpcBasis(
            self.grid,
            self.mean,
            self.eigenfunctions[:k],
            self.eigenvalues[:k],
            self.cum_ev[:k],
        )

    def subset(self, rows) -> "FpcBasis":
        rows = np.asarray(rows, dtype=int)
        return FpcBasis(
            self.grid,
            self.mean,
            self.eigenfunctions[rows],
            self.eigenvalues[rows],
            self.cum_ev[rows],
        )


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Coefficients of ``n`` curves on the first ``k`` functions of a basis."""

    scores: np.ndarray
    basis: FpcBasis | None = field(default=None, repr=False)

    def __post_init__(self):
        scores = np.array(self.scores, dtype=float, ndmin=2)
        if self.basis is not None and scores.shape[1] != self.basis.k:
            raise ValueError(
                f"{scores.shape[1]} score columns for a {self.basis.k}-term basis"
            )
        object.__setattr__(self, "scores", scores)

    def __array__(self, dtype=None, copy=None):
        return self.scores if dtype is None else self.scores.astype(dtype)

    @property
    def shape(self):
        return self.scores.shape


@dataclass(frozen=True, eq=False)
class GramFactor:
    """Gram matrix of a basis and its upper Cholesky factor ``R`` (gram = R'R)."""

    gram: np.ndarray
    cholesky: np.ndarray
    logdet: float

    @property
    def det(self) -> float:
        """Determinant of the Cholesky factor, i.e. sqrt(det(gram))."""
        return float(np.exp(self.logdet))

    @classmethod
    def identity(cls, k: int) -> "GramFactor":
        return cls(np.eye(k), np.eye(k), 0.0)


def center(sample: FunctionalSample) -> tuple[FunctionalSample, np.ndarray]:
    mean = sample.values.mean(axis=0)
    return FunctionalSample(sample.grid, sample.values - mean), mean


def _is_centered(values: np.ndarray) -> bool:
    scale = max(float(np.max(np.abs(values), initial=0.0)), 1.0)
    return bool(np.all(np.abs(values.mean(axis=0)) <= 1e-8 * scale))


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each row made positive
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(vectors.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def fpc(sample: FunctionalSample, k_max: int | None = None,
        mean: np.ndarray | None = None) -> tuple[FpcBasis, ScoreMatrix]:
    """Functional principal components of a centered sample.

    The symmetric matrix ``W^1/2 C W^1/2`` (``W`` the quadrature weights,
    ``C`` the 1/n sample covariance) is diagonalised and its eigenvectors
    mapped back by ``W^-1/2``, which makes the eigenfunctions orthonormal
    under the quadrature inner product.

    Parameters
    ----------
    sample : FunctionalSample
        Centered curves (column means zero).
    k_max : int, optional
        Number of components to keep, at most ``min(n, m)``. Defaults to
        ``min(n, m)``.
    mean : array, optional
        Mean curve removed before the call; stored on the basis.

    Returns
    -------
    basis : FpcBasis
    scores : ScoreMatrix
        ``n x k_max`` scores of the sample on the basis.
    """
    grid = sample.grid
    n, m = sample.values.shape
    if k_max is None:
        k_max = min(n, m)
    if not 1 <= k_max <= min(n, m):
        raise ValueError(f"k_max must be in [1, {min(n, m)}], got {k_max}")
    values = sample.values
    if not _is_centered(values):
        raise ValueError("fpc expects a centered sample; call center() first")
    w = grid.weights
    if np.any(w <= 0):
        raise ValueError("fpc needs strictly positive quadrature weights")
    sw = np.sqrt(w)
    z = values * sw
    cov = z.T @ z / n
    evals, evecs = np.linalg.eigh((cov + cov.T) / 2)
    # descending, ties keep the original order
    order = np.argsort(-evals, kind="stable")
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order].T
    total = evals.sum()
    cum_ev = np.cumsum(evals) / total if total > 0 else np.ones_like(evals)

    funs = evecs[:k_max] / sw
    funs /= np.sqrt(funs**2 @ w)[:, None]
    funs = _fix_signs(funs)
    if mean is None:
        mean = np.zeros(m)
    basis = FpcBasis(
        grid,
        np.asarray(mean, dtype=float),
        funs,
        evals[:k_max],
        np.minimum(cum_ev[:k_max], 1.0),
    )
    scores = (values * w) @ funs.T
    return basis, ScoreMatrix(scores, basis)


def truncate_by_ev(basis: FpcBasis, threshold: float) -> int:
    """Smallest number of components whose cumulative EV reaches ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    cum_ev = np.asarray(basis.cum_ev if isinstance(basis, FpcBasis) else basis)
    hits = np.nonzero(cum_ev >= threshold - 1e-12)[0]
    return int(hits[0]) + 1 if hits.size else int(cum_ev.size)


def project(sample: FunctionalSample, basis: FpcBasis, k: int | None = None) -> ScoreMatrix:
    if not sample.grid.same_as(basis.grid):
        raise GridMismatchError("sample and basis live on different grids")
    k = basis.k if k is None else k
    if k > basis.k:
        raise ValueError(f"k={k} exceeds the basis length {basis.k}")
    sub = basis.truncated(k)
    return ScoreMatrix((sample.values * basis.grid.weights) @ sub.eigenfunctions.T, sub)


def reconstruct(scores, basis: FpcBasis) -> FunctionalSample:
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1:
        s = s[None, :]
    if s.shape[1] != basis.k:
        raise ValueError(f"{s.shape[1]} score columns for a {basis.k}-term basis")
    return FunctionalSample(basis.grid, s @ basis.eigenfunctions)


def gram_factor(basisfuns, grid: Grid) -> GramFactor:
    """Gram matrix of ``basisfuns`` (rows) and its Cholesky factor."""
    b = np.atleast_2d(np.asarray(basisfuns, dtype=float))
    if b.shape[1] != grid.m:
        raise ValueError(f"basis functions must have {grid.m} values")
    gram = (b * grid.weights) @ b.T
    gram = (gram + gram.T) / 2
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= 1e-12 * max(ev[-1], 0.0) or ev[-1] <= 0:
        raise RankDeficiencyError(
            f"gram matrix is numerically singular (eigenvalue ratio "
            f"{ev[0] / ev[-1] if ev[-1] > 0 else 0.0:.3g})"
        )
    chol = np.linalg.cholesky(gram).T
    logdet = float(np.sum(np.log(np.diag(chol))))
    return GramFactor(gram, chol, logdet)


def grid_from_nodes(nodes, lower: float | None = None, upper: float | None = None) -> Grid:
    """Grid on given nodes with trapezoid weights.

    Equispaced nodes reproduce :func:`make_grid` exactly.
    """
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 1 or nodes.size < 2:
        raise ValueError("a grid needs at least two nodes")
    lower = float(nodes[0]) if lower is None else float(lower)
    upper = float(nodes[-1]) if upper is None else float(upper)
    d = np.diff(nodes)
    if nodes[0] == lower and nodes[-1] == upper and np.allclose(d, d[0], rtol=1e-9, atol=0):
        g = make_grid(lower, upper, nodes.size)
        if np.allclose(g.nodes, nodes, rtol=0, atol=1e-12 * max(1.0, abs(upper))):
            return Grid(lower, upper, nodes, g.weights)
    if np.any(d <= 0):
        raise ValueError("grid nodes must be strictly increasing")
    w = np.zeros(nodes.size)
    w[:-1] += d / 2
    w[1:] += d / 2
    return Grid(lower, upper, nodes, w)


class CsvFormatError(ValueError):
    """Malformed curve file; ``row`` and ``column`` are 1-based when known."""

    def __init__(self, path, message, row=None, column=None):
        where = ""
        if row is not None:
            where = f" (row {row}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(f"{path}{where}: {message}")
        self.path = str(path)
        self.row = row
        self.column = column


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _rows(path):
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            yield lineno, row


def _numbers(path, lineno, cells, offset=0):
    out = []
    for j, cell in enumerate(cells, start=1 + offset):
        try:
            v = float(cell)
        except ValueError:
            raise CsvFormatError(path, f"non-numeric cell {cell!r}", lineno, j) from None
        if not np.isfinite(v):
            raise CsvFormatError(path, f"non-finite cell {cell!r}", lineno, j)
        out.append(v)
    return out


def read_curves(path, lower: float | None = None, upper: float | None = None) -> FunctionalSample:
    """Read curves stored as a header of grid nodes followed by one curve per row.

    Lines starting with ``#`` are ignored.
    """
    rows = list(_rows(path))
    if not rows:
        raise CsvFormatError(path, "empty file")
    head_line, head = rows[0]
    nodes = np.array(_numbers(path, head_line, head))
    if nodes.size < 2:
        raise CsvFormatError(path, "the header needs at least two grid nodes", head_line)
    bad = np.nonzero(np.diff(nodes) <= 0)[0]
    if bad.size:
        raise CsvFormatError(path, "header nodes are not strictly increasing", head_line, int(bad[0]) + 2)
    if len(rows) < 2:
        raise CsvFormatError(path, "no curves after the header")
    values = []
    for lineno, row in rows[1:]:
        if len(row) != nodes.size:
            raise CsvFormatError(path, f"expected {nodes.size} values, found {len(row)}", lineno)
        values.append(_numbers(path, lineno, row))
    try:
        grid = grid_from_nodes(nodes, lower, upper)
    except ValueError as exc:
        raise CsvFormatError(path, str(exc), head_line) from None
    return FunctionalSample(grid, np.array(values))


def write_curves(path, sample: FunctionalSample, comments=()):
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([_fmt(t) for t in sample.grid.nodes])
        for row in sample.values:
            w.writerow([_fmt(v) for v in row])


def read_surface(path):
    """Read a kernel stored with ``t`` nodes in the header and ``s`` in the first column.

    Returns ``(s_nodes, t_nodes, values)`` with ``values[i, j] = beta(s_i, t_j)``.
    """
    rows = list(_rows(path))
    if len(rows) < 3:
        raise CsvFormatError(path, "a surface needs a header and at least two rows")
    head_line, head = rows[0]
    t = np.array(_numbers(path, head_line, head[1:], offset=1))
    s, vals = [], []
    for lineno, row in rows[1:]:
        if len(row) != t.size + 1:
            raise CsvFormatError(path, f"expected {t.size + 1} cells, found {len(row)}", lineno)
        nums = _numbers(path, lineno, row)
        s.append(nums[0])
        vals.append(nums[1:])
    s = np.array(s)
    if np.any(np.diff(t) <= 0) or np.any(np.diff(s) <= 0):
        raise CsvFormatError(path, "surface nodes are not strictly increasing")
    return s, t, np.array(vals)


def write_surface(path, s_nodes, t_nodes, values, comments=()):
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s\\t"] + [_fmt(x) for x in t_nodes])
        for si, row in zip(s_nodes, values):
            w.writerow([_fmt(si)] + [_fmt(v) for v in row])
