"""Brute-force Monte Carlo checks for the closed-form statistic.

These estimators integrate over uniform directions on spheres directly and
do not share code with :mod:`flmgof.pcvm`. Every estimate comes with a
standard error. On ``S^0`` (dimension one) the "sphere" is ``{-1, +1}`` and
the integral is an exact two-point sum with zero standard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "McEstimate",
    "SphereSampler",
    "mc_wedge_area",
    "mc_pcvm",
    "mc_lemma3",
    "within",
]

_BATCH = 20_000


@dataclass(frozen=True)
class McEstimate:
    estimate: float
    se: float
    draws: int

    def agrees(self, value: float, k: float = 3.0, atol: float = 1e-12) -> bool:
        return within(self, value, k, atol)


def within(est: McEstimate, value: float, k: float = 3.0, atol: float = 1e-12) -> bool:
    return abs(est.estimate - value) <= k * est.se + atol * max(1.0, abs(value))


def _area(d):
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


class SphereSampler:
    """Uniform points on the unit sphere of R^d via normalised Gaussians."""

    def __init__(self, dimension: int, rng: np.random.Generator):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.rng = rng

    @property
    def exhaustive(self) -> bool:
        return self.dimension == 1

    def points(self) -> np.ndarray:
        """The whole of S^0, for the exhaustive case."""
        return np.array([[-1.0], [1.0]])

    def draw(self, size: int) -> np.ndarray:
        z = self.rng.standard_normal((size, self.dimension))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    @property
    def area(self) -> float:
        return _area(self.dimension)


def _batches(total):
    done = 0
    while done < total:
        b = min(_BATCH, total - done)
        yield b
        done += b


class _Accumulator:
    def __init__(self):
        self.n = 0
        self.s = 0.0
        self.s2 = 0.0

    def add(self, v):
        self.n += v.size
        self.s += float(v.sum())
        self.s2 += float((v * v).sum())

    def result(self, factor):
        mean = self.s / self.n
        var = max(self.s2 / self.n - mean * mean, 0.0)
        se = math.sqrt(var / max(self.n - 1, 1))
        return McEstimate(factor * mean, factor * se, self.n)


def mc_wedge_area(xi, xj, xr, draws: int, rng: np.random.Generator) -> McEstimate:
    """Surface area of ``{z : (xi - xr)'z <= 0 and (xj - xr)'z <= 0}``.

    A zero difference vector imposes no constraint. The result is an area
    on the sphere, not an angle.
    """
    di = np.asarray(xi, float) - np.asarray(xr, float)
    dj = np.asarray(xj, float) - np.asarray(xr, float)
    sampler = SphereSampler(di.size, rng)
    if sampler.exhaustive:
        z = sampler.points()
        hit = ((z @ di) <= 0) & ((z @ dj) <= 0)
        return McEstimate(float(hit.sum()), 0.0, 2)
    if draws < 10_000:
        raise ValueError("use at least 1e4 draws")
    hits = 0
    for b in _batches(draws):
        z = sampler.draw(b)
        hits += int(np.count_nonzero(((z @ di) <= 0) & ((z @ dj) <= 0)))
    frac = hits / draws
    se = math.sqrt(frac * (1 - frac) / draws)
    return McEstimate(frac * sampler.area, se * sampler.area, draws)


def _process_at_jumps_direct(px, marks):
    # proc[b, r] = sum_i marks[b, i] 1{px[b, i] <= px[b, r]}
    ind = px[:, :, None] <= px[:, None, :]
    return np.einsum("bi,bir->br", marks, ind)


def _process_at_jumps_sorted(px, marks):
    # same sums through cumulative sums in sorted order; a tie group takes
    # the value at its last member. Order of r is irrelevant for the mean.
    order = np.argsort(px, axis=1, kind="stable")
    sv = np.take_along_axis(px, order, axis=1)
    cs = np.cumsum(np.take_along_axis(marks, order, axis=1), axis=1)
    b, n = px.shape
    is_end = np.ones((b, n), dtype=bool)
    is_end[:, :-1] = sv[:, 1:] != sv[:, :-1]
    idx = np.where(is_end, np.arange(n), n)
    last = np.minimum.accumulate(idx[:, ::-1], axis=1)[:, ::-1]
    return np.take_along_axis(cs, last, axis=1)


def _process_sq(E, X, g, h, gram_x=None, gram_y=None, Pinv=None, Qinv=None, method="sorted"):
    """Squared residual marked process integrated against the ecdf.

    For each direction pair returns ``1/n sum_r [n^-1/2 sum_i <e_i, h> 1{<x_i,g> <= <x_r,g>}]^2``.
    """
    n = X.shape[0]
    if Pinv is not None:
        g = g @ Pinv.T
    if Qinv is not None:
        h = h @ Qinv.T
    px = X @ (gram_x @ g.T) if gram_x is not None else X @ g.T      # (n, b)
    marks = E @ (gram_y @ h.T) if gram_y is not None else E @ h.T   # (n, b)
    fn = _process_at_jumps_sorted if method == "sorted" else _process_at_jumps_direct
    proc = fn(px.T, marks.T) / math.sqrt(n)
    return np.mean(proc**2, axis=1)


def mc_pcvm(E, X, draws: int, rng: np.random.Generator,
            gram_x=None, gram_y=None, method: str = "sorted") -> McEstimate:
    """Monte Carlo value of the statistic as a triple integral.

    Integrates the squared doubly projected residual process over the
    covariate ecdf (exact sum over jump points) and over uniform directions
    on both spheres, then scales by the two sphere areas.

    With ``gram_x``/``gram_y`` the scores are taken on non-orthonormal bases
    with those Gram matrices; directions are then ``P^-1 g`` and ``Q^-1 h``
    with ``P, Q`` the upper Cholesky factors, and the estimate is of
    ``|P||Q|`` times the statistic.

    ``method="direct"`` evaluates the process at the jump points with an
    explicit indicator tensor; ``"sorted"`` uses cumulative sums. Both are
    the same finite sum.
    """
    if method not in ("sorted", "direct"):
        raise ValueError(f"unknown method {method!r}")
    E = np.asarray(E, float)
    X = np.asarray(X, float)
    if E.ndim == 1:
        E = E[:, None]
    if X.ndim == 1:
        X = X[:, None]
    n, q = E.shape
    p = X.shape[1]
    Pinv = Qinv = None
    if gram_x is not None:
        Pinv = np.linalg.inv(np.linalg.cholesky(gram_x).T)
    if gram_y is not None:
        Qinv = np.linalg.inv(np.linalg.cholesky(gram_y).T)
    sx = SphereSampler(p, rng)
    sy = SphereSampler(q, rng)
    kw = dict(gram_x=gram_x, gram_y=gram_y, Pinv=Pinv, Qinv=Qinv, method=method)
    if sx.exhaustive and sy.exhaustive:
        g = np.repeat(sx.points(), 2, axis=0)
        h = np.tile(sy.points(), (2, 1))
        vals = _process_sq(E, X, g, h, **kw)
        return McEstimate(float(vals.sum()), 0.0, 4)
    acc = _Accumulator()
    factor = 1.0
    for b in _batches(draws):
        if sx.exhaustive:
            # exact sum over g in {-1, 1}, Monte Carlo over h
            h = sy.draw(b)
            v = sum(_process_sq(E, X, np.full((b, 1), s), h, **kw) for s in (-1.0, 1.0))
            factor = sy.area
        elif sy.exhaustive:
            g = sx.draw(b)
            v = sum(_process_sq(E, X, g, np.full((b, 1), s), **kw) for s in (-1.0, 1.0))
            factor = sx.area
        else:
            v = _process_sq(E, X, sx.draw(b), sy.draw(b), **kw)
            factor = sx.area * sy.area
        acc.add(v)
    return acc.result(factor)


def mc_lemma3(x, y, draws: int, rng: np.random.Generator) -> McEstimate:
    """Monte Carlo value of ``int_{S^{q-1}} (x'w)(y'w) dw``."""
    x = np.asarray(x, float).ravel()
    y = np.asarray(y, float).ravel()
    sampler = SphereSampler(x.size, rng)
    if sampler.exhaustive:
        w = sampler.points()
        return McEstimate(float(np.sum((w @ x) * (w @ y))), 0.0, 2)
    if draws < 100_000:
        raise ValueError("use at least 1e5 draws")
    acc = _Accumulator()
    for b in _batches(draws):
        w = sampler.draw(b)
        acc.add((w @ x) * (w @ y))
    return acc.result(sampler.area)
