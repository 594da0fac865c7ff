"""Simulated functional regression data and Monte Carlo studies.

Processes
---------
``CM``   sine series ``sum_j lam_j eps_j sqrt2 sin((j - 1/2) pi s)``, ``lam_j = 1/(pi (j - 1/2))^2``, ``eps_j ~ N(0, 4)``
``BM``   Brownian motion with sd 0.15; ``start`` is the time already elapsed at the first node
``IK_X`` cosine series ``sum_j j^(-7/4) U_j Psi_j``, ``U_j ~ U(-sqrt5, sqrt5)``
``IK_E`` cosine series ``sum_j j^(-4/5) eps_j Psi_j``, ``eps_j ~ N(0, 1.5^2)``
``GP``   stationary Gaussian process, covariance ``36 exp(-|s - t| / 0.2)``
``OU``   stationary Ornstein-Uhlenbeck, covariance ``0.35^2 exp(-|s - t|)``

with ``Psi_1 = 1`` and ``Psi_j(s) = sqrt2 cos(j pi s)`` for ``j >= 2``. Series
and covariances are evaluated in the offset ``s - lower`` of the grid.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .fdata import FunctionalSample, Grid, center, fpc, make_grid
from .gof import GofConfig, Simple, run_gof, run_gof_simple, stream
from .regfit import EstimatorSpec, Kind, fit_fpcr, fit_l1s, fit_lasso, fit_ridge, select_lambda, beta_surface

log = logging.getLogger(__name__)

_BLAS_LIMIT = None

__all__ = [
    "ProcessSpec",
    "ScenarioSpec",
    "DeviationSpec",
    "SERIES_TERMS",
    "scenario",
    "simulate",
    "kernel_surface",
    "apply_linear",
    "apply_deviation",
    "concurrent_function",
    "hypothesis_model",
    "generate",
    "run_study",
    "run_estimation_study",
    "StudyError",
    "INTENSITIES",
]

SERIES_TERMS = 50

_DEFAULTS = {
    "CM": {"sd": 2.0, "terms": SERIES_TERMS},
    "BM": {"sd": 0.15, "start": 0.0},
    "IK_X": {"half_width": math.sqrt(5.0), "terms": SERIES_TERMS},
    "IK_E": {"sd": 1.5, "terms": SERIES_TERMS},
    "GP": {"variance": 36.0, "range": 0.2},
    "OU": {"sd": 0.35, "drift": 1.0},
}


class StudyError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"replicate {index} failed: {cause}")
        self.index = index


@dataclass(frozen=True)
class ProcessSpec:
    kind: str
    grid: Grid
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in _DEFAULTS:
            raise ValueError(f"unknown process {self.kind!r}; expected one of {sorted(_DEFAULTS)}")
        merged = {**_DEFAULTS[kind], **self.params}
        for k, v in merged.items():
            if v < 0 or (v == 0 and k != "start"):
                raise ValueError(f"{kind} parameter {k} must be positive, got {v}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", merged)


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    covariate: ProcessSpec
    error: ProcessSpec

    @property
    def grid_x(self) -> Grid:
        return self.covariate.grid

    @property
    def grid_y(self) -> Grid:
        return self.error.grid


def scenario(id: str, y_interval=(2.0, 3.0), m: int = 101) -> ScenarioSpec:
    """One of the three standard scenarios with ``m``-node grids.

    The covariate lives on [0, 1]; ``y_interval`` is [0, 1] for the simple
    hypothesis studies and [2, 3] for the estimation and composite studies.
    """
    pairs = {"S1": ("CM", "BM"), "S2": ("GP", "OU"), "S3": ("IK_X", "IK_E")}
    key = id.upper()
    if key not in pairs:
        raise ValueError(f"unknown scenario {id!r}; expected S1, S2 or S3")
    gx = make_grid(0.0, 1.0, m)
    gy = make_grid(y_interval[0], y_interval[1], m)
    kx, ke = pairs[key]
    # the S1 error is the motion between times 2 and 3 on either response grid
    params = {"start": 2.0} if ke == "BM" else {}
    return ScenarioSpec(key, ProcessSpec(kx, gx), ProcessSpec(ke, gy, params))


def _cos_basis(u, terms):
    """``Psi_1 = 1`` and ``Psi_j = sqrt2 cos(j pi u)``, rows j = 1..terms."""
    j = np.arange(1, terms + 1)[:, None]
    out = math.sqrt(2.0) * np.cos(j * np.pi * u[None, :])
    out[0] = 1.0
    return out


def _sine_basis(u, terms):
    j = np.arange(1, terms + 1)[:, None]
    return math.sqrt(2.0) * np.sin((j - 0.5) * np.pi * u[None, :])


def _bm_time(spec: ProcessSpec):
    return spec.grid.nodes - spec.grid.lower + spec.params["start"]


def _covariance(spec: ProcessSpec):
    s = spec.grid.nodes
    u = s - spec.grid.lower
    P = spec.params
    if spec.kind == "BM":
        a = _bm_time(spec)
        return P["sd"] ** 2 * np.minimum.outer(a, a)
    d = np.abs(s[:, None] - s[None, :])
    if spec.kind == "GP":
        return P["variance"] * np.exp(-d / P["range"])
    # stationary OU: dX = -theta X dt + sigma dW has covariance sd^2 exp(-theta |h|)
    return P["sd"] ** 2 * np.exp(-P["drift"] * d)


def _jittered_cholesky(C):
    m = C.shape[0]
    jitter = 1e-10 * np.trace(C) / m
    for _ in range(9):
        try:
            return np.linalg.cholesky(C + jitter * np.eye(m))
        except np.linalg.LinAlgError:
            jitter *= 2
    raise np.linalg.LinAlgError("covariance is not positive semi-definite even after jitter")


def _rows_times(A, B):
    # einsum's own loop sums each entry in a fixed order, so row i of the
    # product does not depend on how many rows A has (BLAS blocking does)
    return np.einsum("ij,jk->ik", A, B)


def simulate(spec: ProcessSpec, n: int, rng: np.random.Generator) -> FunctionalSample:
    """Draw ``n`` independent paths of ``spec`` on its grid.

    Draws are taken row by row, so the first ``k`` paths of a sample of size
    ``n > k`` coincide with a sample of size ``k`` from the same generator state.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    g = spec.grid
    u = g.nodes - g.lower
    P = spec.params
    if spec.kind == "CM":
        j = np.arange(1, P["terms"] + 1)
        lam = 1.0 / (np.pi**2 * (j - 0.5) ** 2)
        eps = rng.standard_normal((n, P["terms"])) * P["sd"]
        return FunctionalSample(g, _rows_times(eps * lam, _sine_basis(u, P["terms"])))
    if spec.kind == "IK_X":
        j = np.arange(1, P["terms"] + 1)
        U = rng.uniform(-P["half_width"], P["half_width"], (n, P["terms"]))
        return FunctionalSample(g, _rows_times(U * j ** -1.75, _cos_basis(u, P["terms"])))
    if spec.kind == "IK_E":
        j = np.arange(1, P["terms"] + 1)
        eps = rng.standard_normal((n, P["terms"])) * P["sd"]
        return FunctionalSample(g, _rows_times(eps * j ** -0.8, _cos_basis(u, P["terms"])))
    C = _covariance(spec)
    if spec.kind == "BM":
        # a zero-variance first node is pinned exactly
        pinned = spec.params["start"] == 0
        L = _jittered_cholesky(C[1:, 1:]) if pinned else _jittered_cholesky(C)
        Z = rng.standard_normal((n, L.shape[0]))
        vals = _rows_times(Z, L.T)
        if pinned:
            vals = np.hstack([np.zeros((n, 1)), vals])
        return FunctionalSample(g, vals)
    L = _jittered_cholesky(C)
    return FunctionalSample(g, _rows_times(rng.standard_normal((n, g.m)), L.T))


def _s3_coefficients(terms=SERIES_TERMS):
    j = np.arange(1, terms + 1)
    b = np.zeros((terms, terms))
    jj, kk = np.meshgrid(j, j, indexing="ij")
    mask = (jj > 4) & (kk > 4)
    sign = np.where((jj + kk) % 2 == 0, 1.0, -1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = 6.0 * sign * (jj - 4.0) ** (-12 / 5) * (kk - 4.0) ** (-1 / 4)
    b[mask] = vals[mask]
    return b


def kernel_surface(sc: ScenarioSpec) -> np.ndarray:
    """Kernel of the scenario on ``grid_x x grid_y`` (s rows, t columns)."""
    gx, gy = sc.grid_x, sc.grid_y
    s = gx.nodes - gx.lower
    t = gy.nodes - gy.lower
    if sc.id == "S1":
        return s[:, None] ** 2 + t[None, :] ** 2
    if sc.id == "S2":
        return 2.0 * (np.sin(6 * np.pi * s)[:, None] + np.cos(6 * np.pi * t)[None, :])
    b = _s3_coefficients()
    return _cos_basis(s, SERIES_TERMS).T @ b @ _cos_basis(t, SERIES_TERMS)


def apply_linear(X: FunctionalSample, surface, grid_y: Grid) -> FunctionalSample:
    """``Y_i(t) = int beta(s, t) X_i(s) ds`` by quadrature in ``s``."""
    surface = np.asarray(surface, dtype=float)
    if surface.shape != (X.grid.m, grid_y.m):
        raise ValueError(f"surface is {surface.shape}, expected {(X.grid.m, grid_y.m)}")
    return FunctionalSample(grid_y, _rows_times(X.values * X.grid.weights, surface))


@dataclass(frozen=True)
class DeviationSpec:
    family: str
    intensity: float = 0.0
    concurrent: int | None = None

    def __post_init__(self):
        fam = self.family.upper()
        if fam not in ("NE", "FR", "C", "NLQ", "NLT"):
            raise ValueError(f"unknown deviation family {self.family!r}")
        if self.intensity < 0:
            raise ValueError("intensity must be nonnegative")
        object.__setattr__(self, "family", fam)


def concurrent_function(j: int, t, a: float = 0.0):
    t = np.asarray(t, dtype=float)
    if j == 1:
        return np.sqrt(np.abs(np.sin(np.pi * t) - np.cos(np.pi * t)))
    if j == 2:
        return np.log(t - a + 0.5)
    if j == 3:
        return (t - 0.5) ** 3
    raise ValueError(f"concurrent function index must be 1, 2 or 3, got {j}")


def apply_deviation(X: FunctionalSample, dev: DeviationSpec, sc: ScenarioSpec) -> FunctionalSample:
    """The ``delta``-scaled deviation term on ``grid_y``.

    ``FR`` returns ``delta <<X, beta>>``; ``C`` the concurrent term
    ``delta beta_j(t) X(t)`` (needs the same nodes on both grids); ``NLQ``
    ``delta (X(a + (t - c)(b - a)/(d - c))^2 - 1)``; ``NLT``
    ``delta (sin 2 pi t - cos 2 pi t) ||X||^2``.
    """
    gx, gy = sc.grid_x, sc.grid_y
    d = dev.intensity
    t = gy.nodes
    if d == 0 or dev.family == "NE":
        return FunctionalSample(gy, np.zeros((X.n, gy.m)))
    if dev.family == "FR":
        return FunctionalSample(gy, d * apply_linear(X, kernel_surface(sc), gy).values)
    if dev.family == "C":
        if gx.m != gy.m or not np.allclose(gx.nodes, gy.nodes):
            raise ValueError("the concurrent deviation needs identical covariate and response grids")
        j = dev.concurrent or int(sc.id[1])
        return FunctionalSample(gy, d * concurrent_function(j, t, gx.lower)[None, :] * X.values)
    if dev.family == "NLQ":
        a, b = gx.lower, gx.upper
        c, dd = gy.lower, gy.upper
        s = a + (t - c) * (b - a) / (dd - c)
        Xs = np.stack([np.interp(s, gx.nodes, row) for row in X.values])
        return FunctionalSample(gy, d * (Xs**2 - 1.0))
    shape = np.sin(2 * np.pi * t) - np.cos(2 * np.pi * t)
    return FunctionalSample(gy, d * np.outer(X.norms() ** 2, shape))


# (delta_1, delta_2, delta_3) per study, family and scenario
INTENSITIES = {
    "simple": {
        "FR": {"S1": (0.035, 0.08, 0.15), "S2": (0.01, 0.02, 0.03), "S3": (1.0, 1.3, 1.6)},
        "C": {"S1": (0.025, 0.05, 0.15), "S2": (0.2, 0.6, 1.0), "S3": (0.01, 0.025, 0.05)},
        "NLQ": {"S1": (0.025, 0.075, 0.15), "S2": (0.02, 0.04, 0.1), "S3": (0.2, 0.35, 0.55)},
        "NLT": {"S1": (0.025, 0.075, 0.15), "S2": (0.02, 0.04, 0.1), "S3": (0.2, 0.35, 0.55)},
    },
    "composite": {
        "NLQ": {"S1": (0.02, 0.04, 0.1), "S2": (0.01, 0.02, 0.03), "S3": (0.02, 0.15, 0.5)},
        "NLT": {"S1": (0.03, 0.05, 0.1), "S2": (0.035, 0.045, 0.055), "S3": (0.025, 0.2, 0.45)},
    },
}


def hypothesis_model(name: str, sc: ScenarioSpec, study: str):
    """Linear weight and deviation for a hypothesis label.

    Labels are ``ne``, ``fr`` (composite null with weight 1/2) and
    ``fr1..3``, ``c1..3``, ``nlq1..3``, ``nlt1..3``. Returns
    ``(linear_weight, DeviationSpec)``: the response is
    ``linear_weight <<X, beta>> + deviation + E``.
    """
    label = name.lower()
    if study not in INTENSITIES:
        raise ValueError(f"unknown study {study!r}")
    if label == "ne":
        return 0.0, DeviationSpec("NE")
    if label == "fr" and study == "composite":
        return 0.5, DeviationSpec("NE")
    for prefix, fam in (("nlq", "NLQ"), ("nlt", "NLT"), ("fr", "FR"), ("c", "C")):
        if label.startswith(prefix) and label[len(prefix):] in ("1", "2", "3"):
            h = int(label[len(prefix):])
            table = INTENSITIES[study].get(fam)
            if table is None:
                break
            dev = DeviationSpec(fam, table[sc.id][h - 1])
            return (1.0 if study == "composite" else 0.0), dev
    raise ValueError(f"hypothesis {name!r} is not defined for the {study} study")


def generate(sc: ScenarioSpec, n: int, linear_weight: float, dev: DeviationSpec,
             seed: int, index: int):
    """Sample ``(X, Y)`` for replicate ``index``; ``Y = w <<X, beta>> + dev + E``."""
    X = simulate(sc.covariate, n, stream(seed, 10, index, 0))
    E = simulate(sc.error, n, stream(seed, 10, index, 1))
    vals = E.values.copy()
    if linear_weight:
        vals += linear_weight * apply_linear(X, kernel_surface(sc), sc.grid_y).values
    if dev.family != "NE" and dev.intensity:
        vals += apply_deviation(X, dev, sc).values
    return X, FunctionalSample(sc.grid_y, vals)


def _test_seed(seed, index):
    return int(np.random.SeedSequence(seed, spawn_key=(11, index)).generate_state(1, np.uint64)[0])


def _one_replicate(args):
    sc, label, n, study, cfg, seed, index = args
    try:
        w, dev = hypothesis_model(label, sc, study)
        X, Y = generate(sc, n, w, dev, seed, index)
        c = replace(cfg, seed=_test_seed(seed, index))
        if study == "simple":
            res = run_gof_simple(X, Y, np.zeros((sc.grid_x.m, sc.grid_y.m)), c)
        else:
            res = run_gof(X, Y, c)
        return res.p_value, res.p_tilde, res.q
    except Exception as exc:
        raise StudyError(index, f"{type(exc).__name__}: {exc}") from exc


def _single_thread_blas():
    # keeps worker results identical to the serial run
    global _BLAS_LIMIT
    _BLAS_LIMIT = threadpool_limits(1)


def _map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers, initializer=_single_thread_blas) as pool:
            return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [fn(j) for j in jobs]


def estimator_label(cfg: GofConfig, study: str) -> str:
    if study == "simple":
        return "fpcr"
    spec = cfg.estimator
    if spec.kind is Kind.FPCR:
        return "fpcr"
    return f"{spec.kind.value}-{spec.policy}"


def run_study(sc: ScenarioSpec, hypotheses, n_list, B: int, M: int, cfg: GofConfig | None = None,
              seed: int = 0, study: str = "composite", level: float = 0.05, workers: int = 1):
    """Empirical rejection rates over ``M`` replicates for each hypothesis and ``n``.

    Replicate ``m`` draws its data from substreams of ``(seed, m)``, so the
    same covariate and error curves are reused across hypotheses (common
    random numbers) and across sample sizes (prefix consistency).

    Returns ``(table, long)``: ``table`` has one row per (hypothesis, n) with
    ``rejection_rate`` and ``mc_se``; ``long`` has one row per replicate.
    """
    if M < 1:
        raise ValueError("M must be positive")
    cfg = GofConfig(B=B) if cfg is None else replace(cfg, B=B)
    if study == "simple":
        cfg = replace(cfg, estimator=EstimatorSpec(Kind.FPCR))
    label_est = estimator_label(cfg, study)
    table, long = [], []
    for label in hypotheses:
        hypothesis_model(label, sc, study)
        for n in n_list:
            jobs = [(sc, label, int(n), study, cfg, seed, m) for m in range(M)]
            out = _map(_one_replicate, jobs, workers)
            pv = np.array([o[0] for o in out])
            rej = pv <= level
            rate = float(rej.mean())
            table.append({
                "scenario": sc.id, "hypothesis": label, "n": int(n), "estimator": label_est,
                "rejection_rate": rate, "mc_se": math.sqrt(rate * (1 - rate) / M), "M": M, "B": B,
            })
            for m, (p, pt, q) in enumerate(out):
                long.append({"scenario": sc.id, "hypothesis": label, "n": int(n),
                             "estimator": label_est, "replicate": m, "p_value": p,
                             "rejected": int(p <= level), "p_tilde": pt, "q": q})
    return table, long


def _l2_error(beta, beta_hat, gx: Grid, gy: Grid):
    d = beta - beta_hat
    return math.sqrt(float(gx.weights @ (d * d) @ gy.weights))


def _estimate_once(args):
    sc, n, p, q, kind, policy, seed, index = args
    try:
        X, Y = generate(sc, n, 1.0, DeviationSpec("NE"), seed, index)
        Xc, mx = center(X)
        Yc, my = center(Y)
        bx, sx = fpc(Xc, mean=mx)
        by, sy = fpc(Yc, mean=my)
        Xs, Ys = sx.scores[:, :p], sy.scores[:, :q]
        kind = Kind(kind)
        if kind is Kind.FPCR:
            f = fit_fpcr(Xs, Ys)
        else:
            spec = EstimatorSpec(kind, policy)
            lam = select_lambda(Xs, Ys, spec, rng=stream(seed, 12, index)).chosen(policy)
            f = {Kind.RIDGE: lambda: fit_ridge(Xs, Ys, lam),
                 Kind.LASSO: lambda: fit_lasso(Xs, Ys, lam),
                 Kind.L1S: lambda: fit_l1s(Xs, Ys, lam)}[kind]()
        bh = beta_surface(f, bx.truncated(p), by.truncated(q))
        return _l2_error(kernel_surface(sc), bh, sc.grid_x, sc.grid_y), f.p_tilde
    except Exception as exc:
        raise StudyError(index, f"{type(exc).__name__}: {exc}") from exc


def run_estimation_study(sc: ScenarioSpec, kinds, p: int, q: int, n: int, M: int,
                         seed: int = 0, policy: str = "cv", workers: int = 1):
    """Mean L2 error ``||beta - beta_hat||`` and selected rows over ``M`` replicates.

    ``p`` and ``q`` are fixed truncations; penalised estimators use the
    cross-validated penalty of ``policy``.
    """
    rows = []
    for kind in kinds:
        jobs = [(sc, n, p, q, Kind(kind).value, policy, seed, m) for m in range(M)]
        out = _map(_estimate_once, jobs, workers)
        err = np.array([o[0] for o in out])
        pt = np.array([o[1] for o in out], dtype=float)
        rows.append({
            "scenario": sc.id, "estimator": Kind(kind).value, "p": p, "q": q, "n": n, "M": M,
            "mean_error": float(err.mean()),
            "mc_se": float(err.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0,
            "mean_p_tilde": float(pt.mean()),
            "sd_p_tilde": float(pt.std(ddof=1)) if M > 1 else 0.0,
        })
    return rows
