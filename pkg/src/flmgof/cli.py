"""Command-line interface: ``flmgof test | estimate | simulate | verify``.

Reports are ``key=value`` lines. Every output ends with (or, for CSV files,
starts with) ``manifest.*`` entries recording the command, configuration,
seed, library version, input digests and wall time. Exit codes: 0 success,
1 failed verification, 2 input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import secrets
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, oracle, pcvm
from .fdata import (
    CsvFormatError,
    GridMismatchError,
    center,
    fpc,
    read_curves,
    read_surface,
    truncate_by_ev,
    write_surface,
)
from .gof import GofConfig, GofError, Simple, run_gof, stream
from .regfit import EstimatorSpec, Kind, beta_surface, fit, select_lambda
from .simgen import run_estimation_study, run_study, scenario

THREADS_ENV = "FLMGOF_THREADS"

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_INPUT = 2


class InputError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def lines(self) -> list[str]:
        out = [
            f"manifest.command={self.command}",
            f"manifest.config={json.dumps(self.config, sort_keys=True)}",
            f"manifest.seed={self.seed}",
            f"manifest.version={self.version}",
            f"manifest.inputs={json.dumps(self.inputs, sort_keys=True)}",
            f"manifest.wall_time={self.wall_time:.3f}",
        ]
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def fmt(x) -> str:
    """Numbers at 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _seed(args, err):
    if args.seed is None:
        seed = secrets.randbits(63)
        print(f"seed={seed} (drawn; pass --seed {seed} to reproduce)", file=err)
        return seed
    if not 0 <= args.seed < 2**64:
        raise InputError("--seed must be a 64-bit unsigned integer")
    return args.seed


def _read(path, lower=None, upper=None):
    if not os.path.exists(path):
        raise InputError(f"no such file: {path}")
    try:
        return read_curves(path, lower, upper)
    except CsvFormatError as exc:
        raise InputError(str(exc)) from None


def _range(text, flag):
    if text is None:
        return None, None
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"{flag} expects 'lower,upper', got {text!r}") from None
    return a, b


def _estimator(args) -> EstimatorSpec:
    kind = Kind(args.estimator)
    lam = args.lam.lower()
    if kind is Kind.FPCR:
        return EstimatorSpec(kind, "fixed", lam=0.0)
    if lam in ("1se", "cv"):
        return EstimatorSpec(kind, lam)
    try:
        value = float(lam)
    except ValueError:
        raise InputError(f"--lambda must be 1se, cv or a number, got {args.lam!r}") from None
    if not value >= 0:
        raise InputError("--lambda must be nonnegative")
    return EstimatorSpec(kind, "fixed", lam=value)


def _emit(out, pairs, manifest: RunManifest):
    for k, v in pairs:
        print(f"{k}={v}", file=out)
    for line in manifest.lines():
        print(line, file=out)


def _write_csv(path, header, rows, manifest: RunManifest):
    with open(path, "w", newline="") as fh:
        for line in manifest.lines():
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(r[h]) if h in r else "" for h in header])


def _common_inputs(args):
    xr = _range(args.x_range, "--x-range")
    yr = _range(args.y_range, "--y-range")
    X = _read(args.x, *xr)
    Y = _read(args.y, *yr)
    if X.n != Y.n:
        raise InputError(f"{args.x} has {X.n} curves but {args.y} has {Y.n}")
    return X, Y, {args.x: _digest(args.x), args.y: _digest(args.y)}


def cmd_test(args, out=sys.stdout, err=sys.stderr) -> int:
    t0 = time.perf_counter()
    seed = _seed(args, err)
    X, Y, digests = _common_inputs(args)
    spec = _estimator(args)
    hypothesis = "composite"
    if args.beta0 is not None:
        if args.beta0 == "zero":
            hypothesis = Simple.no_effects(X.grid.m, Y.grid.m)
        else:
            if not os.path.exists(args.beta0):
                raise InputError(f"no such file: {args.beta0}")
            try:
                s, t, vals = read_surface(args.beta0)
            except CsvFormatError as exc:
                raise InputError(str(exc)) from None
            if not (np.allclose(s, X.grid.nodes) and np.allclose(t, Y.grid.nodes)):
                raise InputError(f"{args.beta0} is not on the covariate x response grid")
            hypothesis = Simple(vals)
            digests[args.beta0] = _digest(args.beta0)
    ev_x = args.ev if args.ev_x is None else args.ev_x
    ev_y = args.ev if args.ev_y is None else args.ev_y
    cfg = GofConfig(ev_x=ev_x, ev_y=ev_y, B=args.B, estimator=spec, seed=seed,
                    hypothesis=hypothesis, threads=args.threads)
    try:
        res = run_gof(X, Y, cfg)
    except (GofError, GridMismatchError, ValueError) as exc:
        raise InputError(str(exc)) from None
    manifest = RunManifest("test", _config(args), seed, inputs=digests,
                           wall_time=time.perf_counter() - t0)
    pairs = [
        ("hypothesis", "composite" if hypothesis == "composite" else "simple"),
        ("estimator", spec.kind.value if hypothesis == "composite" else "none"),
        ("statistic", fmt(res.statistic.value)),
        ("p_value", fmt(res.p_value)),
        ("p", res.p),
        ("p_tilde", res.p_tilde),
        ("q", res.q),
        ("lambda", fmt(res.lam)),
        ("selected", ",".join(str(int(i) + 1) for i in res.selected)),
        ("cum_ev_x", fmt(res.cum_ev_x)),
        ("cum_ev_y", fmt(res.cum_ev_y)),
        ("B", args.B),
        ("n", X.n),
    ]
    _emit(out, pairs, manifest)
    if args.boot_out:
        rows = [{"replicate": b + 1, "statistic": v} for b, v in enumerate(res.boot_stats)]
        _write_csv(args.boot_out, ["replicate", "statistic"], rows, manifest)
    return EXIT_OK


def cmd_estimate(args, out=sys.stdout, err=sys.stderr) -> int:
    t0 = time.perf_counter()
    seed = _seed(args, err)
    X, Y, digests = _common_inputs(args)
    spec = _estimator(args)
    Xc, mx = center(X)
    Yc, my = center(Y)
    bx, sx = fpc(Xc, mean=mx)
    by, sy = fpc(Yc, mean=my)
    p = args.p or truncate_by_ev(bx, args.ev)
    q = args.q or truncate_by_ev(by, args.ev)
    if p > bx.k or q > by.k:
        raise InputError(f"requested p={p}, q={q} but only {bx.k} and {by.k} components exist")
    Xs, Ys = sx.scores[:, :p], sy.scores[:, :q]
    lam_cv = lam_1se = float("nan")
    try:
        if spec.kind is not Kind.FPCR:
            cv = select_lambda(Xs, Ys, spec, rng=stream(seed, 0))
            lam_cv, lam_1se = cv.lam_cv, cv.lam_1se
        lam = {"fixed": spec.lam, "cv": lam_cv, "1se": lam_1se}[spec.policy]
        f = fit(Xs, Ys, spec.kind, lam)
    except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
        raise InputError(f"{spec.kind.value} fit failed: {exc}") from None
    surface = beta_surface(f, bx.truncated(p), by.truncated(q))
    manifest = RunManifest("estimate", _config(args), seed, inputs=digests,
                           wall_time=time.perf_counter() - t0)
    pairs = [
        ("estimator", spec.kind.value),
        ("p", p),
        ("q", q),
        ("p_tilde", f.p_tilde),
        ("selected", ",".join(str(int(i) + 1) for i in f.selected)),
        ("lambda", fmt(lam)),
        ("lambda_cv", fmt(lam_cv)),
        ("lambda_1se", fmt(lam_1se)),
    ]
    _emit(out, pairs, manifest)
    if args.out:
        write_surface(args.out, X.grid.nodes, Y.grid.nodes, surface, manifest.lines())
    if args.coef_out:
        header = [f"phi{k + 1}" for k in range(q)]
        rows = [dict(zip(header, row)) for row in f.B]
        _write_csv(args.coef_out, header, rows, manifest)
    return EXIT_OK


HYPOTHESES = {"ne", "fr"} | {f"{f}{h}" for f in ("fr", "c", "nlq", "nlt") for h in (1, 2, 3)}


def _int_list(text, flag):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"{flag} expects comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise InputError(f"{flag} values must be positive")
    return vals


def cmd_simulate(args, out=sys.stdout, err=sys.stderr) -> int:
    t0 = time.perf_counter()
    seed = _seed(args, err)
    if args.scenario.upper() not in ("S1", "S2", "S3"):
        raise InputError(f"unknown scenario {args.scenario!r}; use s1, s2 or s3")
    n_list = _int_list(args.n, "--n")
    workers = args.threads
    if args.study == "estimation":
        sc = scenario(args.scenario, (2.0, 3.0))
        kinds = [k.strip() for k in args.estimator.split(",")]
        for k in kinds:
            if k not in {m.value for m in Kind}:
                raise InputError(f"unknown estimator {k!r}")
        policy = args.lam if args.lam in ("cv", "1se") else "cv"
        table = []
        for n in n_list:
            table += run_estimation_study(sc, kinds, args.p, args.q, n, args.M, seed=seed,
                                          policy=policy, workers=workers)
        for r in table:
            r["hypothesis"] = "linear"
        header = ["scenario", "hypothesis", "n", "estimator", "p", "q", "mean_error", "mc_se",
                  "mean_p_tilde", "sd_p_tilde", "M"]
        long = []
    else:
        hyps = [h.strip().lower() for h in args.hypothesis.split(",") if h.strip()]
        bad = [h for h in hyps if h not in HYPOTHESES]
        if bad or not hyps:
            raise InputError(f"unknown hypothesis {bad or args.hypothesis!r}")
        y_interval = (0.0, 1.0) if args.study == "simple" else (2.0, 3.0)
        sc = scenario(args.scenario, y_interval)
        cfg = GofConfig(ev_x=args.ev, ev_y=args.ev, B=args.B, estimator=_estimator(args))
        try:
            table, long = run_study(sc, hyps, n_list, args.B, args.M, cfg, seed=seed,
                                    study=args.study, level=args.level, workers=workers)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        header = ["scenario", "hypothesis", "n", "estimator", "rejection_rate", "mc_se", "M", "B"]
    manifest = RunManifest("simulate", _config(args), seed, wall_time=time.perf_counter() - t0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in table:
        w.writerow([fmt(r[h]) for h in header])
    if args.out:
        _write_csv(args.out, header, table, manifest)
    if args.long_out and long:
        _write_csv(args.long_out, list(long[0]), long, manifest)
    if args.wide_out and args.study != "estimation":
        _write_wide(args.wide_out, table, n_list, manifest)
    out.write(buf.getvalue())
    for line in manifest.lines():
        print(line, file=out)
    return EXIT_OK


def _write_wide(path, table, n_list, manifest):
    # hypotheses as rows, sample sizes as columns
    rows = {}
    for r in table:
        rows.setdefault(r["hypothesis"], {"hypothesis": r["hypothesis"]})[f"n={r['n']}"] = r["rejection_rate"]
    header = ["hypothesis"] + [f"n={n}" for n in n_list]
    _write_csv(path, header, list(rows.values()), manifest)


def verify_suite(draws: int, instances: int, seed: int):
    """Oracle band checks as ``(name, passed, detail)`` records."""
    rng = np.random.default_rng(seed)
    records = []

    def add(name, ok, **detail):
        records.append({"check": name, "passed": bool(ok), **detail})

    # the analytic wedge cases are exact
    for p in (1, 2, 3):
        z = np.zeros(p)
        e = np.eye(p)[0]
        exact = [
            ("coincident", (z, z, z), 2 * math.pi),
            ("one_tie", (z, e, z), math.pi),
            ("opposite", (e, -e, z), 0.0),
            ("equal", (e, e, z), math.pi),
        ]
        for label, (xi, xj, xr), want in exact:
            got = pcvm.wedge_angle(xi, xj, xr)
            add(f"wedge_exact_{label}_p{p}", abs(got - want) <= 1e-12, value=got, expected=want)
    hits = 0
    for k in range(instances):
        p = (1, 2, 3, 5)[k % 4]
        xi, xj, xr = rng.normal(size=(3, p))
        est = oracle.mc_wedge_area(xi, xj, xr, max(draws, 10_000), rng)
        area = pcvm.wedge_angle(xi, xj, xr) * math.pi ** (p / 2 - 1) / math.gamma(p / 2)
        hits += est.agrees(area)
    add("wedge_mc", hits >= math.ceil(0.9 * instances) - (instances < 10), hits=hits, total=instances)
    hits = 0
    total = 0
    for q in (1, 2, 3, 4):
        for _ in range(max(1, instances // 4)):
            x, y = rng.normal(size=(2, q))
            est = oracle.mc_lemma3(x, y, max(draws, 100_000), rng)
            hits += est.agrees(pcvm.lemma3_constant(q) * float(x @ y))
            total += 1
    add("lemma3_mc", hits >= math.ceil(0.9 * total) - (total < 10), hits=hits, total=total)
    one = oracle.mc_pcvm(np.ones((1, 1)) * math.e, np.zeros((1, 1)), 4, rng)
    add("pcvm_exhaustive_n1", abs(one.estimate - 4 * math.e**2) <= 1e-12, value=one.estimate,
        expected=4 * math.e**2)
    closed = pcvm.pcvm_statistic(np.ones((1, 1)) * math.e, pcvm.adot(np.zeros((1, 1)))).value
    add("pcvm_closed_n1", abs(closed - 4 * math.e**2) <= 1e-12, value=closed, expected=4 * math.e**2)
    hits = 0
    for k in range(instances):
        n = int(rng.integers(2, 11))
        p, q = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        X = rng.normal(size=(n, p))
        E = rng.normal(size=(n, q))
        est = oracle.mc_pcvm(E, X, max(draws // 10, 1000), rng)
        hits += est.agrees(pcvm.pcvm_statistic(E, pcvm.adot(X)).value)
    add("pcvm_mc", hits >= math.ceil(0.9 * instances) - (instances < 10), hits=hits, total=instances)
    return records


def cmd_verify(args, out=sys.stdout, err=sys.stderr) -> int:
    t0 = time.perf_counter()
    seed = _seed(args, err)
    if args.draws < 1000 or args.instances < 1:
        raise InputError("--draws must be at least 1000 and --instances positive")
    records = verify_suite(args.draws, args.instances, seed)
    manifest = RunManifest("verify", _config(args), seed, wall_time=time.perf_counter() - t0)
    for r in records:
        extra = " ".join(f"{k}={fmt(v)}" for k, v in r.items() if k not in ("check", "passed"))
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']} {extra}".rstrip(), file=out)
    if args.jsonl:
        with open(args.jsonl, "w") as fh:
            for r in records:
                fh.write(json.dumps({k: (float(v) if isinstance(v, np.floating) else v)
                                     for k, v in r.items()}) + "\n")
            fh.write(json.dumps({"manifest": manifest.to_dict()}) + "\n")
    for line in manifest.lines():
        print(line, file=out)
    return EXIT_OK if all(r["passed"] for r in records) else EXIT_VERIFY


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _add_data_args(sp):
    sp.add_argument("--x", required=True, help="covariate curves CSV")
    sp.add_argument("--y", required=True, help="response curves CSV")
    sp.add_argument("--x-range", help="covariate interval 'a,b' (default: header end nodes)")
    sp.add_argument("--y-range", help="response interval 'c,d' (default: header end nodes)")
    sp.add_argument("--ev", type=float, default=0.99, help="explained variance target")


def _add_estimator_args(sp, default="l1s"):
    sp.add_argument("--estimator", default=default,
                    help="fpcr, ridge, lasso or l1s")
    sp.add_argument("--lambda", dest="lam", default="1se", help="1se, cv or a fixed value")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flmgof", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="goodness-of-fit test on CSV curves")
    _add_data_args(t)
    _add_estimator_args(t)
    t.add_argument("--ev-x", type=float, help="explained variance target for X (overrides --ev)")
    t.add_argument("--ev-y", type=float, help="explained variance target for Y (overrides --ev)")
    t.add_argument("--B", type=int, default=10_000, help="bootstrap replicates")
    t.add_argument("--beta0", help="'zero' or a kernel CSV for the simple hypothesis")
    t.add_argument("--boot-out", help="write bootstrap statistics to this CSV")
    t.set_defaults(func=cmd_test)

    e = sub.add_parser("estimate", help="fit the kernel and export it")
    _add_data_args(e)
    _add_estimator_args(e)
    e.add_argument("--p", type=int, help="fixed covariate truncation")
    e.add_argument("--q", type=int, help="fixed response truncation")
    e.add_argument("--out", help="kernel surface CSV")
    e.add_argument("--coef-out", help="coefficient matrix CSV")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="Monte Carlo rejection or estimation study")
    s.add_argument("--scenario", default="s1")
    s.add_argument("--study", choices=("composite", "simple", "estimation"), default="composite")
    s.add_argument("--hypothesis", default="ne", help="comma list of ne, fr, fr1..3, c1..3, nlq1..3, nlt1..3")
    s.add_argument("--n", default="50", help="comma list of sample sizes")
    s.add_argument("--M", type=int, default=500, help="Monte Carlo replicates")
    s.add_argument("--B", type=int, default=500, help="bootstrap replicates")
    s.add_argument("--ev", type=float, default=0.99)
    s.add_argument("--p", type=int, default=2, help="covariate truncation (estimation study)")
    s.add_argument("--q", type=int, default=1, help="response truncation (estimation study)")
    s.add_argument("--level", type=float, default=0.05, help="significance level")
    _add_estimator_args(s)
    s.add_argument("--out", help="table CSV")
    s.add_argument("--wide-out", help="hypothesis x n table CSV")
    s.add_argument("--long-out", help="per-replicate long-format CSV")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="check the closed forms against Monte Carlo oracles")
    v.add_argument("--draws", type=int, default=200_000)
    v.add_argument("--instances", type=int, default=8)
    v.add_argument("--jsonl", help="write a JSON-lines report")
    v.set_defaults(func=cmd_verify)

    for sp in (t, e, s, v):
        sp.add_argument("--seed", type=int, help="root seed (drawn and printed when absent)")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"parallelism cap (default ${THREADS_ENV} or all cores)")
    return ap


def main(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        if args.threads is None:
            args.threads = default_threads()
        if args.threads < 1:
            raise InputError("--threads must be positive")
        # single-threaded BLAS keeps results independent of --threads
        with threadpool_limits(1):
            return args.func(args, out, err)
    except InputError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
