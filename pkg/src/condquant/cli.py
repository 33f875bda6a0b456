"""Command-line interface.

Subcommands
-----------
calibrate     fit a conformal engine on a CSV and freeze it to a model file
predict       intervals from a frozen model at new covariates
evaluate      Monte-Carlo coverage/width grid over distributions x scores
sharpness     knife-edge experiment: coverage cannot leave its nominal band
overcoverage  randomized-regressor floor experiment with finite intervals
audit         predictive and one-sided rate checks against their floors
sample        draw a synthetic dataset to CSV
median1d      order-statistic median interval for a plain sample

Exit codes: 0 success, 2 configuration error, 3 data error,
4 an experiment or audit landed outside its documented threshold.

Every run prints its resolved configuration as '# key=value' lines, and
result files embed the same echo.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys

import numpy as np

from . import __version__
from .conformal import ConformalMedian, ConformalQuantile, thaw, unconditional_median_interval
from .distributions import DISTRIBUTIONS, make_distribution
from .evaluation import (
    DESK_SCALE,
    DEFAULT_SEED,
    PAPER_SCALE,
    TrialConfig,
    overcoverage_experiment,
    predictive_audit,
    quantile_audit,
    run_trials,
    sharpness_experiment,
    write_metrics,
    write_reports,
)
from .scores import SCORES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_THRESHOLD = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ----------------------------------------------------------------- helpers


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def _echo(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _print_echo(echo: dict, stream=None):
    stream = stream or sys.stdout
    for key, value in echo.items():
        stream.write(f"# {key}={_fmt(value)}\n")


def _load_table(path, response=None):
    """Read a CSV with a header row; returns (X, y, feature_names).

    ``response`` names the response column; None means all columns are
    features.  Non-numeric or non-finite entries are data errors reported
    with their row and column.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if response is not None and response not in header:
            raise DataError(
                f"{path}: header {header} has no response column {response!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            values = []
            for name, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {lineno}, column {name!r}: "
                        f"cannot parse {cell.strip()!r} as a number") from None
                if not math.isfinite(v):
                    raise DataError(
                        f"{path}: row {lineno}, column {name!r}: non-finite value")
                values.append(v)
            rows.append(values)
        if not rows:
            raise DataError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=float)
    if response is None:
        return table, None, header
    j = header.index(response)
    X = np.delete(table, j, axis=1)
    if X.shape[1] == 0:
        raise DataError(f"{path}: no feature columns besides the response")
    names = [h for h in header if h != response]
    return X, table[:, j], names


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", encoding="utf-8"), True


def _split_list(values):
    out = []
    for chunk in values:
        out.extend(p for p in chunk.split(",") if p)
    return out


# ---------------------------------------------------------------- commands


def _build_engine_from_args(args):
    common = dict(score=args.score, backend=args.backend, n1=args.n1,
                  gamma=args.gamma, c=args.c, knn_k=args.knn_k,
                  random_state=args.seed)
    try:
        if args.engine == "median":
            return ConformalMedian(alpha=args.alpha, **common)
        return ConformalQuantile(q=args.q, alpha=args.alpha, r=args.r, s=args.s,
                                 **common)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_calibrate(args):
    echo = _echo(args, ["engine", "score", "backend", "alpha", "q", "r", "s",
                        "gamma", "c", "knn_k", "n1", "seed", "data", "response"])
    _print_echo(echo)
    X, y, _ = _load_table(args.data, response=args.response)
    engine = _build_engine_from_args(args)
    try:
        engine.fit(X, y)
    except (ValueError, TypeError) as exc:
        raise DataError(str(exc)) from exc
    artifact = engine.freeze()
    artifact["config"] = {k: v for k, v in echo.items()}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(artifact, fh)
        fh.write("\n")
    if args.engine == "median":
        print(f"calibrated: n1={engine.n1_} n2={engine.n2_} "
              f"half_width={_fmt(engine.half_width_)}")
    else:
        print(f"calibrated: n1={engine.n1_} n2={engine.n2_} "
              f"threshold_lo={_fmt(engine.threshold_lo_)} "
              f"threshold_hi={_fmt(engine.threshold_hi_)}")
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_predict(args):
    if (args.data is None) == (not args.x):
        raise ConfigError("provide covariates via exactly one of --data or --x")
    try:
        with open(args.model, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {args.model}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.model}: not valid JSON ({exc})") from exc
    try:
        model = thaw(payload)
    except ValueError as exc:
        raise DataError(f"{args.model}: {exc}") from exc

    if args.x:
        rows = []
        for spec in args.x:
            try:
                rows.append([float(v) for v in spec.split(",")])
            except ValueError:
                raise ConfigError(f"--x value {spec!r} is not a comma-separated "
                                  "list of numbers") from None
        X = np.asarray(rows, dtype=float)
        if not np.isfinite(X).all():
            raise ConfigError("--x values must be finite")
    else:
        X, _, _ = _load_table(args.data, response=None)

    try:
        intervals = model.predict_interval(X)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    out, close = _open_out(args.out)
    try:
        if args.format == "csv":
            out.write("lo,hi,empty\n")
            for iv in intervals:
                out.write(f"{_fmt(iv.lo)},{_fmt(iv.hi)},{int(iv.is_empty)}\n")
        else:
            rows = [{"lo": None if iv.is_empty else _json_float(iv.lo),
                     "hi": None if iv.is_empty else _json_float(iv.hi),
                     "empty": iv.is_empty} for iv in intervals]
            json.dump({"intervals": rows}, out, indent=2)
            out.write("\n")
    finally:
        if close:
            out.close()
    return EXIT_OK


def _json_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def cmd_evaluate(args):
    scale = PAPER_SCALE if args.paper_scale else DESK_SCALE
    n = args.n if args.n is not None else scale["n"]
    trials = args.trials if args.trials is not None else scale["trials"]
    test_n = args.test_n if args.test_n is not None else scale["test_n"]
    probes = args.probes if args.probes is not None else scale["probes"]

    dists = _split_list(args.dist) if args.dist else ["p1", "p2", "p3"]
    scores = _split_list(args.score) if args.score else ["residual", "normalized",
                                                         "cqr", "cdf"]
    for d in dists:
        if d not in DISTRIBUTIONS:
            raise ConfigError(f"unknown distribution {d!r}; valid distributions: "
                              f"{sorted(DISTRIBUTIONS)}")
    for s in scores:
        if s not in SCORES:
            raise ConfigError(f"unknown score {s!r}; valid scores: {sorted(SCORES)}")

    echo = {"engine": args.engine, "dists": ",".join(dists),
            "scores": ",".join(scores), "n": n, "alpha": args.alpha, "q": args.q,
            "trials": trials, "test_n": test_n, "probes": probes,
            "seed": args.seed, "jobs": args.jobs,
            "scale": "paper" if args.paper_scale else "desk"}
    if args.out is not None:
        _print_echo(echo)

    results = []
    for dist in dists:
        for score in (scores if args.engine != "band" else [scores[0]]):
            cfg = TrialConfig(dist=dist, score=score, engine=args.engine, n=n,
                              n1=args.n1, alpha=args.alpha, q=args.q, r=args.r,
                              s=args.s, backend=args.backend, gamma=args.gamma,
                              c=args.c, knn_k=args.knn_k, delta=args.delta,
                              trials=trials, test_n=test_n, probes=probes,
                              seed=args.seed)
            results.append(run_trials(cfg, jobs=args.jobs))

    out, close = _open_out(args.out)
    try:
        write_metrics(results, out, fmt=args.format, echo=echo)
    finally:
        if close:
            out.close()
    if args.reports:
        with open(args.reports, "w", encoding="utf-8") as fh:
            write_reports(results, fh)
    return EXIT_OK


def _report_outcome(outcome) -> int:
    for key, value in outcome.summary.items():
        if isinstance(value, dict):
            fields = " ".join(f"{k}={_fmt(v)}" for k, v in value.items())
            print(f"{outcome.name} [{key}]: {fields}")
        else:
            print(f"{outcome.name}: {key}={_fmt(value)}")
    print(f"{outcome.name}: {'PASS' if outcome.passed else 'FAIL'}")
    return EXIT_OK if outcome.passed else EXIT_THRESHOLD


def cmd_sharpness(args):
    echo = _echo(args, ["delta", "n", "alpha", "trials", "test_n", "seed", "jobs"])
    _print_echo(echo)
    outcome = sharpness_experiment(delta=args.delta, n=args.n, alpha=args.alpha,
                                   trials=args.trials, test_n=args.test_n,
                                   seed=args.seed, jobs=args.jobs)
    return _report_outcome(outcome)


def cmd_overcoverage(args):
    echo = _echo(args, ["dist", "c", "alpha", "n", "trials", "test_n", "seed", "jobs"])
    _print_echo(echo)
    code = EXIT_OK
    for dist in _split_list(args.dist or ["p1"]):
        outcome = overcoverage_experiment(dist=dist, c=args.c, alpha=args.alpha,
                                          n=args.n, trials=args.trials,
                                          test_n=args.test_n, seed=args.seed,
                                          jobs=args.jobs)
        code = max(code, _report_outcome(outcome))
    return code


def cmd_audit(args):
    echo = _echo(args, ["dist", "score", "q", "alpha", "r", "s", "n", "trials",
                        "test_n", "seed", "jobs"])
    _print_echo(echo)
    dists = tuple(_split_list(args.dist or ["p1,p2,p3"]))
    code = EXIT_OK
    if args.kind in ("predictive", "both"):
        outcome = predictive_audit(dists=dists, alpha=args.alpha, n=args.n,
                                   trials=args.trials, test_n=args.test_n,
                                   seed=args.seed, jobs=args.jobs)
        code = max(code, _report_outcome(outcome))
    if args.kind in ("quantile", "both"):
        outcome = quantile_audit(dists=dists, score=args.score, q=args.q,
                                 alpha=args.alpha, r=args.r, s=args.s, n=args.n,
                                 trials=args.trials, test_n=args.test_n,
                                 seed=args.seed, jobs=args.jobs)
        code = max(code, _report_outcome(outcome))
    return code


def cmd_sample(args):
    try:
        dist = make_distribution(args.dist, delta=args.delta, q=args.q)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rng = np.random.Generator(np.random.PCG64(args.seed))
    X, y = dist.sample(args.n, rng)
    out, close = _open_out(args.out)
    try:
        names = [f"x{j + 1}" for j in range(X.shape[1])]
        out.write(",".join(names + ["y"]) + "\n")
        for row, v in zip(X, y):
            out.write(",".join(_fmt(float(c)) for c in row) + f",{_fmt(float(v))}\n")
    finally:
        if close:
            out.close()
    return EXIT_OK


def cmd_median1d(args):
    if (args.data is None) == (args.values is None):
        raise ConfigError("provide the sample via exactly one of --data or --values")
    if args.values is not None:
        try:
            y = np.asarray([float(v) for v in args.values.split(",") if v], dtype=float)
        except ValueError:
            raise ConfigError(f"--values {args.values!r} is not a comma-separated "
                              "list of numbers") from None
        if y.size == 0:
            raise ConfigError("--values is empty")
        if not np.isfinite(y).all():
            raise ConfigError("--values must be finite")
    else:
        _, y, _ = _load_table(args.data, response=args.response)
    try:
        result = unconditional_median_interval(y, args.alpha)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(f"median interval: {result.interval}")
    print(f"order statistics: lower rank {result.lower_rank}, "
          f"upper rank {result.upper_rank}, n={result.n}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_model_flags(p, multi_score=False):
    if multi_score:
        p.add_argument("--score", action="append", default=None,
                       help=f"score id(s), comma-separable; one of {sorted(SCORES)}")
    else:
        p.add_argument("--score", default="residual", choices=sorted(SCORES),
                       help="conformity score (default: residual)")
    p.add_argument("--backend", default="forest", choices=["forest", "knn"],
                   help="regression backend for fitted scores")
    p.add_argument("--alpha", type=float, default=0.1, help="miscoverage budget")
    p.add_argument("--q", type=float, default=0.5, help="target quantile level")
    p.add_argument("--r", type=float, default=None,
                   help="lower miscoverage split (default alpha/2)")
    p.add_argument("--s", type=float, default=None,
                   help="upper miscoverage split (default alpha/2)")
    p.add_argument("--gamma", type=float, default=1e-6,
                   help="dispersion stabilizer of the normalized score")
    p.add_argument("--c", type=float, default=100.0,
                   help="scale multiplier of the randomized score")
    p.add_argument("--knn-k", dest="knn_k", type=int, default=50,
                   help="neighborhood size of the knn backend")
    p.add_argument("--n1", type=int, default=None,
                   help="training-half size (default: half the data)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="master seed")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="condquant",
        description="Distribution-free confidence intervals for conditional "
                    "medians and quantiles via split-conformal calibration.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit an engine on a CSV and freeze it")
    p.add_argument("--data", required=True, help="training CSV with a header row")
    p.add_argument("--response", default="y", help="response column name")
    p.add_argument("--engine", default="median", choices=["median", "quantile"])
    _add_model_flags(p)
    p.add_argument("--out", required=True, help="model file to write (JSON)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="intervals from a frozen model")
    p.add_argument("--model", required=True, help="model file from calibrate")
    p.add_argument("--data", default=None, help="CSV of covariates (header row)")
    p.add_argument("--x", action="append", default=[],
                   help="inline covariate row, comma-separated (repeatable)")
    p.add_argument("--out", default=None, help="output file (default stdout)")
    p.add_argument("--format", default="csv", choices=["csv", "json"])
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Monte-Carlo coverage/width grid")
    p.add_argument("--dist", action="append", default=None,
                   help=f"distribution id(s), comma-separable; one of "
                        f"{sorted(DISTRIBUTIONS)}")
    p.add_argument("--engine", default="quantile",
                   choices=["quantile", "median", "band"])
    p.add_argument("--delta", type=float, default=None,
                   help="knife-edge tilt for pdelta / pdelta-q")
    p.add_argument("--n", type=int, default=None, help="sample size per trial")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--test-n", dest="test_n", type=int, default=None)
    p.add_argument("--probes", type=int, default=None,
                   help="fixed probe points for worst-case coverage")
    p.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
    p.add_argument("--paper-scale", action="store_true",
                   help="full-size runs instead of desk scale")
    p.add_argument("--out", default=None, help="metrics file (default stdout)")
    p.add_argument("--format", default="csv", choices=["csv", "json"])
    p.add_argument("--reports", default=None, help="per-trial JSON-lines file")
    _add_model_flags(p, multi_score=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sharpness", help="knife-edge coverage band experiment")
    p.add_argument("--delta", type=float, default=0.0005)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--test-n", dest="test_n", type=int, default=200)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sharpness)

    p = sub.add_parser("overcoverage", help="randomized-regressor floor experiment")
    p.add_argument("--dist", action="append", default=None,
                   help="distribution id(s), comma-separable; default p1")
    p.add_argument("--c", type=float, default=100.0)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--test-n", dest="test_n", type=int, default=500)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_overcoverage)

    p = sub.add_parser("audit", help="predictive and one-sided rate floors")
    p.add_argument("--kind", default="both", choices=["predictive", "quantile", "both"])
    p.add_argument("--dist", action="append", default=None,
                   help="distribution id(s); default p1,p2,p3")
    p.add_argument("--score", default="residual", choices=sorted(SCORES))
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--r", type=float, default=None)
    p.add_argument("--s", type=float, default=None)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--test-n", dest="test_n", type=int, default=500)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("sample", help="draw a synthetic dataset to CSV")
    p.add_argument("--dist", required=True, choices=sorted(DISTRIBUTIONS))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default=None, help="output CSV (default stdout)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("median1d", help="order-statistic median interval")
    p.add_argument("--data", default=None, help="CSV with a header row")
    p.add_argument("--response", default="y")
    p.add_argument("--values", default=None, help="inline sample, comma-separated")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_median1d)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
