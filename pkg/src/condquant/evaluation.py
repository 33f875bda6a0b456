"""Monte-Carlo coverage/width harness.

A cell is one (distribution, score, engine) combination run for a number
of independent trials.  Each trial draws a fresh training set and a fresh
test set, fits the engine, and records:

* coverage of the true conditional q-quantile at the test points,
* predictive coverage of the fresh responses,
* one-sided score-space rates (quantile engine only),
* mean interval width, with infinite-width intervals flagged and
  excluded from the average and empty intervals counted as width zero,
* per-probe coverage hits at a fixed probe set shared by every cell on
  the same distribution and master seed.

Aggregates mirror the usual table columns: AC/SDAC (mean and n-1 standard
deviation of per-trial coverage), AW/SDAW (same for per-trial mean
widths), MCC (worst across-trial coverage over the probe points), plus
empty / infinite / failed-trial counts.  A failing trial is caught,
logged in its report, and excluded from the aggregates.

Every random stream is derived from the master seed with tagged
sub-streams, so results are bit-reproducible for a given seed and
independent of worker scheduling.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .conformal import (
    ConformalMedian,
    ConformalQuantile,
    UncalibratedQuantileBand,
)
from .distributions import make_distribution
from .intervals import QuantileSpec, _as_fraction

__all__ = [
    "TrialConfig",
    "TrialReport",
    "CellMetrics",
    "CellResult",
    "DESK_SCALE",
    "PAPER_SCALE",
    "DEFAULT_SEED",
    "run_trials",
    "binomial_se",
    "sharpness_experiment",
    "overcoverage_experiment",
    "predictive_audit",
    "quantile_audit",
    "ExperimentOutcome",
    "write_metrics",
    "write_reports",
    "SHARPNESS_BAND",
]

DESK_SCALE = {"n": 2000, "trials": 50, "test_n": 500, "probes": 100}
PAPER_SCALE = {"n": 5000, "trials": 500, "test_n": 5000, "probes": 100}
DEFAULT_SEED = 20260822

SHARPNESS_BAND = (0.87, 0.93)


@dataclass(frozen=True)
class TrialConfig:
    """Everything one cell needs; every field has a CLI flag or a default."""

    dist: str = "p3"
    score: str = "residual"
    engine: str = "quantile"
    n: int = 2000
    n1: int | None = None
    alpha: float = 0.1
    q: float = 0.5
    r: float | None = None
    s: float | None = None
    backend: str = "forest"
    gamma: float = 1e-6
    c: float = 100.0
    knn_k: int = 50
    delta: float | None = None
    trials: int = 50
    test_n: int = 500
    probes: int = 100
    seed: int = DEFAULT_SEED

    def replace(self, **changes) -> "TrialConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrialReport:
    trial: int
    coverage: float = math.nan
    predictive: float = math.nan
    lo_rate: float = math.nan
    hi_rate: float = math.nan
    mean_width: float = math.nan
    empty: int = 0
    infinite: int = 0
    probe_hits: list = field(default_factory=list)
    error: str | None = None


@dataclass
class CellMetrics:
    ac: float
    sdac: float
    mcc: float
    aw: float
    sdaw: float
    predictive: float
    lo_rate: float
    hi_rate: float
    empty: int
    infinite: int
    failed: int
    trials_ok: int
    test_n: int

    @property
    def coverage_se(self) -> float:
        return binomial_se(self.ac, self.trials_ok * self.test_n)

    @property
    def predictive_se(self) -> float:
        return binomial_se(self.predictive, self.trials_ok * self.test_n)

    @property
    def rate_se(self) -> float:
        hi = self.hi_rate if math.isnan(self.lo_rate) else self.lo_rate
        return binomial_se(hi, self.trials_ok * self.test_n)


@dataclass
class CellResult:
    config: TrialConfig
    metrics: CellMetrics
    reports: list


def binomial_se(p: float, n: int) -> float:
    """Standard error of a proportion p estimated from n binary outcomes."""
    if not n or math.isnan(p):
        return math.nan
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def _tag(value) -> int:
    digest = hashlib.blake2b(str(value).encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def _stream(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence([_tag(p) for p in parts])


def _generator(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(_stream(*parts)))


def _build_engine(cfg: TrialConfig, seed: int):
    if cfg.engine == "median":
        return ConformalMedian(alpha=cfg.alpha, score=cfg.score, backend=cfg.backend,
                               n1=cfg.n1, gamma=cfg.gamma, c=cfg.c, knn_k=cfg.knn_k,
                               random_state=seed)
    if cfg.engine == "quantile":
        return ConformalQuantile(q=cfg.q, alpha=cfg.alpha, r=cfg.r, s=cfg.s,
                                 score=cfg.score, backend=cfg.backend, n1=cfg.n1,
                                 gamma=cfg.gamma, c=cfg.c, knn_k=cfg.knn_k,
                                 random_state=seed)
    if cfg.engine == "band":
        return UncalibratedQuantileBand(alpha=cfg.alpha, backend=cfg.backend,
                                        knn_k=cfg.knn_k, random_state=seed)
    raise ValueError(f"unknown engine {cfg.engine!r}; valid engines: band, median, quantile")


def _run_single_trial(cfg: TrialConfig, probes_X, trial: int) -> TrialReport:
    report = TrialReport(trial=trial)
    try:
        dist = make_distribution(cfg.dist, delta=cfg.delta, q=cfg.q)
        rng = _generator(cfg.seed, "trial", cfg.dist, trial)
        X, y = dist.sample(cfg.n, rng)
        Xt, yt = dist.sample(cfg.test_n, rng)
        fit_seed = int(_stream(cfg.seed, "fit", cfg.dist, trial).generate_state(1)[0])
        engine = _build_engine(cfg, fit_seed).fit(X, y)

        target = dist.true_quantile(Xt, cfg.q)
        intervals = engine.predict_interval(Xt)
        report.coverage = float(np.mean(
            [iv.contains(t) for iv, t in zip(intervals, target)]))
        report.predictive = float(np.mean(
            [iv.contains(v) for iv, v in zip(intervals, yt)]))

        finite_widths = []
        for iv in intervals:
            if iv.is_empty:
                report.empty += 1
                finite_widths.append(0.0)
            elif iv.is_finite:
                finite_widths.append(iv.width)
            else:
                report.infinite += 1
        report.mean_width = float(np.mean(finite_widths)) if finite_widths else math.nan

        if isinstance(engine, ConformalQuantile):
            f_lo, f_hi = engine.conformity_scores(Xt, yt)
            report.lo_rate = float(np.mean(f_lo >= engine.threshold_lo_))
            report.hi_rate = float(np.mean(f_hi <= engine.threshold_hi_))

        if probes_X is not None:
            probe_target = dist.true_quantile(probes_X, cfg.q)
            probe_ivs = engine.predict_interval(probes_X)
            report.probe_hits = [
                int(iv.contains(t)) for iv, t in zip(probe_ivs, probe_target)]
    except Exception as exc:  # noqa: BLE001 - a broken trial must not sink the cell
        report.error = f"{type(exc).__name__}: {exc}"
    return report


def _aggregate(cfg: TrialConfig, reports: list) -> CellMetrics:
    ok = [r for r in reports if r.error is None]
    failed = len(reports) - len(ok)

    def mean_of(vals):
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def sd_of(vals):
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.std(vals, ddof=1)) if len(vals) >= 2 else math.nan

    coverages = [r.coverage for r in ok]
    widths = [r.mean_width for r in ok]
    if ok and cfg.probes > 0:
        hits = np.array([r.probe_hits for r in ok], dtype=float)
        mcc = float(hits.mean(axis=0).min())
    else:
        mcc = math.nan
    return CellMetrics(
        ac=mean_of(coverages),
        sdac=sd_of(coverages),
        mcc=mcc,
        aw=mean_of(widths),
        sdaw=sd_of(widths),
        predictive=mean_of([r.predictive for r in ok]),
        lo_rate=mean_of([r.lo_rate for r in ok]),
        hi_rate=mean_of([r.hi_rate for r in ok]),
        empty=sum(r.empty for r in ok),
        infinite=sum(r.infinite for r in ok),
        failed=failed,
        trials_ok=len(ok),
        test_n=cfg.test_n,
    )


def run_trials(cfg: TrialConfig, jobs: int = 1) -> CellResult:
    """Run one cell: ``cfg.trials`` independent trials plus aggregation.

    Results depend only on the config (including its seed), never on
    ``jobs``: each trial owns a derived random stream and the reduction
    order is fixed by trial index.
    """
    dist = make_distribution(cfg.dist, delta=cfg.delta, q=cfg.q)
    if cfg.probes > 0:
        probes_X, _ = dist.sample(cfg.probes, _generator(cfg.seed, "probes", cfg.dist))
    else:
        probes_X = None

    if jobs == 1:
        reports = [_run_single_trial(cfg, probes_X, t) for t in range(cfg.trials)]
    else:
        reports = Parallel(n_jobs=jobs)(
            delayed(_run_single_trial)(cfg, probes_X, t) for t in range(cfg.trials))
    return CellResult(config=cfg, metrics=_aggregate(cfg, reports), reports=reports)


# ------------------------------------------------------------- experiments


@dataclass
class ExperimentOutcome:
    name: str
    passed: bool
    summary: dict
    cells: list


def sharpness_experiment(delta=0.0005, n=5000, alpha=0.1, trials=100, test_n=200,
                         seed=DEFAULT_SEED, jobs=1) -> ExperimentOutcome:
    """Median coverage on the knife-edge family with the zero regressor.

    With mu fixed at zero the whole sample calibrates, and no method can
    push coverage of the conditional median materially above 1 - alpha:
    the observed rate must land inside SHARPNESS_BAND.
    """
    cfg = TrialConfig(dist="pdelta", score="zero", engine="median", n=n, n1=0,
                      alpha=alpha, delta=delta, trials=trials, test_n=test_n,
                      probes=0, seed=seed)
    cell = run_trials(cfg, jobs=jobs)
    coverage = cell.metrics.ac
    lo, hi = SHARPNESS_BAND
    passed = (not math.isnan(coverage)) and lo <= coverage <= hi and cell.metrics.failed == 0
    return ExperimentOutcome(
        name="sharpness",
        passed=passed,
        summary={"coverage": coverage, "se": cell.metrics.coverage_se,
                 "band_lo": lo, "band_hi": hi, "delta": delta, "alpha": alpha},
        cells=[cell],
    )


def overcoverage_floor_n2(alpha) -> int:
    """Calibration size floor(2 / alpha) + 1 that forces finite intervals."""
    return int(2 / _as_fraction(alpha, "alpha")) + 1


def overcoverage_experiment(dist="p1", c=100.0, alpha=0.1, n=2000, trials=50,
                            test_n=500, seed=DEFAULT_SEED, jobs=1) -> ExperimentOutcome:
    """Coverage floor of the randomized central estimator at a tiny calibration set.

    The calibration half is pinned at floor(2/alpha) + 1 points, which
    keeps 1/n2 below alpha/2 so every interval is finite, and coverage of
    the conditional median stays above 1 - alpha/2 - 0.05 even though the
    regressor is pure noise at scale c times the response bound.
    """
    n2 = overcoverage_floor_n2(alpha)
    if n <= n2:
        raise ValueError(f"n={n} leaves no training rows for n2={n2}")
    cfg = TrialConfig(dist=dist, score="randomized", engine="median", n=n, n1=n - n2,
                      alpha=alpha, c=c, trials=trials, test_n=test_n, probes=0,
                      seed=seed)
    cell = run_trials(cfg, jobs=jobs)
    floor = 1 - alpha / 2 - 0.05
    m = cell.metrics
    passed = (not math.isnan(m.ac)) and m.ac >= floor and m.infinite == 0 and m.failed == 0
    return ExperimentOutcome(
        name="overcoverage",
        passed=passed,
        summary={"dist": dist, "coverage": m.ac, "se": m.coverage_se, "floor": floor,
                 "infinite": m.infinite, "n2": n2, "c": c},
        cells=[cell],
    )


def predictive_audit(dists=("p1", "p2", "p3"), alpha=0.1, n=2000, trials=50,
                     test_n=500, seed=DEFAULT_SEED, jobs=1) -> ExperimentOutcome:
    """Fresh-response coverage of the symmetric median engine.

    The calibrated residual interval must contain a fresh response at rate
    1 - alpha/2 up to three binomial standard errors, on each distribution.
    """
    cells, checks = [], {}
    passed = True
    for dist in dists:
        cfg = TrialConfig(dist=dist, score="residual", engine="median", n=n,
                          alpha=alpha, trials=trials, test_n=test_n, probes=0,
                          seed=seed)
        cell = run_trials(cfg, jobs=jobs)
        m = cell.metrics
        floor = 1 - alpha / 2 - 3 * m.predictive_se
        ok = (not math.isnan(m.predictive)) and m.predictive >= floor and m.failed == 0
        passed &= ok
        checks[dist] = {"predictive": m.predictive, "floor": floor, "ok": ok}
        cells.append(cell)
    return ExperimentOutcome(name="predictive-audit", passed=passed,
                             summary=checks, cells=cells)


def quantile_audit(dists=("p1", "p2", "p3"), score="residual", q=0.5, alpha=0.1,
                   r=None, s=None, n=2000, trials=50, test_n=500,
                   seed=DEFAULT_SEED, jobs=1) -> ExperimentOutcome:
    """One-sided score-space rates of the quantile engine.

    Checks P{f_lo >= t_lo} >= 1 - r q and P{f_hi <= t_hi} >= 1 - s (1-q),
    each up to three binomial standard errors.
    """
    spec = (QuantileSpec.even_split(q, alpha) if r is None and s is None
            else QuantileSpec(q, alpha, r if r is not None else alpha - s,
                              s if s is not None else alpha - r))
    lo_floor_exact = 1 - spec.r * spec.q
    hi_floor_exact = 1 - spec.s * (1 - spec.q)
    cells, checks = [], {}
    passed = True
    for dist in dists:
        cfg = TrialConfig(dist=dist, score=score, engine="quantile", q=q, alpha=alpha,
                          r=r, s=s, n=n, trials=trials, test_n=test_n, probes=0,
                          seed=seed)
        cell = run_trials(cfg, jobs=jobs)
        m = cell.metrics
        se = m.rate_se
        lo_ok = (not math.isnan(m.lo_rate)) and m.lo_rate >= lo_floor_exact - 3 * se
        hi_ok = (not math.isnan(m.hi_rate)) and m.hi_rate >= hi_floor_exact - 3 * se
        ok = lo_ok and hi_ok and m.failed == 0
        passed &= ok
        checks[dist] = {"lo_rate": m.lo_rate, "lo_floor": lo_floor_exact,
                        "hi_rate": m.hi_rate, "hi_floor": hi_floor_exact, "ok": ok}
        cells.append(cell)
    return ExperimentOutcome(name="quantile-audit", passed=passed,
                             summary=checks, cells=cells)


# ------------------------------------------------------------------ output

_METRIC_COLUMNS = [
    "dist", "score", "engine", "q", "alpha", "n", "trials", "test_n",
    "ac", "sdac", "mcc", "aw", "sdaw", "predictive", "lo_rate", "hi_rate",
    "empty", "infinite", "failed",
]


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def _metric_row(result: CellResult) -> list:
    cfg, m = result.config, result.metrics
    return [cfg.dist, cfg.score, cfg.engine, cfg.q, cfg.alpha, cfg.n, cfg.trials,
            cfg.test_n, m.ac, m.sdac, m.mcc, m.aw, m.sdaw, m.predictive,
            m.lo_rate, m.hi_rate, m.empty, m.infinite, m.failed]


def write_metrics(results, out, fmt="csv", echo=None):
    """Write the metrics table for a list of cells.

    ``echo`` is the resolved run configuration; it lands in '#' comment
    lines above the CSV header (or a "config" object in JSON), so every
    result file states how it was produced.
    """
    if fmt == "csv":
        lines = []
        for key, value in (echo or {}).items():
            lines.append(f"# {key}={_fmt(value)}")
        lines.append(",".join(_METRIC_COLUMNS))
        for result in results:
            lines.append(",".join(_fmt(v) for v in _metric_row(result)))
        out.write("\n".join(lines) + "\n")
    elif fmt == "json":
        def clean(value):
            if isinstance(value, float) and math.isnan(value):
                return None
            if isinstance(value, float) and math.isinf(value):
                return "inf" if value > 0 else "-inf"
            return value

        payload = {
            "config": {k: clean(v) for k, v in (echo or {}).items()},
            "cells": [
                {col: clean(v) for col, v in zip(_METRIC_COLUMNS, _metric_row(r))}
                for r in results
            ],
        }
        json.dump(payload, out, indent=2)
        out.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}; valid formats: csv, json")


def write_reports(results, out):
    """Write per-trial reports as JSON lines."""
    for result in results:
        cfg = result.config
        for rep in result.reports:
            row = {"dist": cfg.dist, "score": cfg.score, "engine": cfg.engine,
                   "trial": rep.trial}
            for name in ("coverage", "predictive", "lo_rate", "hi_rate", "mean_width"):
                v = getattr(rep, name)
                row[name] = None if math.isnan(v) else v
            row["empty"] = rep.empty
            row["infinite"] = rep.infinite
            row["probe_hits"] = rep.probe_hits
            row["error"] = rep.error
            out.write(json.dumps(row) + "\n")
