"""Split-conformal interval engines.

Two engines share one recipe: shuffle the data with a seeded permutation,
fit a conformity score on the first ``n1`` rows, evaluate the score on the
remaining ``n2`` calibration rows, and read one or two order statistics of
those calibration scores as thresholds.

* :class:`ConformalMedian` calibrates the absolute residual
  ``|y - center(x)|`` at level ``1 - alpha/2`` and predicts the symmetric
  interval ``center(x) +- half_width``.  It covers the conditional median
  with probability at least ``1 - alpha`` and a fresh response with
  probability at least ``1 - alpha/2``, for any center estimator.
* :class:`ConformalQuantile` calibrates a lower and an upper conformity
  score separately and predicts by score inversion.  It covers the
  conditional q-quantile with probability at least ``1 - alpha`` whenever
  ``r + s = alpha``.

Out-of-range calibration ranks are not errors: they become infinite
thresholds and unbounded interval sides.

:class:`UncalibratedQuantileBand` is the comparison point: the backend's
raw ``[alpha/2, 1 - alpha/2]`` conditional quantile band with no
calibration step, and therefore no finite-sample guarantee.

:func:`unconditional_median_interval` handles the no-covariate case with
an exact binomial order-statistic rule.

A fitted engine serializes with :meth:`freeze` and comes back with
:func:`thaw`; artifacts carry a format version and anything newer than
this module understands is rejected loudly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np
from sklearn.base import BaseEstimator

from .intervals import (
    Interval,
    QuantileSpec,
    _as_fraction,
    kth_smallest,
    upper_calibration_index,
)
from .scores import backend_from_payload, make_backend, make_score, score_from_payload
from .validation import check_consistent, check_matrix, check_vector

__all__ = [
    "ConformalMedian",
    "ConformalQuantile",
    "UncalibratedQuantileBand",
    "UnconditionalMedianResult",
    "median_order_rank",
    "unconditional_median_interval",
    "ARTIFACT_VERSION",
    "thaw",
]

ARTIFACT_VERSION = 1


def _check_alpha(alpha) -> float:
    alpha = float(alpha)
    if not (math.isfinite(alpha) and 0 < alpha < 1):
        raise ValueError(f"alpha must lie strictly between 0 and 1, got {alpha!r}")
    return alpha


def _canonical_order(X, y):
    """Sort rows by feature tuple then response, so fits depend only on the
    multiset of training rows, not on their incoming order."""
    keys = (y,) + tuple(X[:, j] for j in range(X.shape[1] - 1, -1, -1))
    order = np.lexsort(keys)
    return X[order], y[order]


def _encode_threshold(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


def _decode_threshold(v) -> float:
    if isinstance(v, str):
        if v == "inf":
            return math.inf
        if v == "-inf":
            return -math.inf
        raise ValueError(f"bad threshold token {v!r}")
    return float(v)


class _SplitEngine(BaseEstimator):
    """Common split / score-fitting plumbing for the two conformal engines."""

    def _resolve_score(self, seed, cqr_levels=None):
        score = make_score(
            self.score,
            backend=self.backend,
            gamma=self.gamma,
            c=self.c,
            cqr_levels=cqr_levels,
            knn_k=self.knn_k,
            random_state=seed,
        )
        if "random_state" in score.get_params():
            score.set_params(random_state=seed)
        if cqr_levels is not None and "lo_level" in score.get_params():
            if score.get_params()["lo_level"] is None:
                score.set_params(lo_level=cqr_levels[0], hi_level=cqr_levels[1])
        return score

    def _split_fit(self, X, y, cqr_levels=None, need_center=False):
        X = check_matrix(X)
        y = check_vector(y)
        check_consistent(X, y)
        n = X.shape[0]
        n1 = n // 2 if self.n1 is None else int(self.n1)
        if not 0 <= n1 < n:
            raise ValueError(f"n1 must be in 0..{n - 1}, got {n1}")
        n2 = n - n1

        seeds = np.random.SeedSequence(self.random_state).generate_state(2)
        score = self._resolve_score(int(seeds[1]), cqr_levels=cqr_levels)
        if need_center and not getattr(score, "provides_center", False):
            raise TypeError(
                f"score {getattr(score, 'name', score)!r} has no central estimator; "
                "use the quantile engine for it"
            )
        if n1 == 0 and getattr(score, "requires_fit", True):
            raise ValueError(
                f"score {getattr(score, 'name', score)!r} needs a nonempty training half"
            )

        perm = np.random.Generator(np.random.PCG64(int(seeds[0]))).permutation(n)
        i1, i2 = perm[:n1], perm[n1:]
        if n1 > 0:
            X1, y1 = _canonical_order(X[i1], y[i1])
            score.fit(X1, y1)
        self.score_ = score
        self.n1_ = n1
        self.n2_ = n2
        self.n_features_in_ = X.shape[1]
        return X[i2], y[i2]

    def _check_fitted(self):
        if not hasattr(self, "score_"):
            raise RuntimeError("engine is not fitted")


class ConformalMedian(_SplitEngine):
    """Symmetric split-conformal interval for the conditional median.

    Parameters
    ----------
    alpha : float, default=0.1
        Miscoverage budget for the median; a fresh response is covered at
        level ``1 - alpha/2``.
    score : str or estimator, default="residual"
        Any score providing a central estimator: "residual", "normalized"
        (its mean model), "zero", or "randomized".
    backend : str or estimator, default="forest"
        Regression backend for fitted scores ("forest" or "knn").
    n1 : int or None
        Size of the training half; default ``n // 2``.  Zero is allowed
        for scores that need no training data.
    gamma, c, knn_k :
        Forwarded to the score / backend where relevant.
    random_state : int or None
        Master seed; the split permutation and every sub-model seed are
        derived from it.
    """

    def __init__(self, alpha=0.1, score="residual", backend="forest", n1=None,
                 gamma=1e-6, c=100.0, knn_k=50, random_state=None):
        self.alpha = alpha
        self.score = score
        self.backend = backend
        self.n1 = n1
        self.gamma = gamma
        self.c = c
        self.knn_k = knn_k
        self.random_state = random_state

    def fit(self, X, y):
        alpha = _check_alpha(self.alpha)
        X2, y2 = self._split_fit(X, y, need_center=True)
        scores = np.abs(y2 - self.score_.center(X2))
        level = 1 - _as_fraction(alpha, "alpha") / 2
        rank = upper_calibration_index(self.n2_, level)
        self.half_width_ = kth_smallest(scores, rank)
        return self

    def predict_bounds(self, X):
        """Lower and upper interval endpoints as arrays (may be infinite)."""
        self._check_fitted()
        center = self.score_.center(check_matrix(X))
        return center - self.half_width_, center + self.half_width_

    def predict_interval(self, X):
        """Intervals, one per query row."""
        lo, hi = self.predict_bounds(X)
        return [Interval(a, b) for a, b in zip(lo, hi)]

    def freeze(self) -> dict:
        self._check_fitted()
        return {
            "format_version": ARTIFACT_VERSION,
            "engine": "median",
            "alpha": float(self.alpha),
            "n1": self.n1_,
            "n2": self.n2_,
            "half_width": _encode_threshold(self.half_width_),
            "score": self.score_.to_payload(),
        }


class ConformalQuantile(_SplitEngine):
    """Split-conformal interval for the conditional q-quantile.

    The miscoverage budget splits as ``r`` below and ``s`` above with
    ``r + s = alpha``; both default to ``alpha / 2``.  The lower threshold
    is the ``ceil(r q (n2+1) - 1)``-th smallest lower score and the upper
    threshold the ``ceil((1 - s (1-q)) (n2+1))``-th smallest upper score,
    with out-of-range ranks mapping to infinite thresholds.

    For the two-sided "cqr" score the backend band levels default to
    ``(alpha/2, 1 - alpha/2)`` when the target is the median and to
    ``(r q, 1 - s (1 - q))`` otherwise; ``cqr_levels`` overrides.  That
    score can produce the canonical empty interval at some queries, which
    callers must treat as a miss.
    """

    def __init__(self, q=0.5, alpha=0.1, r=None, s=None, score="residual",
                 backend="forest", n1=None, gamma=1e-6, c=100.0, cqr_levels=None,
                 knn_k=50, random_state=None):
        self.q = q
        self.alpha = alpha
        self.r = r
        self.s = s
        self.score = score
        self.backend = backend
        self.n1 = n1
        self.gamma = gamma
        self.c = c
        self.cqr_levels = cqr_levels
        self.knn_k = knn_k
        self.random_state = random_state

    def _resolve_spec(self) -> QuantileSpec:
        alpha = _check_alpha(self.alpha)
        r, s = self.r, self.s
        if r is None and s is None:
            return QuantileSpec.even_split(self.q, alpha)
        if r is None:
            r = alpha - float(s)
        elif s is None:
            s = alpha - float(r)
        return QuantileSpec(self.q, alpha, r, s)

    def _default_cqr_levels(self, spec: QuantileSpec):
        if self.cqr_levels is not None:
            return tuple(self.cqr_levels)
        if spec.q == 0.5:
            return (spec.alpha / 2, 1 - spec.alpha / 2)
        lo = float(_as_fraction(spec.r, "r") * _as_fraction(spec.q, "q"))
        hi = float(1 - _as_fraction(spec.s, "s") * (1 - _as_fraction(spec.q, "q")))
        return (lo, hi)

    def fit(self, X, y):
        spec = self._resolve_spec()
        X2, y2 = self._split_fit(X, y, cqr_levels=self._default_cqr_levels(spec))
        lo_scores = self.score_.score_lo(X2, y2)
        hi_scores = self.score_.score_hi(X2, y2)
        self.threshold_lo_ = kth_smallest(lo_scores, spec.lower_index(self.n2_))
        self.threshold_hi_ = kth_smallest(hi_scores, spec.upper_index(self.n2_))
        self.spec_ = spec
        return self

    def predict_bounds(self, X):
        """Raw inverted bounds; they may cross for the two-sided score."""
        self._check_fitted()
        return self.score_.invert(check_matrix(X), self.threshold_lo_,
                                  self.threshold_hi_)

    def predict_interval(self, X):
        """Intervals, one per query row; crossed bounds become the empty interval."""
        lo, hi = self.predict_bounds(X)
        return [Interval.from_bounds(a, b) for a, b in zip(lo, hi)]

    def conformity_scores(self, X, y):
        """Lower and upper scores of fresh pairs, for one-sided rate audits."""
        self._check_fitted()
        X = check_matrix(X)
        return self.score_.score_lo(X, y), self.score_.score_hi(X, y)

    def freeze(self) -> dict:
        self._check_fitted()
        return {
            "format_version": ARTIFACT_VERSION,
            "engine": "quantile",
            "q": self.spec_.q,
            "alpha": self.spec_.alpha,
            "r": self.spec_.r,
            "s": self.spec_.s,
            "n1": self.n1_,
            "n2": self.n2_,
            "threshold_lo": _encode_threshold(self.threshold_lo_),
            "threshold_hi": _encode_threshold(self.threshold_hi_),
            "score": self.score_.to_payload(),
        }


class UncalibratedQuantileBand(BaseEstimator):
    """Backend quantile band [q_{alpha/2}, q_{1-alpha/2}] with no calibration.

    Fitted on the full sample.  Carries no finite-sample coverage
    guarantee; it exists as the comparison arm for the conformal engines.
    """

    def __init__(self, alpha=0.1, backend="forest", knn_k=50, random_state=None):
        self.alpha = alpha
        self.backend = backend
        self.knn_k = knn_k
        self.random_state = random_state

    def fit(self, X, y):
        alpha = _check_alpha(self.alpha)
        X = check_matrix(X)
        y = check_vector(y)
        check_consistent(X, y)
        seed = int(np.random.SeedSequence(self.random_state).generate_state(1)[0])
        model = make_backend(self.backend, knn_k=self.knn_k)
        if "random_state" in model.get_params():
            model.set_params(random_state=seed)
        Xc, yc = _canonical_order(X, y)
        self.model_ = model.fit(Xc, yc)
        self.levels_ = (alpha / 2, 1 - alpha / 2)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("engine is not fitted")

    def predict_bounds(self, X):
        self._check_fitted()
        bands = self.model_.predict_quantiles(check_matrix(X), self.levels_)
        return bands[:, 0], bands[:, 1]

    def predict_interval(self, X):
        lo, hi = self.predict_bounds(X)
        return [Interval(a, b) for a, b in zip(lo, hi)]

    def freeze(self) -> dict:
        self._check_fitted()
        return {
            "format_version": ARTIFACT_VERSION,
            "engine": "band",
            "alpha": float(self.alpha),
            "levels": [self.levels_[0], self.levels_[1]],
            "backend": self.model_.to_payload(),
        }


# ----------------------------------------------------------- no-covariate rule


def median_order_rank(n: int, alpha) -> int:
    """Largest k >= 0 with P{Binomial(n, 1/2) < k} <= alpha / 2.

    The binomial tail is evaluated exactly with integer arithmetic:
    P{X < k} <= alpha/2 iff 2 * sum_{j<k} C(n, j) <= alpha * 2^n.
    """
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or int(n) < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    bound = _as_fraction(_check_alpha(alpha), "alpha") * (1 << n)
    k = 0
    partial = 0  # sum_{j < k} C(n, j)
    comb = 1  # C(n, k)
    while k < n:
        nxt = partial + comb
        if 2 * nxt > bound:
            break
        partial = nxt
        k += 1
        comb = comb * (n - k + 1) // k
    return k


@dataclass(frozen=True)
class UnconditionalMedianResult:
    """Order-statistic interval for the median of an i.i.d. sample.

    ``lower_rank`` of 0 and ``upper_rank`` of n+1 denote the unbounded
    conventions Y_(0) = -inf and Y_(n+1) = +inf.
    """

    interval: Interval
    lower_rank: int
    upper_rank: int
    n: int


def unconditional_median_interval(values, alpha) -> UnconditionalMedianResult:
    """Distribution-free confidence interval [Y_(k), Y_(n+1-k)] for the median.

    k is chosen by :func:`median_order_rank`, which guarantees coverage at
    least ``1 - alpha`` for any continuous sampling distribution.
    """
    y = check_vector(np.asarray(values, dtype=float), name="values")
    n = y.size
    k = median_order_rank(n, alpha)
    ys = np.sort(y)
    if k == 0:
        interval = Interval(-math.inf, math.inf)
    else:
        interval = Interval(float(ys[k - 1]), float(ys[n - k]))
    return UnconditionalMedianResult(interval=interval, lower_rank=k,
                                     upper_rank=n + 1 - k, n=n)


# ------------------------------------------------------------------ thaw


def thaw(payload: dict):
    """Rebuild a fitted engine from a frozen artifact dictionary."""
    version = payload.get("format_version")
    if not isinstance(version, int):
        raise ValueError("artifact has no integer format_version field")
    if version < 1 or version > ARTIFACT_VERSION:
        raise ValueError(
            f"artifact format_version {version} is not supported "
            f"(this build reads versions 1..{ARTIFACT_VERSION})"
        )
    engine = payload.get("engine")
    if engine == "median":
        model = ConformalMedian(alpha=payload["alpha"])
        model.n1_ = int(payload["n1"])
        model.n2_ = int(payload["n2"])
        model.half_width_ = _decode_threshold(payload["half_width"])
        model.score_ = score_from_payload(payload["score"])
        return model
    if engine == "quantile":
        model = ConformalQuantile(q=payload["q"], alpha=payload["alpha"],
                                  r=payload["r"], s=payload["s"])
        model.spec_ = QuantileSpec(payload["q"], payload["alpha"],
                                   payload["r"], payload["s"])
        model.n1_ = int(payload["n1"])
        model.n2_ = int(payload["n2"])
        model.threshold_lo_ = _decode_threshold(payload["threshold_lo"])
        model.threshold_hi_ = _decode_threshold(payload["threshold_hi"])
        model.score_ = score_from_payload(payload["score"])
        return model
    if engine == "band":
        model = UncalibratedQuantileBand(alpha=payload["alpha"])
        model.levels_ = tuple(payload["levels"])
        model.model_ = backend_from_payload(payload["backend"])
        return model
    raise ValueError(f"unknown engine {engine!r} in artifact")
