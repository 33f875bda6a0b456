"""Conformity score catalog.

Each score owns whatever fitted state it needs (regression backends, a
response bound, nothing at all) and exposes the same three operations:

* ``score_lo(X, y)`` / ``score_hi(X, y)``: lower and upper conformity
  scores, each nondecreasing in y at fixed x.  Symmetric scores share one
  function.
* ``invert(X, t_lo, t_hi)``: the y-interval bounds where
  ``t_lo <= score_lo`` and ``score_hi <= t_hi``; thresholds may be
  -inf/+inf.  Bounds may cross for the two-sided quantile score, in which
  case the caller normalizes to the canonical empty interval.

Scores that also provide a central response estimator (``center``) can
drive the symmetric median engine.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from sklearn.base import BaseEstimator, clone

from .forest import QuantileForest
from .neighbors import KNNQuantileBackend
from .validation import check_consistent, check_matrix, check_vector

__all__ = [
    "ResidualScore",
    "NormalizedScore",
    "CqrScore",
    "CdfScore",
    "LogScore",
    "ZeroScore",
    "RandomizedScore",
    "SCORES",
    "BACKENDS",
    "make_backend",
    "make_score",
    "score_from_payload",
]

BACKENDS = {"forest": QuantileForest, "knn": KNNQuantileBackend}


def make_backend(name, knn_k=50):
    if isinstance(name, BaseEstimator):
        return clone(name)
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; valid backends: {sorted(BACKENDS)}")
    if name == "knn":
        return KNNQuantileBackend(k=knn_k)
    return QuantileForest()


def backend_from_payload(payload):
    kind = payload.get("kind")
    if kind not in BACKENDS:
        raise ValueError(f"unknown backend payload kind {kind!r}")
    return BACKENDS[kind].from_payload(payload)


def _seed_ints(random_state, n=4):
    """Deterministic child seeds for sub-models, derived from one master seed."""
    return [int(v) for v in np.random.SeedSequence(random_state).generate_state(n)]


def _check_xy(X, y):
    X = check_matrix(X)
    y = check_vector(y)
    check_consistent(X, y)
    return X, y


class _BackendScore(BaseEstimator):
    """Shared plumbing for scores built on one regression backend."""

    def __init__(self, backend=None, random_state=None):
        self.backend = backend
        self.random_state = random_state

    def _spawn_backend(self, seed):
        model = QuantileForest() if self.backend is None else clone(self.backend)
        if "random_state" in model.get_params():
            model.set_params(random_state=seed)
        return model

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("score is not fitted")


class ResidualScore(_BackendScore):
    """Signed regression residual: f(x, y) = y - mu(x)."""

    name = "residual"
    provides_center = True

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        seed = _seed_ints(self.random_state)[0]
        self.model_ = self._spawn_backend(seed).fit(X, y)
        return self

    def center(self, X):
        self._check_fitted()
        return self.model_.predict_mean(X)

    def score_lo(self, X, y):
        return np.asarray(y, dtype=float) - self.center(X)

    score_hi = score_lo

    def invert(self, X, t_lo, t_hi):
        mu = self.center(X)
        return mu + t_lo, mu + t_hi

    def to_payload(self):
        self._check_fitted()
        return {"score": self.name, "backend": self.model_.to_payload()}

    @classmethod
    def from_payload(cls, payload):
        score = cls()
        score.model_ = backend_from_payload(payload["backend"])
        return score


class NormalizedScore(_BackendScore):
    """Dispersion-normalized residual: f(x, y) = (y - mu(x)) / (sigma(x) + gamma).

    mu is a mean-regression backend; sigma is a second backend of the same
    kind fitted to the absolute residuals |y_i - mu(x_i)| of the training
    half, with its own derived seed.  gamma >= 0 stabilizes flat-dispersion
    regions; a zero denominator anywhere it is evaluated is an error.
    """

    name = "normalized"
    provides_center = True

    def __init__(self, backend=None, gamma=1e-6, random_state=None):
        super().__init__(backend=backend, random_state=random_state)
        self.gamma = gamma

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError(f"gamma must be a finite nonnegative number, got {self.gamma!r}")
        s0, s1 = _seed_ints(self.random_state)[:2]
        self.model_ = self._spawn_backend(s0).fit(X, y)
        resid = np.abs(y - self.model_.predict_mean(X))
        self.dispersion_ = self._spawn_backend(s1).fit(X, resid)
        return self

    def center(self, X):
        self._check_fitted()
        return self.model_.predict_mean(X)

    def _denominator(self, X):
        denom = self.dispersion_.predict_mean(X) + self.gamma
        if (denom <= 0).any():
            raise ValueError(
                "dispersion estimate plus gamma is zero somewhere; "
                "use a positive gamma"
            )
        return denom

    def score_lo(self, X, y):
        return (np.asarray(y, dtype=float) - self.center(X)) / self._denominator(X)

    score_hi = score_lo

    def invert(self, X, t_lo, t_hi):
        mu = self.center(X)
        denom = self._denominator(X)
        return mu + t_lo * denom, mu + t_hi * denom

    def to_payload(self):
        self._check_fitted()
        return {
            "score": self.name,
            "gamma": float(self.gamma),
            "backend": self.model_.to_payload(),
            "dispersion": self.dispersion_.to_payload(),
        }

    @classmethod
    def from_payload(cls, payload):
        score = cls(gamma=payload["gamma"])
        score.model_ = backend_from_payload(payload["backend"])
        score.dispersion_ = backend_from_payload(payload["dispersion"])
        return score


class CqrScore(_BackendScore):
    """Two-sided quantile-residual score.

    f_lo(x, y) = y - qlo(x) and f_hi(x, y) = y - qhi(x), where qlo and qhi
    are the backend's conditional quantile estimates at ``lo_level`` and
    ``hi_level``.  Both come from one fitted backend, so the estimates
    never cross; the calibrated interval still can come back empty at a
    given x, which the caller reports as the canonical empty interval.
    """

    name = "cqr"
    provides_center = False

    def __init__(self, backend=None, lo_level=None, hi_level=None, random_state=None):
        super().__init__(backend=backend, random_state=random_state)
        self.lo_level = lo_level
        self.hi_level = hi_level

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        if self.lo_level is None or self.hi_level is None:
            raise ValueError("lo_level and hi_level must be set before fitting")
        lo, hi = float(self.lo_level), float(self.hi_level)
        if not (0 < lo < hi < 1):
            raise ValueError(f"need 0 < lo_level < hi_level < 1, got ({lo}, {hi})")
        seed = _seed_ints(self.random_state)[0]
        self.model_ = self._spawn_backend(seed).fit(X, y)
        self._levels = (lo, hi)
        return self

    def _bands(self, X):
        self._check_fitted()
        qs = self.model_.predict_quantiles(X, self._levels)
        return qs[:, 0], qs[:, 1]

    def score_lo(self, X, y):
        return np.asarray(y, dtype=float) - self._bands(X)[0]

    def score_hi(self, X, y):
        return np.asarray(y, dtype=float) - self._bands(X)[1]

    def invert(self, X, t_lo, t_hi):
        qlo, qhi = self._bands(X)
        return qlo + t_lo, qhi + t_hi

    def to_payload(self):
        self._check_fitted()
        return {
            "score": self.name,
            "levels": [self._levels[0], self._levels[1]],
            "backend": self.model_.to_payload(),
        }

    @classmethod
    def from_payload(cls, payload):
        lo, hi = payload["levels"]
        score = cls(lo_level=lo, hi_level=hi)
        score.model_ = backend_from_payload(payload["backend"])
        score._levels = (float(lo), float(hi))
        return score


class CdfScore(_BackendScore):
    """Estimated conditional CDF level: f(x, y) = F(y | x).

    Inversion clamps thresholds to [0, 1] and applies the generalized
    inverse, so the interval always lies inside the backend's pooled
    conditional support; thresholds 0 and 1 span that support exactly.
    """

    name = "cdf"
    provides_center = False

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        seed = _seed_ints(self.random_state)[0]
        self.model_ = self._spawn_backend(seed).fit(X, y)
        return self

    def score_lo(self, X, y):
        self._check_fitted()
        return self.model_.predict_cdf(X, np.asarray(y, dtype=float))

    score_hi = score_lo

    def invert(self, X, t_lo, t_hi):
        self._check_fitted()
        lo = self.model_.predict_cdf_inverse(X, min(max(t_lo, 0.0), 1.0))
        hi = self.model_.predict_cdf_inverse(X, min(max(t_hi, 0.0), 1.0))
        return lo, hi

    def to_payload(self):
        self._check_fitted()
        return {"score": self.name, "backend": self.model_.to_payload()}

    @classmethod
    def from_payload(cls, payload):
        score = cls()
        score.model_ = backend_from_payload(payload["backend"])
        return score


class LogScore(_BackendScore):
    """Log-scale residual for positive responses: f(x, y) = log y - m(x).

    m is a backend fitted to (x, log y).  Any nonpositive response, at fit
    time or score time, is a domain error.  Inverted intervals
    exp(m + t) are always within (0, inf).
    """

    name = "log"
    provides_center = False

    @staticmethod
    def _check_positive(y):
        y = np.asarray(y, dtype=float)
        if (y <= 0).any():
            i = int(np.argwhere(y <= 0)[0][0])
            raise ValueError(
                f"log score requires positive responses; y[{i}] = {y[i]!r}"
            )
        return y

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        y = self._check_positive(y)
        seed = _seed_ints(self.random_state)[0]
        self.model_ = self._spawn_backend(seed).fit(X, np.log(y))
        return self

    def score_lo(self, X, y):
        self._check_fitted()
        y = self._check_positive(y)
        return np.log(y) - self.model_.predict_mean(X)

    score_hi = score_lo

    def invert(self, X, t_lo, t_hi):
        self._check_fitted()
        m = self.model_.predict_mean(X)
        with np.errstate(over="ignore"):
            return np.exp(m + t_lo), np.exp(m + t_hi)

    def to_payload(self):
        self._check_fitted()
        return {"score": self.name, "backend": self.model_.to_payload()}

    @classmethod
    def from_payload(cls, payload):
        score = cls()
        score.model_ = backend_from_payload(payload["backend"])
        return score


class ZeroScore(BaseEstimator):
    """Fixed zero regressor: f(x, y) = y, intervals are [t_lo, t_hi] everywhere.

    Needs no training data, so it is usable with an empty training half.
    """

    name = "zero"
    provides_center = True
    requires_fit = False

    def fit(self, X, y):
        return self

    def center(self, X):
        X = check_matrix(X)
        return np.zeros(X.shape[0])

    def score_lo(self, X, y):
        return np.asarray(y, dtype=float).copy()

    score_hi = score_lo

    def invert(self, X, t_lo, t_hi):
        X = check_matrix(X)
        n = X.shape[0]
        return np.full(n, float(t_lo)), np.full(n, float(t_hi))

    def to_payload(self):
        return {"score": self.name}

    @classmethod
    def from_payload(cls, payload):
        return cls()


class RandomizedScore(BaseEstimator):
    """Randomized central estimator: f(x, y) = y - mu_c(x).

    mu_c(x) is a Gaussian draw with standard deviation c * M, where M is
    the largest absolute response seen in the training half.  The draw is
    derived by hashing the exact bit pattern of x together with the fit
    seed: distinct queries get independent draws, repeated queries (and
    thawed copies of the model) always see the same value.
    """

    name = "randomized"
    provides_center = True

    def __init__(self, c=100.0, random_state=None):
        self.c = c
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        if not (math.isfinite(self.c) and self.c > 0):
            raise ValueError(f"c must be a positive finite number, got {self.c!r}")
        self.bound_ = float(np.max(np.abs(y)))
        self.entropy_ = int(np.random.SeedSequence(self.random_state).entropy) % (1 << 128)
        self._cache = {}
        return self

    def _check_fitted(self):
        if not hasattr(self, "bound_"):
            raise RuntimeError("score is not fitted")

    def _draw(self, row_bytes):
        cached = self._cache.get(row_bytes)
        if cached is not None:
            return cached
        digest = hashlib.blake2b(
            self.entropy_.to_bytes(16, "little") + row_bytes, digest_size=8
        ).digest()
        seed = int.from_bytes(digest, "little")
        val = float(np.random.Generator(np.random.PCG64(seed)).normal(
            0.0, self.c * self.bound_))
        self._cache[row_bytes] = val
        return val

    def center(self, X):
        self._check_fitted()
        X = check_matrix(X)
        return np.array([self._draw(row.tobytes()) for row in X])

    def score_lo(self, X, y):
        return np.asarray(y, dtype=float) - self.center(X)

    score_hi = score_lo

    def invert(self, X, t_lo, t_hi):
        mu = self.center(X)
        return mu + t_lo, mu + t_hi

    def to_payload(self):
        self._check_fitted()
        return {
            "score": self.name,
            "c": float(self.c),
            "bound": self.bound_,
            "entropy": self.entropy_,
        }

    @classmethod
    def from_payload(cls, payload):
        score = cls(c=payload["c"])
        score.bound_ = float(payload["bound"])
        score.entropy_ = int(payload["entropy"])
        score._cache = {}
        return score


SCORES = {
    cls.name: cls
    for cls in (ResidualScore, NormalizedScore, CqrScore, CdfScore, LogScore,
                ZeroScore, RandomizedScore)
}


def make_score(name, backend=None, *, gamma=1e-6, c=100.0, cqr_levels=None,
               knn_k=50, random_state=None):
    """Build an unfitted score by registry name.

    ``backend`` is a backend name or estimator for the scores that need
    one; ``cqr_levels`` optionally pins the two quantile levels of the
    two-sided score (otherwise the engine chooses them from its target).
    """
    if isinstance(name, BaseEstimator):
        return clone(name)
    if name not in SCORES:
        raise ValueError(f"unknown score {name!r}; valid scores: {sorted(SCORES)}")
    if name == "zero":
        return ZeroScore()
    if name == "randomized":
        return RandomizedScore(c=c, random_state=random_state)
    model = make_backend(backend if backend is not None else "forest", knn_k=knn_k)
    if name == "normalized":
        return NormalizedScore(backend=model, gamma=gamma, random_state=random_state)
    if name == "cqr":
        lo, hi = (None, None) if cqr_levels is None else cqr_levels
        return CqrScore(backend=model, lo_level=lo, hi_level=hi,
                        random_state=random_state)
    return SCORES[name](backend=model, random_state=random_state)


def score_from_payload(payload):
    """Rebuild a fitted score from its payload."""
    name = payload.get("score")
    if name not in SCORES:
        raise ValueError(f"unknown score payload {name!r}")
    return SCORES[name].from_payload(payload)
