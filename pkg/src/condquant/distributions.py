"""Synthetic benchmark distributions with exact conditional quantile oracles.

Each distribution samples (X, y) pairs from a generator and can evaluate
its true conditional q-quantile in closed form, which is what coverage is
measured against.  Quantiles of discrete conditional laws follow the
generalized inverse F^{-1}(q) = inf{y : F(y) >= q}.

The registry ids are the CLI names: "pdelta", "pdelta-q", "p1", "p2", "p3".
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtri

from .validation import check_matrix

__all__ = [
    "TightMedianUniform",
    "TightQuantileUniform",
    "HeteroskedasticQuadratic",
    "MultiplicativeWave",
    "AlternatingSawtooth",
    "DISTRIBUTIONS",
    "make_distribution",
    "two_atom_quantile",
]


def two_atom_quantile(v1, p1, v2, q):
    """Generalized inverse of the law {v1 w.p. p1, v2 w.p. 1 - p1}, vectorized."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.broadcast_to(np.asarray(v2, dtype=float), v1.shape)
    p1 = np.broadcast_to(np.asarray(p1, dtype=float), v1.shape)
    lo = np.where(v1 <= v2, v1, v2)
    lo_mass = np.where(v1 <= v2, p1, 1.0 - p1)
    hi = np.where(v1 <= v2, v2, v1)
    return np.where(q <= lo_mass, lo, hi)


class _Distribution:
    dim = 1

    def _x(self, X):
        X = check_matrix(X)
        if X.shape[1] != self.dim:
            raise ValueError(f"{self.name} expects {self.dim} feature(s), got {X.shape[1]}")
        return X

    def median(self, X):
        return self.true_quantile(X, 0.5)


class TightMedianUniform(_Distribution):
    """Y = X * B with X ~ Unif[-1/2, 1/2] and B ~ Bernoulli(1/2 + delta).

    The conditional median is x, but only barely: the conditional law puts
    mass 1/2 - delta on 0, so for small delta no method can cover the
    median at a rate materially above its nominal level.
    """

    name = "pdelta"

    def __init__(self, delta=0.001):
        delta = float(delta)
        if not 0 < 0.5 + delta < 1:
            raise ValueError(f"delta must keep the success rate inside (0, 1), got {delta}")
        self.delta = delta

    def sample(self, n, rng):
        x = rng.uniform(-0.5, 0.5, size=n)
        b = rng.random(n) < 0.5 + self.delta
        return x.reshape(-1, 1), x * b

    def true_quantile(self, X, q):
        x = self._x(X)[:, 0]
        return two_atom_quantile(x, 0.5 + self.delta, 0.0, float(q))


class TightQuantileUniform(_Distribution):
    """Quantile analog of :class:`TightMedianUniform` for a target level q.

    Y = X * B with B ~ Bernoulli(q + 1[x >= 0] (1 - 2q) + delta), which
    makes the conditional q-quantile exactly x on both sides of zero while
    keeping the law a knife-edge two-atom mixture.
    """

    name = "pdelta-q"

    def __init__(self, q=0.5, delta=0.001):
        q = float(q)
        delta = float(delta)
        if not 0 < q < 1:
            raise ValueError(f"q must lie strictly between 0 and 1, got {q}")
        for branch in (q + delta, 1 - q + delta):
            if not 0 < branch < 1:
                raise ValueError(
                    f"delta={delta} pushes a Bernoulli rate outside (0, 1) at q={q}"
                )
        self.q = q
        self.delta = delta

    def _rate(self, x):
        return self.q + (x >= 0) * (1 - 2 * self.q) + self.delta

    def sample(self, n, rng):
        x = rng.uniform(-0.5, 0.5, size=n)
        b = rng.random(n) < self._rate(x)
        return x.reshape(-1, 1), x * b

    def true_quantile(self, X, q):
        x = self._x(X)[:, 0]
        return two_atom_quantile(x, self._rate(x), 0.0, float(q))


class HeteroskedasticQuadratic(_Distribution):
    """Ten equicorrelated Gaussian features with quadratic mean and growing noise.

    X has unit marginal variances and pairwise covariance 1/4 (one-factor
    construction), and

        Y = (X1 + X2)^2 - X3 + sigma(X) eps,  sigma(x) = 0.1 + 0.25 ||x||^2,

    with standard normal eps, so the conditional q-quantile is
    (x1 + x2)^2 - x3 + sigma(x) Phi^{-1}(q).
    """

    name = "p1"
    dim = 10

    def sample(self, n, rng):
        shared = rng.standard_normal(n)
        own = rng.standard_normal((n, self.dim))
        X = math.sqrt(0.25) * shared[:, None] + math.sqrt(0.75) * own
        eps = rng.standard_normal(n)
        y = self._mean(X) + self._sigma(X) * eps
        return X, y

    @staticmethod
    def _mean(X):
        return (X[:, 0] + X[:, 1]) ** 2 - X[:, 2]

    @staticmethod
    def _sigma(X):
        return 0.1 + 0.25 * (X**2).sum(axis=1)

    def true_quantile(self, X, q):
        X = self._x(X)
        return self._mean(X) + self._sigma(X) * ndtri(float(q))


class MultiplicativeWave(_Distribution):
    """Y = U^{1/4} f(X) with f(x) = 1 + |x| sin^2(x), X ~ Unif[-4 pi, 4 pi].

    U is uniform on [0, 1], so P{Y <= t f(x) | x} = t^4 and the
    conditional q-quantile is q^{1/4} f(x).
    """

    name = "p2"

    @staticmethod
    def _f(x):
        return 1.0 + np.abs(x) * np.sin(x) ** 2

    def sample(self, n, rng):
        x = rng.uniform(-4 * math.pi, 4 * math.pi, size=n)
        u = rng.random(n)
        return x.reshape(-1, 1), u**0.25 * self._f(x)

    def true_quantile(self, X, q):
        x = self._x(X)[:, 0]
        return float(q) ** 0.25 * self._f(x)


class AlternatingSawtooth(_Distribution):
    """Y = B f(X) where f is a sawtooth whose sign flips every cell.

    X ~ Unif[-1, 1], B ~ Bernoulli(1/2 + 2 delta) with delta = 1e-4, and

        f(x) = gamma {M x} - gamma/2 - (-1)^{floor(M x)} (1 - gamma/2)

    with gamma = 0.04, M = 1/gamma = 25 and {r} = r - floor(r) (floor
    semantics, so {r} is in [0, 1) for negative r too).  |f| stays in
    [1 - gamma, 1], the conditional law is the two atoms {0, f(x)}, and
    the slim Bernoulli tilt makes the conditional median exactly f(x).
    Locally constant predictors alias the rapid sign flips, which is what
    drags uncalibrated quantile bands below nominal coverage here.
    """

    name = "p3"

    def __init__(self, delta=1e-4, gamma=0.04):
        delta = float(delta)
        gamma = float(gamma)
        if not 0 < 0.5 + 2 * delta < 1:
            raise ValueError(f"delta must keep the success rate inside (0, 1), got {delta}")
        if not 0 < gamma < 1:
            raise ValueError(f"gamma must lie strictly between 0 and 1, got {gamma}")
        self.delta = delta
        self.gamma = gamma
        self.cells = int(round(1.0 / gamma))

    def wave(self, x):
        r = self.cells * np.asarray(x, dtype=float)
        whole = np.floor(r)
        frac = r - whole
        sign = np.where(np.mod(whole, 2) == 0, 1.0, -1.0)
        return self.gamma * frac - self.gamma / 2 - sign * (1 - self.gamma / 2)

    def sample(self, n, rng):
        x = rng.uniform(-1.0, 1.0, size=n)
        b = rng.random(n) < 0.5 + 2 * self.delta
        return x.reshape(-1, 1), b * self.wave(x)

    def true_quantile(self, X, q):
        x = self._x(X)[:, 0]
        return two_atom_quantile(self.wave(x), 0.5 + 2 * self.delta, 0.0, float(q))


DISTRIBUTIONS = {
    cls.name: cls
    for cls in (TightMedianUniform, TightQuantileUniform, HeteroskedasticQuadratic,
                MultiplicativeWave, AlternatingSawtooth)
}


def make_distribution(name, *, delta=None, q=0.5):
    """Build a distribution by registry id.

    ``delta`` applies to the knife-edge families ("pdelta", "pdelta-q");
    ``q`` sets the target level of "pdelta-q".
    """
    if name not in DISTRIBUTIONS:
        raise ValueError(
            f"unknown distribution {name!r}; valid distributions: {sorted(DISTRIBUTIONS)}"
        )
    if name == "pdelta":
        return TightMedianUniform(0.001 if delta is None else delta)
    if name == "pdelta-q":
        return TightQuantileUniform(q=q, delta=0.001 if delta is None else delta)
    return DISTRIBUTIONS[name]()
