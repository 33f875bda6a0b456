"""Closed intervals and split-calibration index arithmetic.

Everything downstream (score inversion, calibration thresholds, the
unconditional median rule) reduces to two order-statistic indices computed
here plus a small interval algebra.  The index arithmetic is exact: levels
are mapped to rationals and the ceiling is taken with integer arithmetic,
so a level such as 0.95 never drifts across an integer boundary the way
naive floating-point ``ceil(level * (n2 + 1))`` does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "Interval",
    "QuantileSpec",
    "BELOW_RANGE",
    "ABOVE_RANGE",
    "upper_calibration_index",
    "lower_calibration_index",
    "kth_smallest",
]

# Extended-index sentinels.  An index that falls off either end of the
# calibration range is not an error: it means the corresponding threshold
# is -inf or +inf and the interval side is unbounded.
BELOW_RANGE = -math.inf
ABOVE_RANGE = math.inf

# Denominator bound used when snapping float levels to exact rationals.
# Large enough that any level meant as a ratio of small integers (0.95,
# 0.975, 0.005 grid points, r*q products of same) is recovered exactly;
# small enough that a deliberately odd level keeps its own value.
_SNAP_DENOMINATOR = 10**6


def _as_fraction(level, name: str) -> Fraction:
    """Exact rational view of a probability level.

    Fractions and ints pass through untouched.  Floats are snapped to the
    nearest fraction with denominator <= 10**6, which undoes binary
    rounding for levels specified as simple ratios (float 0.95 becomes
    19/20, not 0.95000000000000001...) while leaving genuinely irregular
    levels essentially unchanged.
    """
    if isinstance(level, Fraction):
        return level
    if isinstance(level, (int, np.integer)):
        return Fraction(int(level))
    x = float(level)
    if not math.isfinite(x):
        raise ValueError(f"{name} must be finite, got {level!r}")
    return Fraction(x).limit_denominator(_SNAP_DENOMINATOR)


def _check_level(frac: Fraction, name: str) -> Fraction:
    if not (0 < frac < 1):
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {float(frac)!r}")
    return frac


def _check_n2(n2) -> int:
    if not isinstance(n2, (int, np.integer)) or isinstance(n2, bool):
        raise TypeError(f"n2 must be an integer, got {type(n2).__name__}")
    n2 = int(n2)
    if n2 < 1:
        raise ValueError(f"n2 must be at least 1, got {n2}")
    return n2


def upper_calibration_index(n2, level):
    """Rank of the calibration score bounding an interval from above.

    Returns ``ceil(level * (n2 + 1))`` computed exactly, i.e. the smallest
    rank k with k / (n2 + 1) >= level.  When that rank exceeds ``n2`` there
    is no usable calibration score and the ``ABOVE_RANGE`` sentinel is
    returned; the caller maps it to a +inf threshold.

    Parameters
    ----------
    n2 : int
        Number of calibration points.
    level : float or Fraction
        Target level in (0, 1), e.g. ``1 - alpha/2``.

    Returns
    -------
    int or float
        A 1-based rank in ``1..n2``, or ``ABOVE_RANGE``.
    """
    n2 = _check_n2(n2)
    frac = _check_level(_as_fraction(level, "level"), "level")
    k = math.ceil(frac * (n2 + 1))
    if k > n2:
        return ABOVE_RANGE
    return k


def lower_calibration_index(n2, q, r):
    """Rank of the calibration score bounding an interval from below.

    Returns ``ceil(r * q * (n2 + 1) - 1)`` computed exactly.  When the rank
    falls below 1 the ``BELOW_RANGE`` sentinel is returned and the caller
    maps it to a -inf threshold.  The rank never exceeds ``n2`` because
    ``r * q < 1``.

    Parameters
    ----------
    n2 : int
        Number of calibration points.
    q : float or Fraction
        Target quantile in (0, 1).
    r : float or Fraction
        Lower miscoverage budget in (0, 1).

    Returns
    -------
    int or float
        A 1-based rank in ``1..n2``, or ``BELOW_RANGE``.
    """
    n2 = _check_n2(n2)
    qf = _check_level(_as_fraction(q, "q"), "q")
    rf = _check_level(_as_fraction(r, "r"), "r")
    k = math.ceil(qf * rf * (n2 + 1) - 1)
    if k < 1:
        return BELOW_RANGE
    return k


def kth_smallest(values, k):
    """k-th smallest element of a multiset of scores (1-based rank).

    Duplicates keep their multiplicity: each tied value occupies its own
    rank.  The sentinel indices map to the matching infinities so callers
    can feed the result of the index functions straight in.

    Parameters
    ----------
    values : array-like
        Scores; NaN is rejected.
    k : int or sentinel
        1-based rank, ``BELOW_RANGE`` or ``ABOVE_RANGE``.

    Returns
    -------
    float
    """
    if k == BELOW_RANGE:
        return -math.inf
    if k == ABOVE_RANGE:
        return math.inf
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool):
        raise TypeError(f"k must be an integer rank or a range sentinel, got {k!r}")
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"values must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("cannot take an order statistic of an empty multiset")
    if np.isnan(arr).any():
        raise ValueError("scores contain NaN")
    k = int(k)
    if not 1 <= k <= arr.size:
        raise ValueError(f"rank {k} out of range for {arr.size} values")
    return float(np.sort(arr)[k - 1])


@dataclass(frozen=True)
class Interval:
    """Closed interval on the extended real line with a canonical empty state.

    Endpoints may be -inf/+inf for unbounded sides.  The empty interval is
    a distinguished value constructed via :meth:`empty` (both fields NaN);
    it is never represented as ``lo > hi``.
    """

    lo: float
    hi: float

    def __post_init__(self):
        lo = float(self.lo)
        hi = float(self.hi)
        if math.isnan(lo) != math.isnan(hi):
            raise ValueError("both endpoints must be NaN (empty) or neither")
        if not math.isnan(lo) and lo > hi:
            raise ValueError(
                f"lo={lo!r} exceeds hi={hi!r}; use Interval.empty() for an empty interval"
            )
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def empty(cls) -> "Interval":
        """The canonical empty interval."""
        return cls(math.nan, math.nan)

    @classmethod
    def from_bounds(cls, lo, hi) -> "Interval":
        """Build an interval from raw bounds, normalizing crossed bounds to empty."""
        lo = float(lo)
        hi = float(hi)
        if math.isnan(lo) or math.isnan(hi):
            raise ValueError("bounds must not be NaN")
        if lo > hi:
            return cls.empty()
        return cls(lo, hi)

    @property
    def is_empty(self) -> bool:
        return math.isnan(self.lo)

    @property
    def is_finite(self) -> bool:
        """True when nonempty with both endpoints finite."""
        return (not self.is_empty) and math.isfinite(self.lo) and math.isfinite(self.hi)

    @property
    def width(self) -> float:
        """Length of the interval; 0 for empty, inf for unbounded sides."""
        if self.is_empty:
            return 0.0
        return self.hi - self.lo

    def contains(self, y) -> bool:
        """Closed-endpoint membership; always False for the empty interval."""
        if self.is_empty:
            return False
        return bool(self.lo <= y <= self.hi)

    def __str__(self) -> str:
        if self.is_empty:
            return "(empty)"
        return f"[{self.lo}, {self.hi}]"


def _ulp_tolerant_eq(a: float, b: float) -> bool:
    return abs(a - b) <= math.ulp(max(abs(a), abs(b)))


@dataclass(frozen=True)
class QuantileSpec:
    """Target quantile level and the miscoverage split (q, alpha, r, s).

    ``r`` budgets miscoverage below the interval and ``s`` above; they must
    sum to ``alpha``.  The sum is checked exactly on snapped rationals, with
    a one-ulp float fallback so splits computed in floating point
    (e.g. ``r = (1 - q) * alpha``) validate.
    """

    q: float
    alpha: float
    r: float
    s: float

    def __post_init__(self):
        for name in ("q", "alpha", "r", "s"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and 0 < v < 1):
                raise ValueError(f"{name} must lie strictly between 0 and 1, got {v!r}")
            object.__setattr__(self, name, v)
        exact = _as_fraction(self.r, "r") + _as_fraction(self.s, "s") == _as_fraction(
            self.alpha, "alpha"
        )
        if not exact and not _ulp_tolerant_eq(self.r + self.s, self.alpha):
            raise ValueError(
                f"r + s must equal alpha: r={self.r!r}, s={self.s!r}, alpha={self.alpha!r}"
            )

    @classmethod
    def even_split(cls, q, alpha) -> "QuantileSpec":
        """Split the budget evenly: r = s = alpha / 2."""
        alpha = float(alpha)
        return cls(float(q), alpha, alpha / 2, alpha / 2)

    @classmethod
    def proportional_split(cls, q, alpha) -> "QuantileSpec":
        """Split the budget proportionally to the tails: r = (1-q) alpha, s = q alpha."""
        q = float(q)
        alpha = float(alpha)
        return cls(q, alpha, (1 - q) * alpha, q * alpha)

    def lower_index(self, n2):
        """Lower calibration rank for a calibration set of size n2."""
        return lower_calibration_index(n2, self.q, self.r)

    def upper_index(self, n2):
        """Upper calibration rank for a calibration set of size n2."""
        level = 1 - _as_fraction(self.s, "s") * (1 - _as_fraction(self.q, "q"))
        return upper_calibration_index(n2, level)
