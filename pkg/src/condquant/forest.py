"""Quantile regression forest backend.

Trees are grown with scikit-learn (bootstrap resampling and feature
subsampling seeded from a single master seed), then flattened into plain
node arrays.  Everything after that is in-house: every training row is
routed to exactly one leaf per tree, leaves keep the sorted responses that
reach them, and predictions pool those responses across trees with
Meinshausen leaf weights (each member of the leaf containing x gets weight
1 / (n_trees * leaf size)).  The pooled weighted law yields the
conditional mean, empirical quantiles, and a piecewise-linear CDF with a
generalized inverse.

A fitted model is a set of flat numpy arrays, so it serializes to a plain
payload and a thawed model predicts without scikit-learn in the loop.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator
from sklearn.ensemble import RandomForestRegressor

from .validation import check_consistent, check_feature_count, check_matrix, check_vector

__all__ = ["QuantileForest"]

# Tolerance for comparing cumulative pooled weights against a level; the
# cumulative sums carry O(1e-13) float noise, levels are exact.
_CUM_TOL = 1e-12

_CHUNK = 512


@njit(cache=True)
def _route(X, feature, threshold, left, right, offsets):
    # Walk each point down each tree; split rule is x[feature] <= threshold.
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.empty((n, n_trees), dtype=np.int64)
    for t in range(n_trees):
        base = offsets[t]
        for i in range(n):
            node = 0
            while left[base + node] != -1:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[i, t] = node
    return out


@njit(cache=True)
def _atom_weights(leafpos, starts, counts, members_atom, n_atoms):
    # Pooled weight of each response atom for each query row.
    n, n_trees = leafpos.shape
    inv_t = 1.0 / n_trees
    W = np.zeros((n, n_atoms), dtype=np.float64)
    for i in range(n):
        for t in range(n_trees):
            p = leafpos[i, t]
            s = starts[p]
            w = inv_t / counts[p]
            for m in range(s, s + counts[p]):
                W[i, members_atom[m]] += w
    return W


@njit(cache=True)
def _quantile_eval(W, C, atoms, q, out):
    # Smallest pooled atom whose cumulative weight reaches q (step inverse).
    n, m = W.shape
    for i in range(n):
        if q <= 0.0:
            j = 0
            while j < m - 1 and W[i, j] == 0.0:
                j += 1
            out[i] = atoms[j]
            continue
        j = 0
        while j < m - 1 and C[i, j] < q - _CUM_TOL:
            j += 1
        out[i] = atoms[j]


@njit(cache=True)
def _cdf_eval(W, C, atoms, ys, out):
    # Piecewise-linear CDF through the pooled atoms (knots at cumulative
    # weights), zero below the first pooled atom, one above the last.
    n, m = W.shape
    for i in range(n):
        y0 = ys[i]
        j = np.searchsorted(atoms, y0, side="right") - 1
        if j < 0:
            out[i] = 0.0
            continue
        p = j
        while p >= 0 and W[i, p] == 0.0:
            p -= 1
        if p < 0:
            out[i] = 0.0
            continue
        pn = j + 1
        while pn < m and W[i, pn] == 0.0:
            pn += 1
        if pn >= m:
            out[i] = min(C[i, p], 1.0)
            continue
        frac = (y0 - atoms[p]) / (atoms[pn] - atoms[p])
        out[i] = min(C[i, p] + frac * (C[i, pn] - C[i, p]), 1.0)


@njit(cache=True)
def _icdf_eval(W, C, atoms, levels, out):
    # Generalized inverse of the piecewise-linear CDF; levels are clamped
    # to the pooled support, flat spots resolve to the leftmost attaining y.
    n, m = W.shape
    for i in range(n):
        p_lvl = levels[i]
        if p_lvl < 0.0:
            p_lvl = 0.0
        elif p_lvl > 1.0:
            p_lvl = 1.0
        a0 = 0
        while a0 < m - 1 and W[i, a0] == 0.0:
            a0 += 1
        if p_lvl <= C[i, a0]:
            out[i] = atoms[a0]
            continue
        prev = a0
        found = -1
        j = a0 + 1
        while j < m:
            if W[i, j] > 0.0:
                if C[i, j] >= p_lvl - _CUM_TOL:
                    found = j
                    break
                prev = j
            j += 1
        if found == -1:
            out[i] = atoms[prev]
            continue
        ratio = (p_lvl - C[i, prev]) / (C[i, found] - C[i, prev])
        if ratio < 0.0:
            ratio = 0.0
        elif ratio > 1.0:
            ratio = 1.0
        out[i] = atoms[prev] + ratio * (atoms[found] - atoms[prev])


class QuantileForest(BaseEstimator):
    """Random forest whose leaves carry full conditional response laws.

    Parameters
    ----------
    n_estimators : int, default=100
        Number of trees.
    min_samples_leaf : int, default=20
        Minimum number of (bootstrap) samples per leaf.
    max_features : int or None, default=None
        Features considered per split; None means ceil(d / 3), at least 1.
    random_state : int or None, default=None
        Master seed.  All bootstrap and feature-subsampling randomness is
        derived from it, so a fitted forest is reproducible.

    Examples
    --------
    >>> rng = np.random.default_rng(7)
    >>> X = rng.uniform(-1, 1, size=(500, 2))
    >>> y = 3.0 * X[:, 0] + rng.normal(scale=0.1, size=500)
    >>> model = QuantileForest(random_state=0).fit(X, y)
    >>> float(np.round(model.predict_quantile(np.array([[0.5, 0.0]]), 0.5)[0], 1))
    1.5
    """

    def __init__(self, n_estimators=100, min_samples_leaf=20, max_features=None,
                 random_state=None):
        self.n_estimators = n_estimators
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.random_state = random_state

    # ------------------------------------------------------------------ fit

    def fit(self, X, y):
        X = check_matrix(X)
        y = check_vector(y)
        check_consistent(X, y)
        d = X.shape[1]
        if self.max_features is None:
            max_features = max(1, math.ceil(d / 3))
        else:
            max_features = int(self.max_features)
            if not 1 <= max_features <= d:
                raise ValueError(f"max_features must be in 1..{d}, got {max_features}")

        seed = np.random.SeedSequence(self.random_state).generate_state(1)[0]
        rf = RandomForestRegressor(
            n_estimators=int(self.n_estimators),
            min_samples_leaf=int(self.min_samples_leaf),
            max_features=max_features,
            bootstrap=True,
            random_state=int(seed),
            n_jobs=1,
        )
        rf.fit(X, y)

        # Flatten the fitted trees into concatenated node arrays.
        feats, threshs, lefts, rights, offsets = [], [], [], [], [0]
        for est in rf.estimators_:
            tr = est.tree_
            feats.append(tr.feature.astype(np.int64))
            threshs.append(tr.threshold.astype(np.float64))
            lefts.append(tr.children_left.astype(np.int64))
            rights.append(tr.children_right.astype(np.int64))
            offsets.append(offsets[-1] + tr.node_count)
        self._feature = np.concatenate(feats)
        self._threshold = np.concatenate(threshs)
        self._left = np.concatenate(lefts)
        self._right = np.concatenate(rights)
        self._node_offsets = np.asarray(offsets, dtype=np.int64)

        self.atoms_, row_atom = np.unique(y, return_inverse=True)
        row_atom = row_atom.astype(np.int64)
        self._build_leaf_tables(X, y, row_atom)
        self.n_features_in_ = d
        self.n_samples_ = X.shape[0]
        return self

    def _build_leaf_tables(self, X, y, row_atom):
        """Route every training row through every tree and group by leaf."""
        node_ids = _route(X, self._feature, self._threshold, self._left,
                          self._right, self._node_offsets)
        n_trees = node_ids.shape[1]
        keys, starts, counts, means, members = [], [], [], [], []
        leaf_offsets = [0]
        pos = 0
        for t in range(n_trees):
            ids = node_ids[:, t]
            order = np.argsort(ids, kind="stable")
            uniq, first = np.unique(ids[order], return_index=True)
            cnt = np.diff(np.append(first, ids.size))
            keys.append(uniq)
            starts.append(first + pos)
            counts.append(cnt)
            sums = np.add.reduceat(y[order], first)
            means.append(sums / cnt)
            members.append(row_atom[order])
            pos += ids.size
            leaf_offsets.append(leaf_offsets[-1] + uniq.size)
        self._leaf_keys = np.concatenate(keys)
        self._leaf_starts = np.concatenate(starts).astype(np.int64)
        self._leaf_counts = np.concatenate(counts).astype(np.int64)
        self._leaf_means = np.concatenate(means)
        self._members_atom = np.concatenate(members)
        self._leaf_offsets = np.asarray(leaf_offsets, dtype=np.int64)
        self._n_trees = n_trees

    # -------------------------------------------------------------- predict

    def _check_fitted(self):
        if not hasattr(self, "atoms_"):
            raise RuntimeError("model is not fitted")

    def _leaf_positions(self, X):
        """Global leaf-table positions of each query in each tree."""
        node_ids = _route(X, self._feature, self._threshold, self._left,
                          self._right, self._node_offsets)
        pos = np.empty_like(node_ids)
        for t in range(self._n_trees):
            lo, hi = self._leaf_offsets[t], self._leaf_offsets[t + 1]
            tree_keys = self._leaf_keys[lo:hi]
            p = np.searchsorted(tree_keys, node_ids[:, t])
            # every reachable leaf holds at least one training row
            if (p >= tree_keys.size).any() or (tree_keys[np.minimum(p, tree_keys.size - 1)]
                                               != node_ids[:, t]).any():
                raise RuntimeError("query reached a leaf with no training rows")
            pos[:, t] = lo + p
        return pos

    def _prepare(self, X):
        self._check_fitted()
        X = check_matrix(X)
        check_feature_count(X, self.n_features_in_)
        return X

    def predict_mean(self, X):
        """Average over trees of the leaf-mean response at each query."""
        X = self._prepare(X)
        pos = self._leaf_positions(X)
        return self._leaf_means[pos].mean(axis=1)

    def _pooled_chunks(self, X):
        pos = self._leaf_positions(X)
        for start in range(0, X.shape[0], _CHUNK):
            sl = slice(start, min(start + _CHUNK, X.shape[0]))
            W = _atom_weights(pos[sl], self._leaf_starts, self._leaf_counts,
                              self._members_atom, self.atoms_.size)
            yield sl, W, np.cumsum(W, axis=1)

    def predict_quantile(self, X, q):
        """Weighted empirical q-quantile of the pooled leaf responses.

        Nondecreasing in q by construction; q=0 gives the smallest pooled
        response at x and q=1 the largest.
        """
        X = self._prepare(X)
        q = float(q)
        if not 0 <= q <= 1:
            raise ValueError(f"q must be in [0, 1], got {q}")
        out = np.empty(X.shape[0])
        for sl, W, C in self._pooled_chunks(X):
            _quantile_eval(W, C, self.atoms_, q, out[sl])
        return out

    def predict_quantiles(self, X, levels):
        """Several quantile levels in one pooling pass; returns (n, len(levels))."""
        X = self._prepare(X)
        levels = [float(q) for q in levels]
        if any(not 0 <= q <= 1 for q in levels):
            raise ValueError("quantile levels must be in [0, 1]")
        out = np.empty((X.shape[0], len(levels)))
        for sl, W, C in self._pooled_chunks(X):
            for j, q in enumerate(levels):
                _quantile_eval(W, C, self.atoms_, q, out[sl, j])
        return out

    def predict_cdf(self, X, y):
        """Conditional CDF value at y, linearly interpolated between pooled atoms.

        y may be a scalar or one value per query row.
        """
        X = self._prepare(X)
        ys = np.broadcast_to(np.asarray(y, dtype=np.float64), (X.shape[0],)).copy()
        out = np.empty(X.shape[0])
        for sl, W, C in self._pooled_chunks(X):
            _cdf_eval(W, C, self.atoms_, ys[sl], out[sl])
        return out

    def predict_cdf_inverse(self, X, level):
        """Generalized inverse of the interpolated conditional CDF.

        Levels are clamped to [0, 1]; 0 maps to the smallest pooled
        response and 1 to the largest, so the output always lies in the
        pooled conditional support.  level may be a scalar or per-row.
        """
        X = self._prepare(X)
        levels = np.broadcast_to(np.asarray(level, dtype=np.float64), (X.shape[0],)).copy()
        out = np.empty(X.shape[0])
        for sl, W, C in self._pooled_chunks(X):
            _icdf_eval(W, C, self.atoms_, levels[sl], out[sl])
        return out

    # ------------------------------------------------------------ freeze/thaw

    def to_payload(self) -> dict:
        """Plain-data snapshot of the fitted model (lists and scalars only)."""
        self._check_fitted()
        return {
            "kind": "forest",
            "params": {
                "n_estimators": int(self.n_estimators),
                "min_samples_leaf": int(self.min_samples_leaf),
                "max_features": None if self.max_features is None else int(self.max_features),
                "random_state": None if self.random_state is None else int(self.random_state),
            },
            "n_features": int(self.n_features_in_),
            "n_samples": int(self.n_samples_),
            "n_trees": int(self._n_trees),
            "atoms": self.atoms_.tolist(),
            "node_offsets": self._node_offsets.tolist(),
            "feature": self._feature.tolist(),
            "threshold": self._threshold.tolist(),
            "left": self._left.tolist(),
            "right": self._right.tolist(),
            "leaf_offsets": self._leaf_offsets.tolist(),
            "leaf_keys": self._leaf_keys.tolist(),
            "leaf_starts": self._leaf_starts.tolist(),
            "leaf_counts": self._leaf_counts.tolist(),
            "leaf_means": self._leaf_means.tolist(),
            "members_atom": self._members_atom.tolist(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "QuantileForest":
        if payload.get("kind") != "forest":
            raise ValueError(f"payload kind {payload.get('kind')!r} is not 'forest'")
        p = payload["params"]
        model = cls(**p)
        model.n_features_in_ = int(payload["n_features"])
        model.n_samples_ = int(payload["n_samples"])
        model._n_trees = int(payload["n_trees"])
        model.atoms_ = np.asarray(payload["atoms"], dtype=np.float64)
        model._node_offsets = np.asarray(payload["node_offsets"], dtype=np.int64)
        model._feature = np.asarray(payload["feature"], dtype=np.int64)
        model._threshold = np.asarray(payload["threshold"], dtype=np.float64)
        model._left = np.asarray(payload["left"], dtype=np.int64)
        model._right = np.asarray(payload["right"], dtype=np.int64)
        model._leaf_offsets = np.asarray(payload["leaf_offsets"], dtype=np.int64)
        model._leaf_keys = np.asarray(payload["leaf_keys"], dtype=np.int64)
        model._leaf_starts = np.asarray(payload["leaf_starts"], dtype=np.int64)
        model._leaf_counts = np.asarray(payload["leaf_counts"], dtype=np.int64)
        model._leaf_means = np.asarray(payload["leaf_means"], dtype=np.float64)
        model._members_atom = np.asarray(payload["members_atom"], dtype=np.int64)
        return model
