"""k-nearest-neighbor backend with the same conditional-law contract as the forest.

The pooled law at x is the uniform law on the k nearest training
responses (Euclidean distance, ties broken by lowest training-row index),
so quantile / CDF semantics are shared with the forest kernels: each
neighbor response atom gets weight 1/k.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .forest import _cdf_eval, _icdf_eval, _quantile_eval
from .validation import check_consistent, check_feature_count, check_matrix, check_vector

__all__ = ["KNNQuantileBackend"]

_CHUNK = 128


class KNNQuantileBackend(BaseEstimator):
    """Conditional response law estimated from the k nearest neighbors.

    Parameters
    ----------
    k : int, default=50
        Neighborhood size; k equal to the training size reproduces the
        global empirical law at every query point.
    """

    def __init__(self, k=50):
        self.k = k

    def fit(self, X, y):
        X = check_matrix(X)
        y = check_vector(y)
        check_consistent(X, y)
        k = int(self.k)
        if not 1 <= k <= X.shape[0]:
            raise ValueError(f"k must be in 1..{X.shape[0]}, got {k}")
        self._X = X
        self._y = y
        self.atoms_, row_atom = np.unique(y, return_inverse=True)
        self._row_atom = row_atom.astype(np.int64)
        self.n_features_in_ = X.shape[1]
        self._k = k
        return self

    def _check_fitted(self):
        if not hasattr(self, "atoms_"):
            raise RuntimeError("model is not fitted")

    def _prepare(self, X):
        self._check_fitted()
        X = check_matrix(X)
        check_feature_count(X, self.n_features_in_)
        return X

    def _neighbor_atoms(self, Xq):
        """Atom indices of the k nearest training rows, per query row."""
        out = np.empty((Xq.shape[0], self._k), dtype=np.int64)
        for start in range(0, Xq.shape[0], _CHUNK):
            sl = slice(start, min(start + _CHUNK, Xq.shape[0]))
            diff = Xq[sl, None, :] - self._X[None, :, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            # stable sort: exact distance ties resolve to the lowest index
            order = np.argsort(d2, axis=1, kind="stable")[:, : self._k]
            out[sl] = self._row_atom[order]
        return out

    def _pooled_chunks(self, X):
        nbr = self._neighbor_atoms(X)
        w = 1.0 / self._k
        for start in range(0, X.shape[0], _CHUNK):
            sl = slice(start, min(start + _CHUNK, X.shape[0]))
            block = nbr[sl]
            W = np.zeros((block.shape[0], self.atoms_.size))
            rows = np.repeat(np.arange(block.shape[0]), self._k)
            np.add.at(W, (rows, block.ravel()), w)
            yield sl, W, np.cumsum(W, axis=1)

    def predict_mean(self, X):
        X = self._prepare(X)
        nbr = self._neighbor_atoms(X)
        return self.atoms_[nbr].mean(axis=1)

    def predict_quantile(self, X, q):
        """Empirical q-quantile of the k neighbor responses (step inverse)."""
        X = self._prepare(X)
        q = float(q)
        if not 0 <= q <= 1:
            raise ValueError(f"q must be in [0, 1], got {q}")
        out = np.empty(X.shape[0])
        for sl, W, C in self._pooled_chunks(X):
            _quantile_eval(W, C, self.atoms_, q, out[sl])
        return out

    def predict_quantiles(self, X, levels):
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
        X = self._prepare(X)
        ys = np.broadcast_to(np.asarray(y, dtype=np.float64), (X.shape[0],)).copy()
        out = np.empty(X.shape[0])
        for sl, W, C in self._pooled_chunks(X):
            _cdf_eval(W, C, self.atoms_, ys[sl], out[sl])
        return out

    def predict_cdf_inverse(self, X, level):
        X = self._prepare(X)
        levels = np.broadcast_to(np.asarray(level, dtype=np.float64), (X.shape[0],)).copy()
        out = np.empty(X.shape[0])
        for sl, W, C in self._pooled_chunks(X):
            _icdf_eval(W, C, self.atoms_, levels[sl], out[sl])
        return out

    def to_payload(self) -> dict:
        self._check_fitted()
        return {
            "kind": "knn",
            "params": {"k": int(self._k)},
            "n_features": int(self.n_features_in_),
            "X": self._X.tolist(),
            "y": self._y.tolist(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "KNNQuantileBackend":
        if payload.get("kind") != "knn":
            raise ValueError(f"payload kind {payload.get('kind')!r} is not 'knn'")
        model = cls(k=payload["params"]["k"])
        X = np.asarray(payload["X"], dtype=np.float64)
        y = np.asarray(payload["y"], dtype=np.float64)
        return model.fit(X, y)
