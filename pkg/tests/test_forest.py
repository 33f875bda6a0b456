"""Quantile forest: kernel math against hand-computed laws, then behavior.

The kernel oracles fix a pooled weight table by hand and check quantile,
CDF, and inverse-CDF evaluation against values computed on paper for the
three-atom law (atoms 1, 2, 4 with weights 0.2, 0.5, 0.3) and a law with
a zero-weight hole in the middle.
"""

import json

import numpy as np
import pytest

from condquant import QuantileForest
from condquant.forest import _cdf_eval, _icdf_eval, _quantile_eval


def _law(weights):
    W = np.asarray([weights], dtype=np.float64)
    return W, np.cumsum(W, axis=1)


def _q(W, C, atoms, q):
    out = np.empty(1)
    _quantile_eval(W, C, np.asarray(atoms, dtype=np.float64), q, out)
    return out[0]

def _cdf(W, C, atoms, y):
    out = np.empty(1)
    _cdf_eval(W, C, np.asarray(atoms, dtype=np.float64), np.asarray([y], dtype=np.float64), out)
    return out[0]

def _icdf(W, C, atoms, p):
    out = np.empty(1)
    _icdf_eval(W, C, np.asarray(atoms, dtype=np.float64), np.asarray([p], dtype=np.float64), out)
    return out[0]


ATOMS = [1.0, 2.0, 4.0]


def test_quantile_kernel_three_atom_law():
    W, C = _law([0.2, 0.5, 0.3])
    assert _q(W, C, ATOMS, 0.0) == 1.0
    assert _q(W, C, ATOMS, 0.1) == 1.0
    assert _q(W, C, ATOMS, 0.2) == 1.0  # boundary: cumulative exactly q
    assert _q(W, C, ATOMS, 0.21) == 2.0
    assert _q(W, C, ATOMS, 0.7) == 2.0
    assert _q(W, C, ATOMS, 0.71) == 4.0
    assert _q(W, C, ATOMS, 1.0) == 4.0


def test_quantile_kernel_skips_zero_weight_atoms():
    W, C = _law([0.0, 0.6, 0.4])
    assert _q(W, C, ATOMS, 0.0) == 2.0  # smallest pooled atom, not atoms[0]
    W, C = _law([0.5, 0.0, 0.5])
    assert _q(W, C, ATOMS, 0.5) == 1.0
    assert _q(W, C, ATOMS, 0.6) == 4.0


def test_cdf_kernel_piecewise_linear_values():
    W, C = _law([0.2, 0.5, 0.3])
    assert _cdf(W, C, ATOMS, 0.5) == 0.0      # below the support
    assert _cdf(W, C, ATOMS, 1.0) == 0.2      # jump at the first atom
    assert _cdf(W, C, ATOMS, 1.5) == pytest.approx(0.45, abs=1e-12)
    assert _cdf(W, C, ATOMS, 2.0) == pytest.approx(0.7, abs=1e-12)
    assert _cdf(W, C, ATOMS, 3.0) == pytest.approx(0.85, abs=1e-12)
    assert _cdf(W, C, ATOMS, 4.0) == pytest.approx(1.0, abs=1e-12)
    assert _cdf(W, C, ATOMS, 99.0) == 1.0


def test_cdf_kernel_interpolates_across_holes():
    W, C = _law([0.5, 0.0, 0.5])
    assert _cdf(W, C, ATOMS, 2.0) == pytest.approx(0.5 + 0.5 / 3, abs=1e-12)
    assert _cdf(W, C, ATOMS, 2.5) == pytest.approx(0.75, abs=1e-12)


def test_icdf_kernel_inverts_the_interpolated_cdf():
    W, C = _law([0.2, 0.5, 0.3])
    assert _icdf(W, C, ATOMS, 0.45) == pytest.approx(1.5, abs=1e-12)
    assert _icdf(W, C, ATOMS, 0.85) == pytest.approx(3.0, abs=1e-12)
    assert _icdf(W, C, ATOMS, 0.1) == 1.0   # clamps to the smallest pooled atom
    assert _icdf(W, C, ATOMS, 0.0) == 1.0
    assert _icdf(W, C, ATOMS, 1.0) == 4.0
    assert _icdf(W, C, ATOMS, -3.0) == 1.0  # out-of-range levels clamp
    assert _icdf(W, C, ATOMS, 2.0) == 4.0
    W, C = _law([0.5, 0.0, 0.5])
    assert _icdf(W, C, ATOMS, 0.75) == pytest.approx(2.5, abs=1e-12)


def test_icdf_cdf_round_trip_on_random_laws():
    rng = np.random.default_rng(3)
    for _ in range(20):
        w = rng.dirichlet(np.ones(6))
        atoms = np.sort(rng.normal(size=6))
        W = w[None, :]
        C = np.cumsum(W, axis=1)
        for p in [0.9999, 0.73, 0.41, 0.999]:
            if p <= C[0, 0]:
                continue
            y = _icdf(W, C, atoms, p)
            assert _cdf(W, C, atoms, y) == pytest.approx(p, abs=1e-9)


def _toy(n=400, d=2, seed=0, noise=0.05):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, d))
    y = 3.0 * X[:, 0] + noise * rng.normal(size=n)
    return X, y


def test_forest_constant_response_is_degenerate():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 2))
    y = np.full(60, 7.0)
    model = QuantileForest(n_estimators=10, min_samples_leaf=5, random_state=0).fit(X, y)
    Xt = rng.normal(size=(9, 2))
    for q in [0.0, 0.3, 1.0]:
        assert np.all(model.predict_quantile(Xt, q) == 7.0)
    assert np.all(model.predict_mean(Xt) == 7.0)
    assert np.all(model.predict_cdf(Xt, 7.0) == 1.0)
    assert np.all(model.predict_cdf(Xt, 6.9) == 0.0)
    assert np.all(model.predict_cdf_inverse(Xt, 0.5) == 7.0)


def test_forest_recovers_a_linear_median():
    X, y = _toy(n=1500, seed=5)
    model = QuantileForest(n_estimators=50, min_samples_leaf=10, random_state=2).fit(X, y)
    rng = np.random.default_rng(6)
    Xt = rng.uniform(-0.8, 0.8, size=(100, 2))
    med = model.predict_quantile(Xt, 0.5)
    # leaf granularity dominates the error budget here, not the noise
    assert np.max(np.abs(med - 3.0 * Xt[:, 0])) < 0.6
    assert np.mean(np.abs(med - 3.0 * Xt[:, 0])) < 0.2


def test_forest_quantiles_monotone_in_level():
    X, y = _toy(n=500, seed=7, noise=0.5)
    model = QuantileForest(n_estimators=20, min_samples_leaf=10, random_state=1).fit(X, y)
    Xt = np.random.default_rng(8).uniform(-1, 1, size=(40, 2))
    levels = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]
    qs = model.predict_quantiles(Xt, levels)
    assert np.all(np.diff(qs, axis=1) >= 0)
    # the batch call agrees with one-level calls
    for j, q in enumerate(levels):
        assert np.array_equal(qs[:, j], model.predict_quantile(Xt, q))


def test_forest_cdf_monotone_and_consistent_with_quantiles():
    X, y = _toy(n=500, seed=9, noise=0.5)
    model = QuantileForest(n_estimators=20, min_samples_leaf=10, random_state=4).fit(X, y)
    Xt = np.random.default_rng(10).uniform(-1, 1, size=(25, 2))
    grid = np.linspace(y.min() - 1, y.max() + 1, 50)
    vals = np.stack([model.predict_cdf(Xt, g) for g in grid])
    assert np.all(vals >= 0) and np.all(vals <= 1)
    assert np.all(np.diff(vals, axis=0) >= -1e-12)
    for q in [0.1, 0.5, 0.9]:
        yq = model.predict_quantile(Xt, q)
        assert np.all(model.predict_cdf(Xt, yq) >= q - 1e-9)


def test_forest_pooled_weights_sum_to_one():
    X, y = _toy(n=300, seed=11)
    model = QuantileForest(n_estimators=15, min_samples_leaf=5, random_state=3).fit(X, y)
    Xt = np.random.default_rng(12).uniform(-1, 1, size=(17, 2))
    for _, W, C in model._pooled_chunks(Xt):
        assert np.allclose(W.sum(axis=1), 1.0, atol=1e-9)
        assert np.allclose(C[:, -1], 1.0, atol=1e-9)


def test_forest_deterministic_given_seed():
    X, y = _toy(n=400, seed=13, noise=0.3)
    Xt = np.random.default_rng(14).uniform(-1, 1, size=(30, 2))
    a = QuantileForest(n_estimators=12, min_samples_leaf=5, random_state=42).fit(X, y)
    b = QuantileForest(n_estimators=12, min_samples_leaf=5, random_state=42).fit(X, y)
    assert np.array_equal(a.predict_quantile(Xt, 0.3), b.predict_quantile(Xt, 0.3))
    assert np.array_equal(a.predict_mean(Xt), b.predict_mean(Xt))
    c = QuantileForest(n_estimators=12, min_samples_leaf=5, random_state=43).fit(X, y)
    assert not np.array_equal(a.predict_quantile(Xt, 0.3), c.predict_quantile(Xt, 0.3))


def test_forest_payload_round_trip_through_json():
    X, y = _toy(n=300, seed=15, noise=0.3)
    Xt = np.random.default_rng(16).uniform(-1, 1, size=(20, 2))
    model = QuantileForest(n_estimators=10, min_samples_leaf=5, random_state=7).fit(X, y)
    payload = json.loads(json.dumps(model.to_payload()))
    back = QuantileForest.from_payload(payload)
    assert np.array_equal(back.predict_quantile(Xt, 0.5), model.predict_quantile(Xt, 0.5))
    assert np.array_equal(back.predict_cdf(Xt, 0.7), model.predict_cdf(Xt, 0.7))
    assert np.array_equal(back.predict_cdf_inverse(Xt, 0.9),
                          model.predict_cdf_inverse(Xt, 0.9))
    assert np.array_equal(back.predict_mean(Xt), model.predict_mean(Xt))


def test_forest_input_validation():
    X, y = _toy(n=100, seed=17)
    model = QuantileForest(n_estimators=5, min_samples_leaf=5, random_state=0)
    with pytest.raises(RuntimeError):
        model.predict_quantile(X, 0.5)
    model.fit(X, y)
    with pytest.raises(ValueError):
        model.predict_quantile(X, 1.5)
    with pytest.raises(ValueError):
        model.predict_quantile(np.ones((4, 3)), 0.5)  # feature-count mismatch
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        model.predict_quantile(bad, 0.5)
    with pytest.raises(ValueError):
        QuantileForest(max_features=9).fit(X, y)


def test_forest_accepts_one_dimensional_features():
    rng = np.random.default_rng(18)
    x = rng.uniform(-1, 1, size=200)
    y = np.sign(x) + 0.01 * rng.normal(size=200)
    model = QuantileForest(n_estimators=20, min_samples_leaf=5, random_state=1).fit(x, y)
    med = model.predict_quantile(np.array([[-0.7], [0.7]]), 0.5)
    assert med[0] < 0 < med[1]
