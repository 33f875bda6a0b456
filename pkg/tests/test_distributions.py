"""Distribution oracles: closed forms against enumeration and simulation.

Two independent routes validate every ``true_quantile``: discrete laws are
re-derived by enumerating their two atoms and scanning the cumulative
masses, continuous laws by recomputing the documented closed form and by
large-sample simulation.  The universal sandwich
``P{Y < F^{-1}(q)} <= q <= P{Y <= F^{-1}(q)}`` ties sampling and quantile
evaluation together for every family at once.
"""

import math

import numpy as np
import pytest
import scipy.stats

from condquant import make_distribution, two_atom_quantile
from condquant.distributions import AlternatingSawtooth, TightQuantileUniform


def brute_two_atom(v1, p1, v2, q):
    # direct generalized inverse: sort the support, scan cumulative mass
    support = sorted([(v1, p1), (v2, 1.0 - p1)])
    cum = 0.0
    for value, mass in support:
        cum += mass
        if q <= cum + 1e-15:
            return value
    return support[-1][0]


def test_two_atom_quantile_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(300):
        v1 = rng.normal()
        v2 = rng.normal()
        p1 = rng.uniform(0.01, 0.99)
        for q in [0.001, 0.25, 0.5, 0.75, 0.999, p1]:
            got = two_atom_quantile(np.array([v1]), p1, v2, q)[0]
            assert got == brute_two_atom(v1, p1, v2, q), (v1, p1, v2, q)


def test_two_atom_quantile_boundary_mass():
    # exactly at the lower mass the generalized inverse stays on the low atom
    assert two_atom_quantile(np.array([-1.0]), 0.6, 0.0, 0.6)[0] == -1.0
    assert two_atom_quantile(np.array([-1.0]), 0.6, 0.0, 0.60001)[0] == 0.0
    # ordering of the atom arguments must not matter; mass 0.7 sits on 0.0
    a = two_atom_quantile(np.array([2.0]), 0.3, 0.0, 0.5)[0]
    b = two_atom_quantile(np.array([0.0]), 0.7, 2.0, 0.5)[0]
    assert a == b == 0.0
    # and with the majority mass on the nonzero atom the median moves there
    a = two_atom_quantile(np.array([2.0]), 0.7, 0.0, 0.5)[0]
    b = two_atom_quantile(np.array([0.0]), 0.3, 2.0, 0.5)[0]
    assert a == b == 2.0


# ------------------------------------------------------------ per-family laws


def test_pdelta_median_is_x():
    dist = make_distribution("pdelta", delta=0.001)
    x = np.linspace(-0.5, 0.5, 41).reshape(-1, 1)
    assert np.array_equal(dist.median(x), x[:, 0])
    # with the tilt pushed below half, P{Y = x} = 0.499 < 0.5 everywhere
    # and the generalized-inverse median flips to the zero atom
    flipped = TightQuantileUniform(q=0.5, delta=-0.001)
    got = flipped.true_quantile(np.array([[0.3], [-0.3]]), 0.5)
    assert got[0] == 0.0 and got[1] == 0.0


def test_pdelta_q_rate_and_quantile():
    dist = make_distribution("pdelta-q", q=0.1, delta=0.001)
    assert dist._rate(np.array([-0.2]))[0] == pytest.approx(0.101)
    assert dist._rate(np.array([0.2]))[0] == pytest.approx(0.901)
    # the target quantile is x on both sides of zero
    x = np.array([[-0.4], [-0.01], [0.01], [0.4]])
    assert np.array_equal(dist.true_quantile(x, 0.1), x[:, 0])
    with pytest.raises(ValueError, match="rate"):
        TightQuantileUniform(q=0.01, delta=-0.05)


def test_p1_closed_form_against_norm_ppf():
    dist = make_distribution("p1")
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 10))
    for q in [0.1, 0.5, 0.9]:
        mean = (X[:, 0] + X[:, 1]) ** 2 - X[:, 2]
        sigma = 0.1 + 0.25 * (X**2).sum(axis=1)
        expect = scipy.stats.norm.ppf(q, loc=mean, scale=sigma)
        assert np.allclose(dist.true_quantile(X, q), expect, rtol=0, atol=1e-10)


def test_p1_feature_covariance_structure():
    dist = make_distribution("p1")
    X, _ = dist.sample(200_000, np.random.default_rng(2))
    cov = np.cov(X, rowvar=False)
    assert np.allclose(np.diag(cov), 1.0, atol=0.02)
    off = cov[~np.eye(10, dtype=bool)]
    assert np.allclose(off, 0.25, atol=0.02)


def test_p2_closed_form_and_support():
    dist = make_distribution("p2")
    x = np.array([[0.0], [1.0], [-7.5], [4 * math.pi]])
    f = 1.0 + np.abs(x[:, 0]) * np.sin(x[:, 0]) ** 2
    for q in [0.2, 0.5, 0.9]:
        assert np.allclose(dist.true_quantile(x, q), q**0.25 * f, atol=1e-12)
    X, y = dist.sample(10_000, np.random.default_rng(3))
    assert np.all(y >= 0)
    assert np.all(np.abs(X[:, 0]) <= 4 * math.pi)
    # Y / f(x) must be distributed as U^{1/4}
    ratio = y / (1.0 + np.abs(X[:, 0]) * np.sin(X[:, 0]) ** 2)
    ks = scipy.stats.kstest(ratio**4, "uniform")
    assert ks.pvalue > 1e-4


def test_p3_wave_shape():
    dist = AlternatingSawtooth()
    assert dist.cells == 25
    assert dist.wave(np.array([0.0]))[0] == -1.0
    x = np.random.default_rng(4).uniform(-1, 1, size=5000)
    f = dist.wave(x)
    assert np.all(np.abs(f) >= 1 - dist.gamma - 1e-12)
    assert np.all(np.abs(f) <= 1.0 + 1e-12)
    # adjacent cells carry opposite signs; x and x + 1/25 land in
    # neighboring cells whenever neither sits on a boundary
    inner = x[(np.abs(25 * x - np.round(25 * x)) > 1e-3)
              & (np.abs(25 * (x + 0.04) - np.round(25 * (x + 0.04))) > 1e-3)]
    assert np.all(np.sign(dist.wave(inner)) == -np.sign(dist.wave(inner + 0.04)))
    # period two cells
    assert np.allclose(dist.wave(x + 0.08), dist.wave(x), atol=1e-9)


def test_p3_median_is_the_wave_and_samples_hit_the_atoms():
    dist = make_distribution("p3")
    x = np.random.default_rng(5).uniform(-1, 1, size=(300, 1))
    assert np.array_equal(dist.median(x), dist.wave(x[:, 0]))
    X, y = dist.sample(20_000, np.random.default_rng(6))
    w = dist.wave(X[:, 0])
    # every draw is exactly one of the two atoms
    assert np.all((y == 0.0) | (y == w))
    rate = np.mean(y != 0.0)
    assert abs(rate - (0.5 + 2 * dist.delta)) < 4 * math.sqrt(0.25 / 20_000)


@pytest.mark.parametrize("name", ["pdelta", "pdelta-q", "p1", "p2", "p3"])
@pytest.mark.parametrize("q", [0.25, 0.5, 0.9])
def test_sampling_and_quantiles_satisfy_the_sandwich(name, q):
    # P{Y < F^-1(q)} <= q <= P{Y <= F^-1(q)}, marginally over X
    dist = make_distribution(name, delta=0.001, q=q)
    n = 200_000
    seed = int.from_bytes(name.encode(), "little") % (1 << 31) + int(q * 100)
    X, y = dist.sample(n, np.random.default_rng(seed))
    qx = dist.true_quantile(X, q)
    se = 4 * math.sqrt(q * (1 - q) / n)
    assert np.mean(y <= qx + 1e-12) >= q - se
    assert np.mean(y < qx - 1e-12) <= q + se


def test_make_distribution_registry():
    with pytest.raises(ValueError, match="valid distributions"):
        make_distribution("p9")
    assert make_distribution("pdelta", delta=0.01).delta == 0.01
    assert make_distribution("pdelta-q", q=0.25).q == 0.25
    dist = make_distribution("p1")
    with pytest.raises(ValueError, match="feature"):
        dist.true_quantile(np.zeros((3, 2)), 0.5)
