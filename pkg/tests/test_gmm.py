"""Density and sampling checks for the 3-D Gaussian mixture type."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from rtassist.autodiff import NumericError
from rtassist.gmm import DIAG_RAW_FLOOR, GaussianMixture, mixture_from_raw


def random_mixture(rng, c=3):
    means = rng.uniform(-1, 1, size=(c, 3))
    chols = np.zeros((c, 3, 3))
    for i in range(c):
        chols[i][np.tril_indices(3)] = rng.uniform(-0.5, 0.5, size=6)
        chols[i][np.diag_indices(3)] = rng.uniform(0.2, 0.8, size=3)
    w = rng.uniform(0.2, 1.0, size=c)
    return GaussianMixture(means, chols, w / w.sum())


def test_standard_normal_at_origin():
    g = GaussianMixture(np.zeros((1, 3)), np.eye(3)[None], [1.0])
    assert g.log_density([0, 0, 0]) == pytest.approx(-1.5 * np.log(2 * np.pi), abs=1e-9)


def test_duplicate_components_collapse():
    rng = np.random.default_rng(0)
    single = random_mixture(rng, c=1)
    double = GaussianMixture(
        np.vstack([single.means, single.means]),
        np.vstack([single.chols, single.chols]),
        [0.5, 0.5],
    )
    for _ in range(10):
        v = rng.uniform(-2, 2, size=3)
        assert double.log_density(v) == pytest.approx(single.log_density(v), abs=1e-12)


def test_log_density_matches_scipy():
    rng = np.random.default_rng(1)
    g = random_mixture(rng, c=4)
    covs = g.covariances()
    for _ in range(20):
        v = rng.uniform(-2, 2, size=3)
        ref = sum(
            w * multivariate_normal.pdf(v, mean=m, cov=s)
            for w, m, s in zip(g.weights, g.means, covs)
        )
        assert g.log_density(v) == pytest.approx(np.log(ref), rel=1e-10)


def test_density_integrates_to_one():
    # Monte-Carlo integral over a bounding box, 1e6 uniform samples
    rng = np.random.default_rng(2)
    g = random_mixture(rng, c=3)
    lo, hi = -4.0, 4.0
    n = 1_000_000
    pts = rng.uniform(lo, hi, size=(n, 3))
    covs = g.covariances()
    dens = np.zeros(n)
    for w, m, s in zip(g.weights, g.means, covs):
        dens += w * multivariate_normal.pdf(pts, mean=m, cov=s)
    # cross-check our evaluator on a subsample
    for v in pts[:50]:
        assert g.log_density(v) == pytest.approx(
            np.log(dens[np.all(pts == v, axis=1)][0]), rel=1e-9
        )
    integral = dens.mean() * (hi - lo) ** 3
    assert integral == pytest.approx(1.0, rel=0.02)


def test_singular_factor_rejected():
    chol = np.eye(3)
    chol[1, 1] = 1e-9
    g = GaussianMixture(np.zeros((1, 3)), chol[None], [1.0])
    with pytest.raises(NumericError, match="singular"):
        g.log_density([0, 0, 0])


def test_zero_chol_sample_is_mean():
    g = GaussianMixture([[0.3, -0.2, 0.9]], np.zeros((1, 3, 3)), [1.0])
    rng = np.random.default_rng(3)
    assert np.array_equal(g.sample(rng), [0.3, -0.2, 0.9])


def test_sample_covariance_matches():
    rng = np.random.default_rng(4)
    chol = np.array([[0.4, 0, 0], [0.1, 0.3, 0], [-0.2, 0.05, 0.5]])
    g = GaussianMixture(np.zeros((1, 3)), chol[None], [1.0])
    draws = g.sample_batch(rng, 100_000)
    emp = np.cov(draws.T)
    target = chol @ chol.T
    rel = np.linalg.norm(emp - target) / np.linalg.norm(target)
    assert rel < 0.05


def test_component_frequencies_match_weights():
    rng = np.random.default_rng(5)
    means = np.array([[10.0, 0, 0], [-10.0, 0, 0], [0, 10.0, 0]])
    g = GaussianMixture(means, 1e-3 * np.eye(3)[None].repeat(3, axis=0),
                        [0.5, 0.3, 0.2])
    draws = g.sample_batch(rng, 100_000)
    # components are far apart: classify by nearest mean
    labels = np.argmin(np.linalg.norm(draws[:, None] - means[None], axis=2), axis=1)
    freq = np.bincount(labels, minlength=3) / draws.shape[0]
    assert np.all(np.abs(freq - g.weights) < 0.02)


def test_mean_is_density_max_single_component():
    rng = np.random.default_rng(6)
    g = random_mixture(rng, c=1)
    at_mean = g.log_density(g.means[0])
    for _ in range(200):
        probe = g.means[0] + rng.uniform(-1, 1, size=3)
        assert g.log_density(probe) <= at_mean + 1e-12


def test_weights_must_be_simplex():
    with pytest.raises(ValueError, match="sum"):
        GaussianMixture(np.zeros((2, 3)), np.eye(3)[None].repeat(2, 0), [0.7, 0.7])


def test_mixture_from_raw_mapping():
    raw_mean = np.array([[1.0, 2.0, 3.0]])
    raw_chol = np.array([[0.0, 0.5, -0.5, 0.1, 0.2, 0.3]])
    logits = np.array([0.0])
    g = mixture_from_raw(raw_mean, raw_chol, logits)
    assert np.allclose(g.means[0], [1, 2, 3])
    assert g.chols[0, 0, 0] == pytest.approx(1.0)
    assert g.chols[0, 1, 1] == pytest.approx(np.exp(0.5))
    assert g.chols[0, 2, 2] == pytest.approx(np.exp(-0.5))
    assert np.allclose(g.chols[0][np.tril_indices(3, -1)], [0.1, 0.2, 0.3])
    assert g.chols[0, 0, 1] == 0.0
    assert g.weights[0] == 1.0


def test_mixture_from_raw_diag_floor():
    g = mixture_from_raw(np.zeros((1, 3)), np.full((1, 6), -50.0), [0.0])
    assert np.allclose(np.diag(g.chols[0]), np.exp(DIAG_RAW_FLOOR))


def test_zero_raw_gives_identity_uniform():
    # zero-logit case: unit diagonal, zero off-diagonal, uniform weights
    g = mixture_from_raw(np.zeros((4, 3)), np.zeros((4, 6)), np.zeros(4))
    assert np.allclose(g.means, 0)
    for c in range(4):
        assert np.allclose(g.chols[c], np.eye(3))
    assert np.allclose(g.weights, 0.25)


def test_spd_for_random_raw():
    rng = np.random.default_rng(7)
    for _ in range(50):
        g = mixture_from_raw(
            rng.uniform(-5, 5, size=(4, 3)),
            rng.uniform(-5, 5, size=(4, 6)),
            rng.uniform(-5, 5, size=4),
        )
        for s in g.covariances():
            eig = np.linalg.eigvalsh(s)
            assert np.all(eig > 0)
        assert g.weights.sum() == pytest.approx(1.0, abs=1e-5)
