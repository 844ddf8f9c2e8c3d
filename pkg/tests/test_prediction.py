"""Predictor tests: integration, mixture propagation, table-plane beliefs."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from rtassist.model import ModelConfig, RTModel
from rtassist.prediction import (
    GoalBelief,
    Predictor,
    goal_belief_from_mixture,
    integrate_velocities,
    plane_density_grid,
    propagate_position_mixture,
    rollout_most_likely,
)

SMALL = ModelConfig(hidden_size=8, latent_dims=2, gmm_components=2, horizon=6)


def history(rng, n=8, scale=0.02):
    steps = rng.uniform(-scale, scale, size=(n, 3))
    return np.array([0.4, 0.0, 0.35]) + np.cumsum(steps, axis=0)


# -- integration ---------------------------------------------------------------


def test_integrate_zero_velocities():
    out = integrate_velocities([0.1, 0.2, 0.3], np.zeros((5, 3)), 0.05)
    assert np.allclose(out, [0.1, 0.2, 0.3])


def test_integrate_constant_velocity():
    out = integrate_velocities([0, 0, 0], np.tile([1.0, 0, 0], (3, 1)), 0.05)
    assert np.allclose(out, [[0.05, 0, 0], [0.10, 0, 0], [0.15, 0, 0]])


def test_zero_model_predicts_frozen_position():
    model = RTModel(SMALL, seed=0)
    model.zero_all_weights()
    rng = np.random.default_rng(0)
    h = history(rng)
    res = Predictor(model).most_likely(h)
    assert np.allclose(res.positions, h[-1], atol=1e-7)


def test_most_likely_deterministic():
    model = RTModel(SMALL, seed=1)
    rng = np.random.default_rng(1)
    h = history(rng)
    p = Predictor(model)
    a = p.most_likely(h)
    b = p.most_likely(h)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.latent, b.latent)


def test_sampling_seeded_reproducible():
    model = RTModel(SMALL, seed=2)
    rng_h = np.random.default_rng(2)
    h = history(rng_h)
    p = Predictor(model)
    s1 = p.sample_trajectories(h, k=4, rng=np.random.default_rng(7))
    s2 = p.sample_trajectories(h, k=4, rng=np.random.default_rng(7))
    assert np.array_equal(s1, s2)
    assert s1.shape == (4, SMALL.horizon, 3)


def test_floored_single_component_sample_matches_most_likely():
    cfg = ModelConfig(hidden_size=8, latent_dims=2, gmm_components=1, horizon=6)
    model = RTModel(cfg, seed=3)
    model.zero_all_weights()
    # floor the covariance: raw diagonal (first 3 of 6) far below the clamp,
    # off-diagonals stay zero
    model.head_chol_b.data[:3] = -50.0
    rng = np.random.default_rng(3)
    h = history(rng)
    p = Predictor(model)
    ml = p.most_likely(h).positions
    sample = p.sample_trajectories(h, k=1, rng=np.random.default_rng(0))[0]
    assert np.max(np.abs(sample - ml)) < 1e-3


# -- position-mixture propagation ----------------------------------------------


def test_propagate_single_step():
    pm = propagate_position_mixture(
        means=np.array([[[1.0, 0, 0]]]),
        covs=np.eye(3)[None, None],
        weights=np.array([[1.0]]),
        origin=np.zeros(3),
        dt=0.05,
    )
    assert np.allclose(pm.means[1, 0], [0.05, 0, 0])
    assert np.allclose(pm.covs[1, 0], 0.0025 * np.eye(3))
    assert np.allclose(pm.means[0, 0], 0)  # initial step pinned at the origin
    assert np.allclose(pm.covs[0, 0], 0)


def test_propagate_zero_velocity_grows_linearly():
    s = 5
    pm = propagate_position_mixture(
        means=np.zeros((s, 1, 3)),
        covs=np.tile(np.eye(3), (s, 1, 1, 1)),
        weights=np.ones((s, 1)),
        origin=[0.1, 0.2, 0.3],
        dt=0.05,
    )
    for t in range(1, s + 1):
        assert np.allclose(pm.means[t, 0], [0.1, 0.2, 0.3])
        assert np.allclose(pm.covs[t, 0], t * 0.0025 * np.eye(3))


def test_propagate_stops_at_table_crossing():
    # constant downward velocity crosses z=0 from 0.1 after 3 steps of -0.04/step
    means = np.tile([0.0, 0.0, -0.8], (6, 1, 1))
    covs = np.tile(1e-6 * np.eye(3), (6, 1, 1, 1))
    weights = np.ones((6, 1))
    pm = propagate_position_mixture(means, covs, weights, [0, 0, 0.1], 0.05,
                                    table_height=0.0)
    assert pm.t_end == 3
    assert pm.means.shape[0] == 4
    assert pm.means[3, 0, 2] <= 0.0


def test_propagate_matches_monte_carlo():
    """Rollout oracle: integrate step-independent velocity draws."""
    rng = np.random.default_rng(4)
    s, c = 4, 2
    means = rng.uniform(-0.5, 0.5, size=(s, c, 3))
    chols = np.zeros((s, c, 3, 3))
    for t in range(s):
        for j in range(c):
            chols[t, j][np.tril_indices(3)] = rng.uniform(-0.2, 0.2, 6)
            chols[t, j][np.diag_indices(3)] = rng.uniform(0.1, 0.4, 3)
    covs = chols @ np.swapaxes(chols, -1, -2)
    w = rng.uniform(0.5, 1.0, size=(s, c))
    w /= w.sum(axis=1, keepdims=True)
    origin = np.array([0.2, -0.1, 0.3])
    dt = 0.05
    pm = propagate_position_mixture(means, covs, w, origin, dt)

    n = 50_000
    for j in range(c):
        pos = np.tile(origin, (n, 1))
        for t in range(s):
            draws = rng.multivariate_normal(means[t, j], covs[t, j], size=n)
            pos = pos + draws * dt
            emp_mean = pos.mean(axis=0)
            emp_cov = np.cov(pos.T)
            assert np.linalg.norm(emp_mean - pm.means[t + 1, j]) <= 0.05 * max(
                np.linalg.norm(pm.means[t + 1, j]), 0.01
            )
            rel = np.linalg.norm(emp_cov - pm.covs[t + 1, j]) / np.linalg.norm(
                pm.covs[t + 1, j]
            )
            assert rel <= 0.10


# -- table-plane goal belief -----------------------------------------------------


def make_mixture_above_plane(means_xy, spread=0.05, z=0.02, steps=3):
    """Hand-built position mixture whose components hover near the plane."""
    c = len(means_xy)
    means = np.zeros((steps + 1, c, 3))
    covs = np.zeros((steps + 1, c, 3, 3))
    weights = np.zeros((steps + 1, c))
    weights[0] = 1.0 / c
    for t in range(1, steps + 1):
        for j, (x, y) in enumerate(means_xy):
            means[t, j] = [x, y, z]
            covs[t, j] = spread**2 * np.eye(3) * t
        weights[t] = 1.0 / c
    from rtassist.prediction import PositionMixture

    return PositionMixture(
        origin=np.zeros(3), means=means, covs=covs, weights=weights, t_end=steps
    )


def test_single_goal_prob_one():
    pm = make_mixture_above_plane([(0.5, 0.0)])
    b = goal_belief_from_mixture(pm, [[0.5, 0.0, 0.0]], h_tab=0.0)
    assert b.probs[0] == pytest.approx(1.0)


def test_symmetric_goals_split_evenly():
    pm = make_mixture_above_plane([(0.5, 0.0)])
    goals = [[0.5, 0.1, 0.0], [0.5, -0.1, 0.0]]
    b = goal_belief_from_mixture(pm, goals, h_tab=0.0)
    assert b.probs[0] == pytest.approx(0.5, abs=1e-6)
    assert b.probs[1] == pytest.approx(0.5, abs=1e-6)


def test_probs_are_distribution_random_sweep():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pm = make_mixture_above_plane(
            [(rng.uniform(0.3, 0.7), rng.uniform(-0.2, 0.2)) for _ in range(3)],
            spread=rng.uniform(0.01, 0.2),
        )
        goals = rng.uniform([0.3, -0.3, 0], [0.7, 0.3, 0], size=(4, 3))
        goals[:, 2] = 0.0
        b = goal_belief_from_mixture(pm, goals, h_tab=0.0)
        assert np.all(b.probs >= 0)
        assert b.probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(b.densities >= 0)


def test_faraway_mixture_is_low_confidence_uniform():
    pm = make_mixture_above_plane([(0.5, 0.0)], spread=0.001, z=5.0)
    goals = [[0.4, 0, 0], [0.6, 0, 0]]
    b = goal_belief_from_mixture(pm, goals, h_tab=0.0)
    assert b.low_confidence
    assert np.allclose(b.probs, 0.5)


def test_density_matches_grid_oracle():
    """Brute-force sliced-and-renormalized 3-D mixture on a fine grid."""
    rng = np.random.default_rng(6)
    pm = make_mixture_above_plane([(0.45, 0.05), (0.55, -0.1)], spread=0.04)
    goals = np.array([[0.45, 0.05, 0.0], [0.55, -0.12, 0.0], [0.5, 0.0, 0.0]])
    b = goal_belief_from_mixture(pm, goals, h_tab=0.0, floor=0.0)

    # oracle: evaluate the full 3-D mixture on the plane, renormalize by the
    # grid integral, then read off the goal positions
    xs = np.linspace(0.0, 1.0, 500)
    ys = np.linspace(-0.5, 0.5, 500)
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)

    def mixture_density(points):
        dens = np.zeros(points.shape[0])
        for t in range(1, pm.means.shape[0]):
            for c in range(pm.means.shape[1]):
                dens += pm.weights[t, c] * multivariate_normal.pdf(
                    points, mean=pm.means[t, c], cov=pm.covs[t, c]
                )
        return dens

    grid_total = mixture_density(pts).sum() * cell
    oracle = mixture_density(goals) / grid_total
    assert np.allclose(b.densities, oracle, rtol=0.01)


def test_heatmap_grid_integrates_to_one():
    pm = make_mixture_above_plane([(0.5, 0.0)], spread=0.03)
    grid = plane_density_grid(pm, 0.0, (0.25, 0.75), (-0.3, 0.3), shape=(64, 64))
    cell_area = (0.5 / 64) * (0.6 / 64)
    assert grid.sum() * cell_area == pytest.approx(1.0, rel=0.02)


def test_belief_translation_equivariance():
    """Shifting scene and history horizontally leaves probs unchanged."""
    model = RTModel(SMALL, seed=7)
    rng = np.random.default_rng(8)
    h = history(rng, n=10)
    goals = np.array([[0.45, 0.1, 0.0], [0.55, -0.1, 0.0], [0.35, 0.0, 0.0]])
    p = Predictor(model)
    b0 = p.goal_belief(h, goals, table_height=0.0)
    shift = np.array([0.08, -0.13, 0.0])
    b1 = p.goal_belief(h + shift, goals + shift, table_height=0.0)
    assert np.allclose(b0.probs, b1.probs, atol=1e-5)


def test_batch_beliefs_match_single():
    model = RTModel(SMALL, seed=9)
    rng = np.random.default_rng(10)
    hs = [history(rng, n=k) for k in (6, 9, 7)]
    goals = np.array([[0.45, 0.1, 0.0], [0.55, -0.1, 0.0]])
    p = Predictor(model)
    batch = p.goal_beliefs_batch(hs, goals, table_height=0.0)
    for h, b in zip(hs, batch):
        single = p.goal_belief(h, goals, table_height=0.0)
        assert np.allclose(b.probs, single.probs, atol=1e-5)
