"""Turning a trained model plus a partial trajectory into predictions.

Three consumers: the most-likely future path (deterministic), best-of-K
sampled paths, and tabletop goal probabilities obtained by propagating the
per-step velocity mixtures into position space and slicing them at the
table plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import constant, no_grad
from .gmm import GaussianMixture, chol_from_raw, softmax_last
from .model import RTModel, pack_histories
from .simdata import history_features

UNIFORM_FLOOR = 0.01
PLANE_WEIGHT_EPS = 1e-12


@dataclass
class PredictionResult:
    positions: np.ndarray  # (T, 3) absolute
    velocities: np.ndarray  # (T, 3)
    mixtures: list  # per-step GaussianMixture in velocity space
    latent: np.ndarray  # (N,) chosen latent code
    origin: np.ndarray  # (3,)


@dataclass
class PositionMixture:
    """Per-step position-space mixture, index 0 being the observation cut.

    Step 0 is degenerate by construction: all component means sit at the
    last observed position with zero covariance.
    """

    origin: np.ndarray
    means: np.ndarray  # (S+1, C, 3)
    covs: np.ndarray  # (S+1, C, 3, 3)
    weights: np.ndarray  # (S+1, C)
    t_end: int  # index of the last step included by the table-crossing rule


@dataclass
class GoalBelief:
    goals: np.ndarray  # (G, 3)
    densities: np.ndarray  # (G,) table-plane density at each goal
    probs: np.ndarray  # (G,) normalized over goals, floored
    low_confidence: bool


def integrate_velocities(origin, velocities, dt: float) -> np.ndarray:
    return np.asarray(origin)[None, :] + np.cumsum(
        np.asarray(velocities, dtype=np.float64), axis=0
    ) * dt


# -- batched rollouts ----------------------------------------------------------


def _extract_step(model: RTModel, raw):
    c = model.cfg.gmm_components
    b = raw.mean.data.shape[0]
    means = raw.mean.data.astype(np.float64).reshape(b, c, 3)
    chols = chol_from_raw(raw.chol.data.reshape(b, c, 6))
    weights = softmax_last(raw.logits.data)
    return means, chols, weights


def rollout_most_likely(model: RTModel, x, mask, last_vel,
                        pick: str = "mixture-mean"):
    """Deterministic decode of the most-likely future velocities.

    pick="mixture-mean" reads off and feeds back the mixture expectation
    each step; the autoregressive feedback then progressively commits to
    the dominant branch. pick="top-component" takes the heaviest
    component's mean instead (the literal per-step mode surrogate; it
    measures worse on held-out reaches, see the prediction module notes).

    Returns dict with velocities (B,T,3) and the per-step mixture arrays
    (means/chols/weights), plus the prior probabilities and latent used.
    """
    if pick not in ("mixture-mean", "top-component"):
        raise ValueError(f"unknown pick mode {pick!r}")
    with no_grad():
        h = model.encode_past(x, mask)
        probs = model.prior(h)
        r = model.sample_latent(probs, "argmax")
        state = model.init_decoder_state(h)
        b, t = x.shape[0], model.cfg.horizon
        c = model.cfg.gmm_components
        vel = np.zeros((b, t, 3))
        means = np.zeros((b, t, c, 3))
        chols = np.zeros((b, t, c, 3, 3))
        weights = np.zeros((b, t, c))
        y_prev = constant(np.asarray(last_vel, dtype=np.float32).reshape(b, 3))
        for step in range(t):
            raw, state = model.decode_step(y_prev, r, state)
            m, l, w = _extract_step(model, raw)
            if pick == "top-component":
                v = m[np.arange(b), w.argmax(axis=1)]
            else:
                v = (w[:, :, None] * m).sum(axis=1)
            vel[:, step] = v
            means[:, step] = m
            chols[:, step] = l
            weights[:, step] = w
            y_prev = constant(v.astype(np.float32))
    return {
        "velocities": vel, "means": means, "chols": chols, "weights": weights,
        "latent": r.data.copy(), "prior_probs": probs.data.copy(),
    }


def rollout_samples(model: RTModel, x, mask, last_vel, k: int, rng):
    """K stochastic decodes per history: hard latent, per-step mixture draws.

    Returns velocities (B, K, T, 3).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    with no_grad():
        h = model.encode_past(x, mask)
        probs = model.prior(h)
        b, t = x.shape[0], model.cfg.horizon
        rows = b * k
        probs_rep = constant(np.repeat(probs.data, k, axis=0))
        r = model.sample_latent(probs_rep, "hard", rng)
        h_rep = constant(np.repeat(h.data, k, axis=0))
        state = model.init_decoder_state(h_rep)
        vel = np.zeros((rows, t, 3))
        y_prev = constant(
            np.repeat(np.asarray(last_vel, dtype=np.float32).reshape(b, 3), k, axis=0)
        )
        for step in range(t):
            raw, state = model.decode_step(y_prev, r, state)
            m, l, w = _extract_step(model, raw)
            u = rng.random((rows, 1))
            comp = (u > np.cumsum(w, axis=1)).sum(axis=1)
            idx = np.arange(rows)
            z = rng.standard_normal((rows, 3))
            v = m[idx, comp] + np.einsum("nij,nj->ni", l[idx, comp], z)
            vel[:, step] = v
            y_prev = constant(v.astype(np.float32))
    return vel.reshape(b, k, t, 3)


# -- position-space propagation and the table-plane slice ------------------------


def propagate_position_mixture(means, covs, weights, origin, dt: float,
                               table_height=None) -> PositionMixture:
    """Accumulate velocity mixtures into position space, matched by index.

    means (S,C,3), covs (S,C,3,3), weights (S,C). Propagation stops at the
    first step whose lowest component mean crosses the table plane;
    without a table height the full horizon is kept.
    """
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    s, c = means.shape[0], means.shape[1]
    p_means = np.zeros((s + 1, c, 3))
    p_covs = np.zeros((s + 1, c, 3, 3))
    p_weights = np.zeros((s + 1, c))
    p_means[0] = np.asarray(origin)[None, :]
    p_weights[0] = 1.0 / c
    t_end = s
    for t in range(1, s + 1):
        p_means[t] = p_means[t - 1] + means[t - 1] * dt
        p_covs[t] = p_covs[t - 1] + covs[t - 1] * dt * dt
        p_weights[t] = weights[t - 1]
        if table_height is not None and p_means[t][:, 2].min() <= table_height:
            t_end = t
            break
    return PositionMixture(
        origin=np.asarray(origin, dtype=np.float64).copy(),
        means=p_means[: t_end + 1],
        covs=p_covs[: t_end + 1],
        weights=p_weights[: t_end + 1],
        t_end=t_end,
    )


def goal_belief_from_mixture(pm: PositionMixture, goals, h_tab: float,
                             floor: float = UNIFORM_FLOOR) -> GoalBelief:
    """Slice the position mixture at the table plane and score each goal.

    Per (step, component): weight alpha * N(h_tab; mu_z, var_z), then the
    conditional 2-D Gaussian of (x, y) given z = h_tab. Goal density is the
    weight-normalized sum of conditional densities; probabilities are the
    densities normalized over goals, mixed with a uniform floor.
    """
    goals = np.asarray(goals, dtype=np.float64).reshape(-1, 3)
    g = goals.shape[0]
    if g == 0:
        raise ValueError("goal_belief: at least one goal required")
    dens = np.zeros(g)
    total_w = 0.0
    for t in range(1, pm.means.shape[0]):
        for c in range(pm.means.shape[1]):
            mu = pm.means[t, c]
            cov = pm.covs[t, c]
            var_z = cov[2, 2]
            if var_z <= 1e-18:
                continue
            dz = h_tab - mu[2]
            nz = np.exp(-0.5 * dz * dz / var_z) / np.sqrt(2 * np.pi * var_z)
            w = pm.weights[t, c] * nz
            if w <= 0:
                continue
            # condition (x, y) on z = h_tab
            k_gain = cov[:2, 2] / var_z
            mu_xy = mu[:2] + k_gain * dz
            cov_xy = cov[:2, :2] - np.outer(k_gain, cov[2, :2])
            det = cov_xy[0, 0] * cov_xy[1, 1] - cov_xy[0, 1] * cov_xy[1, 0]
            if det <= 1e-24:
                continue
            d = goals[:, :2] - mu_xy[None, :]
            inv00, inv11 = cov_xy[1, 1] / det, cov_xy[0, 0] / det
            inv01 = -cov_xy[0, 1] / det
            quad = inv00 * d[:, 0] ** 2 + 2 * inv01 * d[:, 0] * d[:, 1] + inv11 * d[:, 1] ** 2
            dens += w * np.exp(-0.5 * quad) / (2 * np.pi * np.sqrt(det))
            total_w += w
    if total_w < PLANE_WEIGHT_EPS:
        return GoalBelief(goals, np.zeros(g), np.full(g, 1.0 / g), True)
    dens = dens / total_w
    total_d = dens.sum()
    if total_d <= 0:
        return GoalBelief(goals, dens, np.full(g, 1.0 / g), True)
    probs = (1.0 - floor) * dens / total_d + floor / g
    return GoalBelief(goals, dens, probs, False)


def plane_density_grid(pm: PositionMixture, h_tab: float, x_range, y_range,
                       shape=(64, 64)) -> np.ndarray:
    """Normalized slice density sampled at cell centers; rows follow y."""
    rows, cols = shape
    xs = np.linspace(x_range[0], x_range[1], cols, endpoint=False) + (
        x_range[1] - x_range[0]) / (2 * cols)
    ys = np.linspace(y_range[0], y_range[1], rows, endpoint=False) + (
        y_range[1] - y_range[0]) / (2 * rows)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, h_tab)], axis=1)
    belief = goal_belief_from_mixture(pm, pts, h_tab, floor=0.0)
    return belief.densities.reshape(rows, cols)


# -- the user-facing predictor -----------------------------------------------------


class Predictor:
    """Stateless prediction API over read-only model weights."""

    def __init__(self, model: RTModel):
        self.model = model

    def _features(self, positions):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape[0] < 3:
            raise ValueError("prediction needs at least 3 observed positions")
        return history_features(positions, self.model.cfg.dt)

    def most_likely(self, positions) -> PredictionResult:
        feats = self._features(positions)
        origin = np.asarray(positions, dtype=np.float64)[-1]
        out = rollout_most_likely(
            self.model, feats[None], None, feats[-1:, 3:6]
        )
        mixtures = [
            GaussianMixture(out["means"][0, t], out["chols"][0, t], out["weights"][0, t])
            for t in range(self.model.cfg.horizon)
        ]
        return PredictionResult(
            positions=integrate_velocities(origin, out["velocities"][0], self.model.cfg.dt),
            velocities=out["velocities"][0],
            mixtures=mixtures,
            latent=out["latent"][0],
            origin=origin,
        )

    def sample_trajectories(self, positions, k: int = 20, rng=None) -> np.ndarray:
        rng = rng or np.random.default_rng(0)
        feats = self._features(positions)
        origin = np.asarray(positions, dtype=np.float64)[-1]
        vel = rollout_samples(self.model, feats[None], None, feats[-1:, 3:6], k, rng)[0]
        return np.stack(
            [integrate_velocities(origin, vel[i], self.model.cfg.dt) for i in range(k)]
        )

    def position_mixture(self, positions, table_height=None) -> PositionMixture:
        feats = self._features(positions)
        origin = np.asarray(positions, dtype=np.float64)[-1]
        out = rollout_most_likely(self.model, feats[None], None, feats[-1:, 3:6])
        covs = out["chols"][0] @ np.swapaxes(out["chols"][0], -1, -2)
        return propagate_position_mixture(
            out["means"][0], covs, out["weights"][0], origin, self.model.cfg.dt,
            table_height=table_height,
        )

    def goal_belief(self, positions, goals, table_height: float) -> GoalBelief:
        pm = self.position_mixture(positions, table_height=table_height)
        return goal_belief_from_mixture(pm, goals, table_height)

    def goal_beliefs_batch(self, histories, goals, table_height: float):
        """One belief per history, batched through the network."""
        feats = [self._features(h) for h in histories]
        x, mask = pack_histories(feats)
        last_vel = np.stack([f[-1, 3:6] for f in feats])
        out = rollout_most_likely(self.model, x, mask, last_vel)
        beliefs = []
        for b, h in enumerate(histories):
            origin = np.asarray(h, dtype=np.float64)[-1]
            covs = out["chols"][b] @ np.swapaxes(out["chols"][b], -1, -2)
            pm = propagate_position_mixture(
                out["means"][b], covs, out["weights"][b], origin,
                self.model.cfg.dt, table_height=table_height,
            )
            beliefs.append(goal_belief_from_mixture(pm, goals, table_height))
        return beliefs
