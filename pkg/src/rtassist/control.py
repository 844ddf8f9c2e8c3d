"""Shared control: blend user commands with model assistance.

Two attractor fields pull the commanded velocity: toward the most probable
goal (weight tied to its probability, capped) and along the predicted
trajectory (weight tied to how much of the motion still lies ahead,
floored). A cosine agreement gate scales both weights to zero the moment
the user opposes a field, and a soft switch mixes everything into one
constant-speed command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prediction import GoalBelief, Predictor, integrate_velocities, \
    goal_belief_from_mixture, propagate_position_mixture
from .scene import Scene

ZERO_DIST = 1e-3  # m; degenerate-distance guard
ZERO_NORM = 1e-9


@dataclass
class ControllerConfig:
    gamma: float = 2.0  # goal-probability amplification
    nu: float = 0.1  # goal weight cap
    zeta: float = 0.7  # trajectory weight floor
    speed: float = 0.1  # m/s commanded speed
    dt: float = 0.05  # 20 Hz tick
    predict_every: int = 1  # run the predictor every n-th tick
    use_raw_density: bool = False  # GAF from raw plane density, not normalized probs

    def __post_init__(self):
        if not (0 < self.nu <= 1) or not (0 <= self.zeta <= 1) or self.gamma <= 0:
            raise ValueError("require nu in (0,1], zeta in [0,1], gamma > 0")


@dataclass
class AssistState:
    v_u: np.ndarray
    v_g: np.ndarray
    v_tr: np.ndarray
    v_r: np.ndarray
    w_g: float
    w_tr: float
    a_g: float
    a_tr: float
    w_g_eff: float  # sqrt(a_g * w_g)
    w_tr_eff: float  # sqrt(a_tr * w_tr)
    active_goal: int | None
    low_confidence: bool
    predictor_ok: bool
    position: np.ndarray


def unit(v):
    n = np.linalg.norm(v)
    return v / n if n > ZERO_NORM else np.zeros_like(v)


def goal_attraction(p, belief: GoalBelief | None, cfg: ControllerConfig):
    """Unit pull toward the most probable goal and its capped weight."""
    if belief is None or belief.goals.shape[0] == 0:
        return np.zeros(3), 0.0, None
    probs = belief.probs
    best = np.flatnonzero(probs == probs.max())
    if len(best) > 1:  # ties resolved toward the nearest goal
        dists = np.linalg.norm(belief.goals[best] - p, axis=1)
        idx = int(best[np.argmin(dists)])
    else:
        idx = int(best[0])
    score = belief.densities[idx] if cfg.use_raw_density else probs[idx]
    w_g = min(cfg.gamma * float(score), cfg.nu)
    g = belief.goals[idx]
    v_g = (g - p) / np.linalg.norm(g - p) if np.linalg.norm(g - p) >= ZERO_DIST \
        else np.zeros(3)
    return v_g, w_g, idx


def trajectory_following(p, predicted, l_past: float, cfg: ControllerConfig):
    """Unit pull toward the first predicted point; weight floored at zeta."""
    if predicted is None or len(predicted) == 0:
        return np.zeros(3), 0.0
    p_tr = np.asarray(predicted[0], dtype=np.float64)
    d = np.linalg.norm(p_tr - p)
    v_tr = (p_tr - p) / d if d >= ZERO_DIST else np.zeros(3)
    seg = np.diff(np.asarray(predicted, dtype=np.float64), axis=0)
    l_pred = float(np.linalg.norm(seg, axis=1).sum())
    ratio = l_pred / (l_past + l_pred) if (l_past + l_pred) > 0 else 0.0
    w_tr = max(ratio, cfg.zeta)
    return v_tr, w_tr


def agreement(v_u, v) -> float:
    nu_ = np.linalg.norm(v_u)
    nv = np.linalg.norm(v)
    if nu_ < ZERO_NORM or nv < ZERO_NORM:
        return 0.0
    return max(float(np.dot(v_u, v) / (nu_ * nv)), 0.0)


def blend(v_u, v_g, w_g, v_tr, w_tr, cfg: ControllerConfig) -> AssistState:
    """Agreement-gated soft switch, rescaled to the commanded speed."""
    v_u = np.asarray(v_u, dtype=np.float64)
    a_g = agreement(v_u, v_g)
    a_tr = agreement(v_u, v_tr)
    w_g_eff = float(np.sqrt(a_g * w_g))
    w_tr_eff = float(np.sqrt(a_tr * w_tr))
    v_r = (1.0 - w_g_eff) * (v_u + w_tr_eff * np.asarray(v_tr)) \
        + w_g_eff * np.asarray(v_g)
    n = np.linalg.norm(v_r)
    if n > ZERO_NORM:
        v_r = v_r / n * cfg.speed
    return AssistState(
        v_u=v_u, v_g=np.asarray(v_g, dtype=np.float64),
        v_tr=np.asarray(v_tr, dtype=np.float64), v_r=v_r,
        w_g=float(w_g), w_tr=float(w_tr), a_g=a_g, a_tr=a_tr,
        w_g_eff=w_g_eff, w_tr_eff=w_tr_eff,
        active_goal=None, low_confidence=False, predictor_ok=True,
        position=np.zeros(3),
    )


# -- assistance strategies -------------------------------------------------------


class RTAssist:
    """Model-backed assistance: predicted path plus table-plane goal belief.

    Keeps the last position mixture around for telemetry (heatmaps).
    """

    def __init__(self, model):
        self.predictor = Predictor(model)
        self.last_position_mixture = None

    def predict(self, history, scene: Scene):
        from .prediction import rollout_most_likely
        from .simdata import history_features

        feats = history_features(np.asarray(history), self.predictor.model.cfg.dt)
        origin = np.asarray(history, dtype=np.float64)[-1]
        out = rollout_most_likely(self.predictor.model, feats[None], None,
                                  feats[-1:, 3:6])
        path = integrate_velocities(origin, out["velocities"][0],
                                    self.predictor.model.cfg.dt)
        covs = out["chols"][0] @ np.swapaxes(out["chols"][0], -1, -2)
        pm = propagate_position_mixture(
            out["means"][0], covs, out["weights"][0], origin,
            self.predictor.model.cfg.dt, table_height=scene.table_height,
        )
        belief = goal_belief_from_mixture(pm, scene.goals, scene.table_height)
        self.last_position_mixture = pm
        return path, belief


class NoAssist:
    def predict(self, history, scene):
        return None, None


class SharedController:
    """Single-owner tick loop: history buffer, fields, blend, integration."""

    def __init__(self, scene: Scene, cfg: ControllerConfig = None, assist=None):
        self.scene = scene
        self.cfg = cfg or ControllerConfig()
        self.assist = assist or NoAssist()
        self.reset(np.asarray(scene.start, dtype=np.float64))

    def reset(self, start) -> None:
        self.position = np.asarray(start, dtype=np.float64).copy()
        self.history = [self.position.copy()]
        self.tick_count = 0
        self._cached = (None, None)

    @property
    def past_length(self) -> float:
        if len(self.history) < 2:
            return 0.0
        seg = np.diff(np.asarray(self.history), axis=0)
        return float(np.linalg.norm(seg, axis=1).sum())

    def tick(self, user_dir) -> AssistState:
        """Advance one step from a (possibly zero) user direction command."""
        user_dir = np.asarray(user_dir, dtype=np.float64)
        v_u = unit(user_dir) * self.cfg.speed

        pred_path, belief = self._cached
        predictor_ok = True
        if len(self.history) >= 3 and self.tick_count % self.cfg.predict_every == 0:
            try:
                pred_path, belief = self.assist.predict(self.history, self.scene)
                self._cached = (pred_path, belief)
            except Exception:
                pred_path, belief = None, None  # fall back to pure teleop
                predictor_ok = False

        v_g, w_g, goal_idx = goal_attraction(self.position, belief, self.cfg)
        v_tr, w_tr = trajectory_following(self.position, pred_path,
                                          self.past_length, self.cfg)
        state = blend(v_u, v_g, w_g, v_tr, w_tr, self.cfg)
        state.active_goal = goal_idx
        state.low_confidence = bool(belief.low_confidence) if belief is not None else True
        state.predictor_ok = predictor_ok

        self.position = self.position + state.v_r * self.cfg.dt
        self.history.append(self.position.copy())
        self.tick_count += 1
        state.position = self.position.copy()
        return state
