"""Shared-control algebra, invariants, and tick behavior."""

import numpy as np
import pytest

from rtassist.control import (
    AssistState,
    ControllerConfig,
    NoAssist,
    SharedController,
    agreement,
    blend,
    goal_attraction,
    trajectory_following,
    unit,
)
from rtassist.prediction import GoalBelief
from rtassist.scene import Scene, cube_layout

CFG = ControllerConfig()


def belief_of(goals, probs, low_confidence=False):
    goals = np.asarray(goals, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    return GoalBelief(goals, probs.copy(), probs, low_confidence)


# -- goal attraction ----------------------------------------------------------


def test_goal_weight_arithmetic():
    b = belief_of([[1.0, 0, 0]], [1.0])
    b.probs = np.array([0.04])
    _, w, _ = goal_attraction(np.zeros(3), b, CFG)
    assert w == pytest.approx(0.08)


def test_goal_weight_cap():
    b = belief_of([[1.0, 0, 0]], [0.2])
    _, w, _ = goal_attraction(np.zeros(3), b, CFG)
    assert w == pytest.approx(0.1)


def test_goal_at_position_zero_direction():
    p = np.array([0.5, 0.1, 0.0])
    b = belief_of([p.tolist()], [0.2])
    v, w, idx = goal_attraction(p, b, CFG)
    assert np.all(v == 0)
    assert w == pytest.approx(0.1)
    assert idx == 0


def test_goal_tie_breaks_to_nearest():
    b = belief_of([[1.0, 0, 0], [0.2, 0, 0]], [0.5, 0.5])
    v, _, idx = goal_attraction(np.zeros(3), b, CFG)
    assert idx == 1
    assert np.allclose(v, [1, 0, 0])


def test_goal_attraction_empty():
    v, w, idx = goal_attraction(np.zeros(3), None, CFG)
    assert np.all(v == 0) and w == 0 and idx is None


# -- trajectory following ---------------------------------------------------------


def path_of_length(length, n=5, start=(0.1, 0, 0)):
    xs = np.linspace(0, length, n)
    return np.asarray(start) + np.stack([xs, np.zeros(n), np.zeros(n)], axis=1)


def test_tff_motion_onset():
    _, w = trajectory_following(np.zeros(3), path_of_length(1.0), l_past=0.0, cfg=CFG)
    assert w == pytest.approx(1.0)


def test_tff_floor():
    _, w = trajectory_following(np.zeros(3), path_of_length(1.0), l_past=3.0, cfg=CFG)
    assert w == pytest.approx(0.7)


def test_tff_degenerate_point():
    p = np.array([0.1, 0.0, 0.0])
    v, _ = trajectory_following(p, path_of_length(1.0, start=p), l_past=1.0, cfg=CFG)
    assert np.all(v == 0)


def test_tff_empty_path():
    v, w = trajectory_following(np.zeros(3), None, 1.0, CFG)
    assert np.all(v == 0) and w == 0.0


# -- agreement ---------------------------------------------------------------------


def test_agreement_parallel():
    assert agreement([1, 0, 0], [1, 0, 0]) == pytest.approx(1.0)


def test_agreement_opposed_clamped():
    assert agreement([1, 0, 0], [-1, 0, 0]) == 0.0


def test_agreement_45deg():
    assert agreement([1, 0, 0], [1, 1, 0]) == pytest.approx(1 / np.sqrt(2))


def test_agreement_zero_norm():
    assert agreement([0, 0, 0], [1, 0, 0]) == 0.0
    assert agreement([1, 0, 0], [0, 0, 0]) == 0.0


# -- blend --------------------------------------------------------------------------


def test_blend_switch_limit():
    # w_g' = 1 makes v_r proportional to v_g exactly
    v = np.array([1.0, 0, 0])
    st = blend(v, v, w_g=1.0, v_tr=np.zeros(3), w_tr=0.0, cfg=CFG)
    assert st.w_g_eff == pytest.approx(1.0)
    assert np.allclose(unit(st.v_r), v)
    assert np.linalg.norm(st.v_r) == pytest.approx(CFG.speed)


def test_blend_pure_teleop_limit():
    v_u = np.array([0.0, 1.0, 0])
    st = blend(v_u, np.array([0.0, -1.0, 0]), 0.1, np.array([0.0, -1.0, 0]), 0.9, CFG)
    assert st.w_g_eff == 0.0 and st.w_tr_eff == 0.0
    assert np.allclose(unit(st.v_r), [0, 1, 0])


def test_blend_weight_arithmetic():
    v = np.array([1.0, 0, 0])
    st = blend(v, v, w_g=0.1, v_tr=np.zeros(3), w_tr=0.0, cfg=CFG)
    assert st.a_g == pytest.approx(1.0)
    assert st.w_g_eff == pytest.approx(np.sqrt(0.1), rel=1e-9)


def test_blend_constant_speed_contract():
    rng = np.random.default_rng(0)
    for _ in range(500):
        v_u = rng.normal(size=3)
        st = blend(
            v_u / np.linalg.norm(v_u) * CFG.speed,
            unit(rng.normal(size=3)), rng.uniform(0, 0.1),
            unit(rng.normal(size=3)), rng.uniform(0.7, 1.0), CFG,
        )
        assert np.linalg.norm(st.v_r) == pytest.approx(CFG.speed, rel=1e-9)


def test_blend_zero_user_zero_output():
    st = blend(np.zeros(3), np.array([1.0, 0, 0]), 0.1,
               np.array([0, 1.0, 0]), 1.0, CFG)
    assert np.all(st.v_r == 0)


def test_blend_weight_bounds_and_opposition():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        v_u = unit(rng.normal(size=3)) * CFG.speed
        v_g = unit(rng.normal(size=3))
        v_tr = unit(rng.normal(size=3))
        w_g = rng.uniform(0, CFG.nu)
        w_tr = rng.uniform(CFG.zeta, 1.0)
        st = blend(v_u, v_g, w_g, v_tr, w_tr, CFG)
        assert st.w_g_eff <= np.sqrt(CFG.nu) + 1e-12
        assert st.w_tr_eff <= 1.0 + 1e-12
        if np.dot(v_u, v_g) <= 0:
            assert st.w_g_eff == 0.0
        if np.dot(v_u, v_tr) <= 0:
            assert st.w_tr_eff == 0.0


def test_blend_continuity():
    """Perturbing any input by delta moves v_r by a bounded amount."""
    rng = np.random.default_rng(2)
    delta = 1e-6
    for _ in range(10_000):
        v_u = unit(rng.normal(size=3)) * CFG.speed
        v_g = unit(rng.normal(size=3))
        v_tr = unit(rng.normal(size=3))
        w_g = rng.uniform(0, CFG.nu)
        w_tr = rng.uniform(CFG.zeta, 1.0)
        base = blend(v_u, v_g, w_g, v_tr, w_tr, CFG).v_r
        bump = rng.integers(0, 5)
        args = [v_u.copy(), v_g.copy(), w_g, v_tr.copy(), w_tr]
        if bump in (0, 1, 3):
            args[bump] = args[bump] + delta * unit(rng.normal(size=3))
        elif bump == 2:
            args[2] = min(args[2] + delta, CFG.nu)
        else:
            args[4] = min(args[4] + delta, 1.0)
        moved = blend(args[0], args[1], args[2], args[3], args[4], CFG).v_r
        # sqrt gating is Holder-1/2, so the bound scales with sqrt(delta)
        assert np.linalg.norm(moved - base) < 2e-3


# -- tick loop -----------------------------------------------------------------------


class OracleAssist:
    """Deterministic stand-in strategy: straight path to a fixed goal."""

    def __init__(self, goal, prob=0.4, horizon=20, dt=0.05, speed=0.1):
        self.goal = np.asarray(goal, dtype=np.float64)
        self.prob = prob
        self.horizon = horizon
        self.step = speed * dt

    def predict(self, history, scene):
        p = np.asarray(history[-1], dtype=np.float64)
        d = unit(self.goal - p)
        path = p[None] + d[None] * self.step * np.arange(1, self.horizon + 1)[:, None]
        g = scene.goals
        probs = np.full(len(g), (1 - self.prob) / max(len(g) - 1, 1))
        idx = int(np.argmin(np.linalg.norm(g - self.goal, axis=1)))
        probs[idx] = self.prob
        return path, GoalBelief(g, probs.copy(), probs, False)


def test_tick_no_motion_without_command():
    ctrl = SharedController(cube_layout(), CFG, NoAssist())
    start = ctrl.position.copy()
    for _ in range(5):
        st = ctrl.tick(np.zeros(3))
        assert np.all(st.v_r == 0)
    assert np.array_equal(ctrl.position, start)


def test_tick_pure_teleop_moves_at_speed():
    ctrl = SharedController(cube_layout(), CFG, NoAssist())
    st = ctrl.tick(np.array([1.0, 0, 0]))
    assert np.linalg.norm(st.v_r) == pytest.approx(CFG.speed)
    assert np.allclose(ctrl.position - cube_layout().start,
                       [CFG.speed * CFG.dt, 0, 0])


def test_tick_assistance_speeds_straight_reach():
    """A straight-line user reaches the goal no slower with aligned assistance."""
    scene = cube_layout()
    goal = scene.goals[0]

    def run(assist):
        ctrl = SharedController(scene, CFG, assist)
        rng = np.random.default_rng(7)
        for t in range(1, 2000):
            direction = goal - ctrl.position
            if np.linalg.norm(direction) < 0.02:
                return t
            noisy = direction + 0.3 * np.linalg.norm(direction) * rng.normal(size=3)
            ctrl.tick(noisy)
        return 2000

    t_teleop = run(NoAssist())
    t_assist = run(OracleAssist(goal, prob=0.4))
    assert t_assist <= t_teleop


def test_tick_intent_reversal_drops_agreement():
    scene = cube_layout()
    goal = scene.goals[0]
    ctrl = SharedController(scene, CFG, OracleAssist(goal, prob=0.4))
    for _ in range(10):
        st = ctrl.tick(goal - ctrl.position)
    assert st.a_g > 0.9  # aligned while approaching
    old_dir = unit(goal - ctrl.position)
    st = ctrl.tick(-(goal - ctrl.position))  # reverse within one tick
    assert st.a_g == 0.0
    assert st.w_g_eff == 0.0
    assert float(np.dot(st.v_r, old_dir)) <= 1e-12


def test_tick_predictor_failure_falls_back():
    class Broken:
        def predict(self, history, scene):
            raise RuntimeError("predictor exploded")

    ctrl = SharedController(cube_layout(), CFG, Broken())
    for _ in range(4):
        st = ctrl.tick(np.array([1.0, 0, 0]))
    assert not st.predictor_ok
    assert np.allclose(unit(st.v_r), [1, 0, 0])  # pure teleop for the tick


def test_controller_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(nu=0.0)
    with pytest.raises(ValueError):
        ControllerConfig(zeta=1.5)
    with pytest.raises(ValueError):
        ControllerConfig(gamma=-1)
