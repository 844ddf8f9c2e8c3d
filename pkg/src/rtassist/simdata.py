"""Kinematic reach simulator, dataset files, and featurization.

Trajectories emulate a gripper reaching from an elevated start region down
to a target on the table: a noisy proportional controller steers first to a
via point above the target (randomizing the final approach vector), then to
the target itself. Per tick the commanded velocity picks up multiplicative
uniform noise, so noise scales with speed and vanishes at rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GenConfig:
    k: float = 1.0  # proportional gain, 1/s
    v_max: float = 0.25  # m/s speed cap
    dt: float = 0.05  # 20 Hz
    table_height: float = 0.0
    table_x: tuple = (0.25, 0.75)
    table_y: tuple = (-0.30, 0.30)
    start_x: tuple = (0.30, 0.70)
    start_y: tuple = (-0.25, 0.25)
    start_z: tuple = (0.25, 0.45)
    arrival_tol: float = 5e-3  # m
    timeout: float = 15.0  # s
    # reaches have a transport stem to an entry point above the target and
    # then curve in from one of four discrete side families (plus jitter);
    # the side is not observable during the stem, so histories cut there
    # leave several distinct future branches
    entry_height: tuple = (0.14, 0.26)  # entry point above the target
    entry_radius: float = 0.05  # waypoint switch distance at the entry
    via_radius: float = 0.04  # waypoint switch distance at the side via
    via_sides: int = 4
    via_jitter: float = 0.44  # rad, around each side's heading
    via_lateral: tuple = (0.10, 0.20)
    via_height: tuple = (0.04, 0.10)
    seed: int = 0

    def __post_init__(self):
        if self.k <= 0 or self.v_max <= 0 or self.dt <= 0:
            raise ValueError("k, v_max and dt must be positive")


@dataclass
class Trajectory:
    id: int
    dt: float
    positions: np.ndarray  # (N, 3) float64
    target: np.ndarray  # (3,)
    table_height: float

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(3)

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class FeaturizedSample:
    x: np.ndarray  # (T_obs, 9) float32: relative position, velocity, acceleration
    y: np.ndarray  # (T, 3) float32 future velocities, zero-padded
    y_mask: np.ndarray  # (T,) float32 validity
    origin: np.ndarray  # (3,) absolute position at the observation cut
    last_velocity: np.ndarray  # (3,) float32 velocity at the cut
    future_positions: np.ndarray  # (T, 3) absolute ground truth, padded


def proportional_step(p, waypoint, cfg: GenConfig, rng) -> np.ndarray:
    """One noisy controller tick: returns the applied velocity."""
    v = cfg.k * (waypoint - p)
    speed = np.linalg.norm(v)
    if speed > cfg.v_max:
        v = v * (cfg.v_max / speed)
        speed = cfg.v_max
    z = rng.uniform(-1.0, 1.0, size=3)
    return v + z * speed


def _simulate_reach(cfg: GenConfig, rng, start, target, waypoints):
    """Roll the controller through the waypoint chain; None on timeout.

    waypoints: [(point, switch_radius), ...] followed by the target with
    the arrival tolerance.
    """
    p = start.copy()
    positions = [p.copy()]
    max_steps = int(round(cfg.timeout / cfg.dt))
    chain = list(waypoints) + [(target, cfg.arrival_tol)]
    idx = 0
    for _ in range(max_steps):
        while idx < len(chain) - 1 and np.linalg.norm(p - chain[idx][0]) < chain[idx][1]:
            idx += 1
        v = proportional_step(p, chain[idx][0], cfg, rng)
        p = p + v * cfg.dt
        p[2] = max(p[2], cfg.table_height)  # the table blocks the gripper
        positions.append(p.copy())
        if np.linalg.norm(p - target) < cfg.arrival_tol:
            return np.array(positions)
    return None


def generate_trajectory(cfg: GenConfig, rng, traj_id: int = 0, stats=None) -> Trajectory:
    """Sample one reach; discarded attempts (timeout/degenerate) are counted."""
    while True:
        start = np.array([
            rng.uniform(*cfg.start_x), rng.uniform(*cfg.start_y), rng.uniform(*cfg.start_z),
        ])
        target = np.array([
            rng.uniform(*cfg.table_x), rng.uniform(*cfg.table_y), cfg.table_height,
        ])
        entry = target + np.array([0.0, 0.0, rng.uniform(*cfg.entry_height)])
        side = rng.integers(0, cfg.via_sides)
        theta = 2 * np.pi * side / cfg.via_sides + rng.uniform(-cfg.via_jitter,
                                                               cfg.via_jitter)
        lateral = rng.uniform(*cfg.via_lateral)
        via = target + np.array([
            lateral * np.cos(theta),
            lateral * np.sin(theta),
            rng.uniform(*cfg.via_height),
        ])
        positions = _simulate_reach(
            cfg, rng, start, target,
            [(entry, cfg.entry_radius), (via, cfg.via_radius)],
        )
        if positions is not None and positions.shape[0] >= 3:
            return Trajectory(traj_id, cfg.dt, positions, target, cfg.table_height)
        if stats is not None:
            stats["discarded"] = stats.get("discarded", 0) + 1


def generate_dataset(cfg: GenConfig, n: int, seed=None):
    """n trajectories on independent seeded streams; returns (trajs, stats)."""
    if seed is None:
        seed = cfg.seed
    stats = {"discarded": 0}
    trajs = []
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))
        trajs.append(generate_trajectory(cfg, rng, traj_id=i, stats=stats))
    return trajs, stats


# -- featurization ---------------------------------------------------------------


def history_features(positions, dt: float) -> np.ndarray:
    """(M, 9) rows of [position relative to the last point, velocity, acceleration].

    Velocities/accelerations are first/second differences; row 0 is
    backfilled from row 1 (no difference exists there).
    """
    p = np.asarray(positions, dtype=np.float64)
    m = p.shape[0]
    vel = np.zeros_like(p)
    acc = np.zeros_like(p)
    if m >= 2:
        vel[1:] = (p[1:] - p[:-1]) / dt
        vel[0] = vel[1]
        acc[1:] = (vel[1:] - vel[:-1]) / dt
        acc[0] = acc[1] if m >= 3 else 0.0
    rel = p - p[-1]
    return np.concatenate([rel, vel, acc], axis=1).astype(np.float32)


def featurize(traj: Trajectory, t_obs: int, horizon: int) -> FeaturizedSample:
    """Cut a training window at step index t_obs (0-based, inclusive)."""
    n = len(traj)
    if not (2 <= t_obs <= n - 1):
        raise ValueError(f"t_obs {t_obs} outside [2, {n - 1}]")
    x = history_features(traj.positions[: t_obs + 1], traj.dt)

    y = np.zeros((horizon, 3), dtype=np.float32)
    mask = np.zeros(horizon, dtype=np.float32)
    future_pos = np.zeros((horizon, 3))
    valid = min(horizon, n - 1 - t_obs)
    if valid > 0:
        seg = traj.positions[t_obs : t_obs + valid + 1]
        y[:valid] = ((seg[1:] - seg[:-1]) / traj.dt).astype(np.float32)
        mask[:valid] = 1.0
        future_pos[:valid] = seg[1:]
    return FeaturizedSample(
        x=x,
        y=y,
        y_mask=mask,
        origin=traj.positions[t_obs].copy(),
        last_velocity=x[-1, 3:6].copy(),
        future_positions=future_pos,
    )


# -- dataset files -----------------------------------------------------------------


class DatasetError(ValueError):
    pass


def write_dataset(trajs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajs:
            rec = {
                "id": t.id,
                "dt": t.dt,
                "table_height": t.table_height,
                "target": t.target.tolist(),
                "positions": t.positions.tolist(),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_dataset(path):
    trajs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: invalid record: {e}") from e
            for key in ("id", "dt", "table_height", "target", "positions"):
                if key not in rec:
                    raise DatasetError(f"{path}:{lineno}: missing field {key!r}")
            trajs.append(Trajectory(
                rec["id"], rec["dt"], rec["positions"], rec["target"],
                rec["table_height"],
            ))
    return trajs


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def split_dataset(trajs, train_frac: float = 0.9):
    """Deterministic disjoint split keyed on a hash of the trajectory id."""
    cut = int(train_frac * 10)
    train = [t for t in trajs if _splitmix64(t.id) % 10 < cut]
    test = [t for t in trajs if _splitmix64(t.id) % 10 >= cut]
    return train, test
