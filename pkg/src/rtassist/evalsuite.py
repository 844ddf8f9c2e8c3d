"""Evaluation harness: displacement errors, baselines, and experiments.

Three studies at desk scale: most-likely / best-of-20 displacement errors
against a deterministic residual-velocity LSTM baseline, a scripted
shared-autonomy comparison (teleop / MaxEnt-IOC-assisted / model-assisted),
and a change-of-intent study scoring per-step goal estimates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, constant, no_grad
from .control import ControllerConfig, NoAssist, RTAssist, SharedController
from .model import (
    INPUT_GAINS,
    ModelConfig,
    RTModel,
    CheckpointError,
    _config_from_meta,
    _linear,
    load_checkpoint,
    pack_histories,
    save_checkpoint,
)
from .autodiff import init_lstm
from .prediction import GoalBelief, Predictor, integrate_velocities, \
    rollout_most_likely, rollout_samples
from .scene import Scene
from .simdata import featurize, history_features
from .training import Adam, TrainConfig, clip_global_norm, \
    make_training_batches, should_stop, validation_windows


@dataclass
class Metrics:
    ade_ml: float  # mm
    fde_ml: float
    ade_bo20: float | None = None
    fde_bo20: float | None = None

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class IntentReport:
    accuracy: float
    robustness: dict  # eps -> accuracy in the pre-switch zone
    adaptability: float

    def as_dict(self):
        return {"accuracy": self.accuracy, "adaptability": self.adaptability,
                "robustness": {str(k): v for k, v in self.robustness.items()}}


def ade_fde(pred, truth):
    """Mean and final Euclidean displacement between aligned paths."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.shape[0] < 1:
        raise ValueError(f"ade_fde: shapes {pred.shape} vs {truth.shape}")
    d = np.linalg.norm(pred - truth, axis=1)
    return float(d.mean()), float(d[-1])


# -- model evaluation ------------------------------------------------------------


def evaluate_model(model: RTModel, trajs, k: int = 20, seed: int = 0,
                   chunk: int = 256) -> Metrics:
    """Most-likely and best-of-k displacement errors on held-out trajectories."""
    samples = validation_windows(trajs, model.cfg.horizon)
    rng = np.random.default_rng(seed)
    ade_ml, fde_ml, ade_bo, fde_bo = [], [], [], []
    for i in range(0, len(samples), chunk):
        part = [s for s in samples[i : i + chunk] if s.y_mask.any()]
        if not part:
            continue
        x, x_mask = pack_histories([s.x for s in part])
        last_vel = np.stack([s.last_velocity for s in part])
        out = rollout_most_likely(model, x, x_mask, last_vel)
        vel_k = rollout_samples(model, x, x_mask, last_vel, k, rng)
        for b, s in enumerate(part):
            valid = s.y_mask > 0
            truth = s.future_positions[valid]
            pred = integrate_velocities(s.origin, out["velocities"][b],
                                        model.cfg.dt)[valid]
            a, f = ade_fde(pred, truth)
            ade_ml.append(a)
            fde_ml.append(f)
            best_a, best_f = np.inf, np.inf
            for j in range(k):
                pj = integrate_velocities(s.origin, vel_k[b, j],
                                          model.cfg.dt)[valid]
                a_j, f_j = ade_fde(pj, truth)
                best_a = min(best_a, a_j)
                best_f = min(best_f, f_j)
            ade_bo.append(best_a)
            fde_bo.append(best_f)
    return Metrics(
        ade_ml=float(np.mean(ade_ml) * 1000),
        fde_ml=float(np.mean(fde_ml) * 1000),
        ade_bo20=float(np.mean(ade_bo) * 1000),
        fde_bo20=float(np.mean(fde_bo) * 1000),
    )


# -- vanilla residual LSTM baseline ------------------------------------------------


class VanillaLSTM:
    """Deterministic position-based baseline.

    One LSTM over the raw (absolute) position sequence; a linear head emits
    the next step's velocity. Past the observation cut it runs on positions
    integrated from its own outputs; training teacher-forces ground-truth
    positions. No dynamics features: the baseline sees where the gripper
    has been, not how fast it was moving.
    """

    POS_GAIN = 2.0

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.lstm = init_lstm(3, cfg.hidden_size, rng)
        self.head_w, self.head_b = _linear(rng, cfg.hidden_size, cfg.output_dim)

    def named_parameters(self):
        return {
            "lstm.w_ih": self.lstm.w_ih,
            "lstm.w_hh": self.lstm.w_hh,
            "lstm.b": self.lstm.b,
            "head_w": self.head_w,
            "head_b": self.head_b,
        }

    def parameters(self):
        return list(self.named_parameters().values())

    @staticmethod
    def _absolute_positions(batch):
        """(B, T, 3) absolute positions from relative rows plus origins."""
        pos = batch["x"][:, :, :3].astype(np.float64).copy()
        pos += batch["origin"][:, None, :]
        pos *= batch["x_mask"][:, :, None]  # keep padded rows at zero
        return pos

    def _encode(self, pos, mask):
        x = (pos * self.POS_GAIN).astype(np.float32)
        helper = RTModel.__new__(RTModel)  # reuse the masked sequence runner
        helper.cfg = self.cfg
        return helper._run_lstm(self.lstm, x, mask)

    def decode_rollout(self, batch, steps: int):
        """Self-fed deterministic rollout, (B, steps, 3) numpy."""
        from .autodiff import lstm_cell

        with no_grad():
            pos_hist = self._absolute_positions(batch)
            h, c = self._encode(pos_hist, batch["x_mask"])
            b = pos_hist.shape[0]
            vel = np.zeros((b, steps, 3))
            pos = batch["origin"].astype(np.float64).copy()
            for t in range(steps):
                v = (h @ self.head_w + self.head_b).data.astype(np.float64)
                vel[:, t] = v
                pos = pos + v * self.cfg.dt
                row = constant((pos * self.POS_GAIN).astype(np.float32))
                h, c = lstm_cell(row, h, c, self.lstm)
        return vel

    def loss(self, batch) -> Tensor:
        """Teacher-forced squared error over valid future steps."""
        from .autodiff import lstm_cell

        pos_hist = self._absolute_positions(batch)
        h, c = self._encode(pos_hist, batch["x_mask"])
        y = batch["y"].astype(np.float64)
        b = y.shape[0]
        total = constant(np.zeros((b, 1), dtype=np.float32))
        pos = batch["origin"].astype(np.float64).copy()
        for t in range(self.cfg.horizon):
            pred = h @ self.head_w + self.head_b
            diff = pred - constant(y[:, t, :].astype(np.float32))
            total = total + (diff * diff).sum(axis=-1) * constant(
                batch["y_mask"][:, t : t + 1]
            )
            pos = pos + y[:, t] * self.cfg.dt
            row = constant((pos * self.POS_GAIN).astype(np.float32))
            h, c = lstm_cell(row, h, c, self.lstm)
        return total.mean()

    def save(self, path):
        save_checkpoint(path, self.cfg, self.named_parameters(), arch="vanilla")

    @classmethod
    def load(cls, path) -> "VanillaLSTM":
        meta, tensors = load_checkpoint(path)
        if meta.get("arch") != "vanilla":
            raise CheckpointError(f"{path}: not a vanilla checkpoint")
        model = cls(_config_from_meta(meta), seed=0)
        for name, p in model.named_parameters().items():
            p.data[...] = tensors[name]
        return model


def _samples_to_batch(part):
    x, x_mask = pack_histories([s.x for s in part])
    return {
        "x": x,
        "x_mask": x_mask,
        "y": np.stack([s.y for s in part]),
        "y_mask": np.stack([s.y_mask for s in part]),
        "last_vel": np.stack([s.last_velocity for s in part]),
        "origin": np.stack([s.origin for s in part]),
    }


def vanilla_ade_mm(model: VanillaLSTM, samples, chunk: int = 512) -> float:
    errs = []
    for i in range(0, len(samples), chunk):
        part = samples[i : i + chunk]
        vel = model.decode_rollout(_samples_to_batch(part), model.cfg.horizon)
        for b, s in enumerate(part):
            valid = s.y_mask > 0
            if not valid.any():
                continue
            pred = integrate_velocities(s.origin, vel[b], model.cfg.dt)[valid]
            a, _ = ade_fde(pred, s.future_positions[valid])
            errs.append(a)
    return float(np.mean(errs) * 1000)


def train_vanilla(model: VanillaLSTM, train_trajs, val_trajs, cfg: TrainConfig,
                  ckpt_path, verbose: bool = True):
    """Same windowing and optimizer as the main trainer, squared-error loss."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    val_samples = validation_windows(val_trajs, model.cfg.horizon)
    report = []
    best = np.inf
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in make_training_batches(train_trajs, model.cfg.horizon,
                                           cfg.batch_size, rng):
            opt.zero_grad()
            loss = model.loss(batch)
            loss.backward()
            clip_global_norm(opt.params, cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
        val = vanilla_ade_mm(model, val_samples) if val_samples else np.nan
        report.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                       "val_ade": val})
        if verbose:
            print(f"[vanilla] epoch {epoch:3d}  loss {np.mean(losses):10.5f}  "
                  f"val_ade {val:8.2f} mm")
        history.append(val)
        if val < best:
            best = val
            model.save(ckpt_path)
        if should_stop(history, cfg.patience):
            break
    return report


def evaluate_vanilla(model: VanillaLSTM, trajs) -> Metrics:
    samples = validation_windows(trajs, model.cfg.horizon)
    samples = [s for s in samples if s.y_mask.any()]
    ade, fde = [], []
    vel = model.decode_rollout(_samples_to_batch(samples), model.cfg.horizon)
    for b, s in enumerate(samples):
        valid = s.y_mask > 0
        pred = integrate_velocities(s.origin, vel[b], model.cfg.dt)[valid]
        a, f = ade_fde(pred, s.future_positions[valid])
        ade.append(a)
        fde.append(f)
    return Metrics(ade_ml=float(np.mean(ade) * 1000), fde_ml=float(np.mean(fde) * 1000))


# -- MaxEnt IOC baseline -------------------------------------------------------------


def maxent_ioc_probs(positions, goals, lam: float = 5.0) -> np.ndarray:
    """Goal posterior from exponentiated hindsight progress.

    score(g) = exp(lam * (|p0 - g| - |pt - g| - len(path))): progress toward
    g minus distance actually travelled; straight lines at a goal score 0,
    everything else negative.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    goals = np.asarray(goals, dtype=np.float64).reshape(-1, 3)
    p0, pt = positions[0], positions[-1]
    path_len = float(np.linalg.norm(np.diff(positions, axis=0), axis=1).sum())
    exponent = lam * (
        np.linalg.norm(p0 - goals, axis=1) - np.linalg.norm(pt - goals, axis=1)
        - path_len
    )
    e = np.exp(exponent - exponent.max())
    return e / e.sum()


class MaxEntAssist:
    """Goal-attraction-only assistance driven by the MaxEnt IOC posterior."""

    def __init__(self, lam: float = 5.0):
        self.lam = lam

    def predict(self, history, scene: Scene):
        probs = maxent_ioc_probs(history, scene.goals, self.lam)
        return None, GoalBelief(scene.goals, probs.copy(), probs, False)


# -- scripted noisy button agent ------------------------------------------------------


BUTTON_THRESHOLD = 0.3  # press an axis if its share of the direction exceeds this
FLIP_PROB = 0.1


def quantize_direction(d) -> np.ndarray:
    """Map a desired direction onto the six-button (two per axis) command set."""
    d = np.asarray(d, dtype=np.float64)
    m = np.abs(d).max()
    if m <= 0:
        return np.zeros(3)
    out = np.where(np.abs(d) >= BUTTON_THRESHOLD * m, np.sign(d), 0.0)
    return out


def agent_command(p, goal, rng, flip_prob: float = FLIP_PROB) -> np.ndarray:
    """Intended button combo toward the goal, with button-flip noise."""
    cmd = quantize_direction(np.asarray(goal) - np.asarray(p))
    if flip_prob > 0 and rng.random() < flip_prob:
        axis = rng.integers(0, 3)
        cmd = cmd.copy()
        cmd[axis] = rng.integers(-1, 2)
    return cmd


# -- change-of-intent study ------------------------------------------------------------


@dataclass
class IntentTrajectory:
    positions: np.ndarray  # (N, 3)
    labels: np.ndarray  # (N,) goal index intended at each step
    switch_step: int
    goal_from: int
    goal_to: int


def synthesize_intent_trajectory(scene: Scene, rng, speed: float = 0.1,
                                 dt: float = 0.05) -> IntentTrajectory:
    """Button-agent reach that switches goals at 40-60% of the approach."""
    g_from, g_to = rng.choice(len(scene.goals), size=2, replace=False)
    start = np.array([
        rng.uniform(0.35, 0.65), rng.uniform(-0.2, 0.2), rng.uniform(0.25, 0.4),
    ])
    switch_frac = rng.uniform(0.4, 0.6)
    d0 = np.linalg.norm(scene.goals[g_from] - start)

    p = start.copy()
    positions = [p.copy()]
    labels = [g_from]
    switched = False
    switch_step = 0
    for step in range(1, 1200):
        goal = scene.goals[g_to] if switched else scene.goals[g_from]
        if not switched and np.linalg.norm(scene.goals[g_from] - p) <= (1 - switch_frac) * d0:
            switched = True
            switch_step = step
            goal = scene.goals[g_to]
        cmd = agent_command(p, goal, rng)
        n = np.linalg.norm(cmd)
        if n > 0:
            p = p + cmd / n * speed * dt
        p[2] = max(p[2], scene.table_height)
        positions.append(p.copy())
        labels.append(g_to if switched else g_from)
        if switched and np.linalg.norm(scene.goals[g_to] - p) < 0.02:
            break
    return IntentTrajectory(np.array(positions), np.array(labels), switch_step,
                            int(g_from), int(g_to))


def synthesize_intent_set(scene: Scene, n: int, seed: int = 0):
    out = []
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))
        out.append(synthesize_intent_trajectory(scene, rng))
    return out


def _rt_step_estimates(model: RTModel, trajs, scene: Scene, min_steps: int = 3):
    """argmax goal per step per trajectory, batched across trajectories."""
    predictor = Predictor(model)
    max_len = max(t.positions.shape[0] for t in trajs)
    estimates = [np.full(t.positions.shape[0], -1, dtype=int) for t in trajs]
    for step in range(min_steps, max_len):
        active = [i for i, t in enumerate(trajs) if t.positions.shape[0] > step]
        if not active:
            break
        histories = [trajs[i].positions[: step + 1] for i in active]
        beliefs = predictor.goal_beliefs_batch(histories, scene.goals,
                                               scene.table_height)
        for i, b in zip(active, beliefs):
            estimates[i][step] = int(np.argmax(b.probs))
    return estimates


def _maxent_step_estimates(trajs, scene: Scene, lam: float = 5.0, min_steps: int = 3):
    estimates = []
    for t in trajs:
        est = np.full(t.positions.shape[0], -1, dtype=int)
        for step in range(min_steps, t.positions.shape[0]):
            probs = maxent_ioc_probs(t.positions[: step + 1], scene.goals, lam)
            est[step] = int(np.argmax(probs))
        estimates.append(est)
    return estimates


def intent_change_experiment(model: RTModel, trajs, scene: Scene,
                             eps_levels=(0.0, 0.01, 0.02), lam: float = 5.0,
                             seed: int = 0, min_steps: int = 3):
    """Per-method accuracy / robustness / adaptability over recorded reaches."""
    reports = {}
    for method in ("rt", "maxent"):
        zone_hits = {eps: [0, 0] for eps in eps_levels}
        overall = [0, 0]
        adapt = [0, 0]
        for eps_i, eps in enumerate(eps_levels):
            noisy = []
            for i, t in enumerate(trajs):
                rng = np.random.Generator(np.random.PCG64(
                    np.random.SeedSequence([seed, 991 * eps_i + 7, i])))
                pos = t.positions + rng.uniform(-eps, eps, size=t.positions.shape) \
                    if eps > 0 else t.positions
                noisy.append(IntentTrajectory(pos, t.labels, t.switch_step,
                                              t.goal_from, t.goal_to))
            if method == "rt":
                ests = _rt_step_estimates(model, noisy, scene, min_steps)
            else:
                ests = _maxent_step_estimates(noisy, scene, lam, min_steps)
            for t, est in zip(trajs, ests):
                valid = est >= 0
                pre = valid & (np.arange(len(est)) < t.switch_step)
                zone_hits[eps][0] += int((est[pre] == t.labels[pre]).sum())
                zone_hits[eps][1] += int(pre.sum())
                if eps == 0.0:
                    overall[0] += int((est[valid] == t.labels[valid]).sum())
                    overall[1] += int(valid.sum())
                    post = valid & (np.arange(len(est)) >= t.switch_step)
                    adapt[0] += int((est[post] == t.labels[post]).sum())
                    adapt[1] += int(post.sum())
        reports[method] = IntentReport(
            accuracy=overall[0] / max(overall[1], 1),
            robustness={eps: h / max(n, 1) for eps, (h, n) in zone_hits.items()},
            adaptability=adapt[0] / max(adapt[1], 1),
        )
    return reports


# -- scripted shared-autonomy study ---------------------------------------------------


@dataclass
class RoundResult:
    time_s: float
    inputs: int
    path_len: float


def run_autonomy_round(assist, scene: Scene, seed: int,
                       ctrl_cfg: ControllerConfig = None, goal_tol: float = 0.02,
                       trial_timeout: float = 60.0):
    """One round: four sequential goal approaches by the noisy button agent.

    Returns a RoundResult, or None if any trial times out (round discarded).
    """
    cfg = ctrl_cfg or ControllerConfig()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    order = rng.permutation(len(scene.goals))
    total_ticks = 0
    total_inputs = 0
    total_path = 0.0
    max_ticks = int(trial_timeout / cfg.dt)
    for trial in range(len(order)):
        goal = scene.goals[order[trial]]
        start = np.array([
            rng.uniform(0.35, 0.65), rng.uniform(-0.2, 0.2), rng.uniform(0.25, 0.4),
        ])
        ctrl = SharedController(scene, cfg, assist)
        ctrl.reset(start)
        prev_cmd = np.zeros(3)
        ticks = 0
        while np.linalg.norm(ctrl.position - goal) > goal_tol:
            if ticks >= max_ticks:
                return None
            cmd = agent_command(ctrl.position, goal, rng)
            total_inputs += int(np.sum(cmd != prev_cmd))
            prev_cmd = cmd
            ctrl.tick(cmd)
            ticks += 1
        total_ticks += ticks
        total_path += ctrl.past_length
    return RoundResult(total_ticks * cfg.dt, total_inputs, total_path)


def scripted_autonomy_experiment(model: RTModel, scene: Scene, rounds: int = 20,
                                 seed: int = 0, lam: float = 5.0,
                                 ctrl_cfg: ControllerConfig = None):
    """Mean/std of time, inputs, path length for the three control modes."""
    methods = {
        "teleop": lambda: NoAssist(),
        "maxent": lambda: MaxEntAssist(lam),
        "rt": lambda: RTAssist(model),
    }
    results = {}
    for name, make in methods.items():
        rows = []
        discarded = 0
        for r in range(rounds):
            res = run_autonomy_round(make(), scene, seed + r, ctrl_cfg)
            if res is None:
                discarded += 1
                continue
            rows.append(res)
        results[name] = {
            "time_mean": float(np.mean([r.time_s for r in rows])),
            "time_std": float(np.std([r.time_s for r in rows])),
            "inputs_mean": float(np.mean([r.inputs for r in rows])),
            "inputs_std": float(np.std([r.inputs for r in rows])),
            "path_mean": float(np.mean([r.path_len for r in rows])),
            "path_std": float(np.std([r.path_len for r in rows])),
            "rounds": len(rows),
            "discarded": discarded,
        }
    return results


# -- report files -----------------------------------------------------------------------


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def summary_table(results: dict) -> str:
    """Plain-text table of the autonomy study."""
    lines = [f"{'method':<10} {'time (s)':>16} {'inputs':>16} {'path (m)':>18}"]
    for name, r in results.items():
        lines.append(
            f"{name:<10} {r['time_mean']:>8.2f}±{r['time_std']:<6.2f} "
            f"{r['inputs_mean']:>8.1f}±{r['inputs_std']:<6.1f} "
            f"{r['path_mean']:>8.3f}±{r['path_std']:<8.3f}"
        )
    return "\n".join(lines)
