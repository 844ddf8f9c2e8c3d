"""Tick-driven teleop simulation service.

A Session owns one simulated end-effector and advances it at a fixed tick
from latched direction commands. The FastAPI app wraps a session with HTTP
control endpoints and a 20 Hz WebSocket state stream; all payloads are
JSON text. The simulation loop only runs while a client is connected, and
every state message carries enough telemetry to recompute the blended
command it reports.
"""

from __future__ import annotations

import asyncio
import json
import time
from contextlib import asynccontextmanager

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .control import ControllerConfig, NoAssist, RTAssist, SharedController
from .evalsuite import MaxEntAssist, quantize_direction
from .prediction import plane_density_grid
from .scene import Scene, cube_layout

GRASP_DISTANCE = 0.02  # m
HEATMAP_SHAPE = (64, 64)
MODES = ("teleop", "rt-assist", "maxent-assist")


class SessionError(ValueError):
    pass


def _make_assist(mode: str, model, lam: float = 5.0):
    if mode == "teleop":
        return NoAssist()
    if mode == "maxent-assist":
        return MaxEntAssist(lam)
    if mode == "rt-assist":
        if model is None:
            raise SessionError("rt-assist mode requires a model checkpoint")
        return RTAssist(model)
    raise SessionError(f"unknown mode {mode!r}; expected one of {MODES}")


class Session:
    """Single-owner state machine; step() is the only mutator after setup."""

    def __init__(self, scene: Scene = None, mode: str = "teleop", model=None,
                 seed: int = 0, ctrl_cfg: ControllerConfig = None):
        self.scene = scene or cube_layout()
        self.mode = mode
        self.model = model
        self.ctrl_cfg = ctrl_cfg or ControllerConfig()
        self.seed = seed
        self.controller = SharedController(self.scene, self.ctrl_cfg,
                                           _make_assist(mode, model))
        self.reset(seed=seed)

    def reset(self, goals=None, seed=None, start=None) -> None:
        if goals is not None:
            goals = np.asarray(goals, dtype=np.float64).reshape(-1, 3)
            self.scene = Scene(
                self.scene.table_height, self.scene.table_x, self.scene.table_y,
                self.scene.start, [f"g{i}" for i in range(goals.shape[0])], goals,
            )
            self.controller.scene = self.scene
        if seed is not None:
            self.seed = seed
        rng = np.random.default_rng(self.seed)
        if start is None:
            start = np.array([
                rng.uniform(*self.scene.table_x),
                rng.uniform(*self.scene.table_y),
                rng.uniform(0.25, 0.40),
            ])
        self.controller.reset(np.asarray(start, dtype=np.float64))
        self.tick = 0
        self.command = np.zeros(3)
        self.command_log = []
        self.grasp_triggered = False
        self.grasped_goal = None

    def set_mode(self, mode: str) -> None:
        assist = _make_assist(mode, self.model)
        self.mode = mode
        self.controller.assist = assist
        self.controller._cached = (None, None)

    def apply_command(self, direction) -> None:
        """Latch a direction command (components in {-1, 0, 1}), latest wins."""
        direction = np.asarray(direction, dtype=np.float64).reshape(3)
        if not np.all(np.isin(direction, (-1.0, 0.0, 1.0))):
            raise SessionError(f"direction components must be -1/0/1, got {direction}")
        self.command = direction
        self.command_log.append({"tick": self.tick, "dir": direction.astype(int).tolist()})

    def step(self) -> dict:
        """Advance one tick and emit the wire `state` message."""
        if self.grasp_triggered:
            self.tick += 1
            return self._state_message(None)

        state = self.controller.tick(self.command)
        self.tick += 1

        # grasp fires near the active goal (or the nearest one in pure teleop)
        goals = self.scene.goals
        if goals.shape[0]:
            idx = state.active_goal
            if idx is None:
                idx = int(np.argmin(np.linalg.norm(goals - state.position, axis=1)))
            if np.linalg.norm(goals[idx] - state.position) < GRASP_DISTANCE:
                self.grasp_triggered = True
                self.grasped_goal = idx
        return self._state_message(state)

    def _heatmap(self):
        assist = self.controller.assist
        pm = getattr(assist, "last_position_mixture", None)
        origin = [self.scene.table_x[0], self.scene.table_y[0]]
        cell = [
            (self.scene.table_x[1] - self.scene.table_x[0]) / HEATMAP_SHAPE[1],
            (self.scene.table_y[1] - self.scene.table_y[0]) / HEATMAP_SHAPE[0],
        ]
        if pm is None:
            grid = np.zeros(HEATMAP_SHAPE)
        else:
            grid = plane_density_grid(pm, self.scene.table_height,
                                      self.scene.table_x, self.scene.table_y,
                                      HEATMAP_SHAPE)
        return {"origin": origin, "cell": cell, "rows": HEATMAP_SHAPE[0],
                "cols": HEATMAP_SHAPE[1], "grid": grid.tolist()}

    def _state_message(self, state) -> dict:
        pred_path, belief = self.controller._cached
        goals = []
        for i, (gid, g) in enumerate(zip(self.scene.goal_ids, self.scene.goals)):
            prob = float(belief.probs[i]) if belief is not None else (
                1.0 / len(self.scene.goal_ids))
            goals.append({"id": gid, "pos": g.tolist(), "prob": prob})
        if state is None:
            zeros = [0.0, 0.0, 0.0]
            weights = {k: 0.0 for k in ("w_g", "w_tr", "a_g", "a_tr", "w_g2", "w_tr2")}
            v = {"u": zeros, "g": zeros, "tr": zeros, "r": zeros}
        else:
            weights = {
                "w_g": state.w_g, "w_tr": state.w_tr, "a_g": state.a_g,
                "a_tr": state.a_tr, "w_g2": state.w_g_eff, "w_tr2": state.w_tr_eff,
            }
            v = {"u": state.v_u.tolist(), "g": state.v_g.tolist(),
                 "tr": state.v_tr.tolist(), "r": state.v_r.tolist()}
        return {
            "type": "state",
            "tick": self.tick,
            "t": self.tick * self.ctrl_cfg.dt,
            "ee": self.controller.position.tolist(),
            "goals": goals,
            "pred_path": [] if pred_path is None else np.asarray(pred_path).tolist(),
            "plane_heatmap": self._heatmap(),
            "weights": weights,
            "v": v,
            "grasp_triggered": self.grasp_triggered,
        }

    def info(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "tick": self.tick,
            "speed": self.ctrl_cfg.speed,
            "dt": self.ctrl_cfg.dt,
            "table_height": self.scene.table_height,
            "table_x": list(self.scene.table_x),
            "table_y": list(self.scene.table_y),
            "goals": [
                {"id": gid, "pos": g.tolist()}
                for gid, g in zip(self.scene.goal_ids, self.scene.goals)
            ],
            "ee": self.controller.position.tolist(),
        }


def replay_commands(session: Session, commands) -> list:
    """Re-drive a session from a recorded command log; returns state messages."""
    states = []
    log = {c["tick"]: c["dir"] for c in commands}
    last_tick = max(log) if log else 0
    while session.tick <= last_tick:
        if session.tick in log:
            session.apply_command(log[session.tick])
        states.append(session.step())
    return states


def commands_from_trajectory(traj, speed: float = 0.1) -> list:
    """Quantize a recorded trajectory's motion into per-tick button commands."""
    diffs = np.diff(traj.positions, axis=0)
    out = []
    prev = None
    for t, d in enumerate(diffs):
        cmd = quantize_direction(d).astype(int).tolist()
        if cmd != prev:
            out.append({"tick": t, "dir": cmd})
            prev = cmd
    return out


# -- async loop and app -----------------------------------------------------------


async def tick_loop(callback, hz: float, stop: asyncio.Event,
                    clock=time.monotonic, sleep=asyncio.sleep):
    """Fixed-rate scheduler with deadline-based timing (no drift)."""
    period = 1.0 / hz
    next_t = clock() + period
    while not stop.is_set():
        delay = next_t - clock()
        if delay > 0:
            await sleep(delay)
        if stop.is_set():
            break
        await callback()
        next_t += period
        if clock() - next_t > period:  # fell behind; resynchronize
            next_t = clock() + period


def build_app(session: Session, hz: float = 20.0):
    """FastAPI app serving one session; the loop runs while clients are connected."""
    clients: set = set()
    stop = asyncio.Event()

    async def on_tick():
        if not clients:
            return  # no client: session paused
        state = session.step()
        text = json.dumps(state)
        dead = []
        for ws in clients:
            try:
                await ws.send_text(text)
            except Exception:
                dead.append(ws)
        for ws in dead:
            clients.discard(ws)

    @asynccontextmanager
    async def lifespan(app):
        task = asyncio.create_task(tick_loop(on_tick, hz, stop))
        yield
        stop.set()
        task.cancel()

    app = FastAPI(lifespan=lifespan)

    @app.get("/health")
    def health():
        return {"status": "ok", "tick": session.tick}

    @app.get("/session")
    def session_info():
        return session.info()

    @app.get("/session/log")
    def session_log():
        return {"commands": session.command_log}

    @app.post("/session/reset")
    async def session_reset(body: dict):
        goals = body.get("goals")
        seed = body.get("seed")
        session.reset(goals=goals, seed=seed)
        return session.info()

    @app.post("/session/mode")
    async def session_mode(body: dict):
        mode = body.get("mode")
        try:
            session.set_mode(mode)
        except SessionError as e:
            return {"error": str(e)}
        return session.info()

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        clients.add(ws)
        try:
            while True:
                text = await ws.receive_text()
                try:
                    msg = json.loads(text)
                    session.apply_command(msg["dir"])
                except (json.JSONDecodeError, KeyError, SessionError, ValueError) as e:
                    await ws.send_text(json.dumps({"type": "error", "message": str(e)}))
        except WebSocketDisconnect:
            pass
        finally:
            clients.discard(ws)

    return app
