"""Tabletop scene description and its plain-text config format.

Config files are `key value...` lines:

    table_height 0.0
    table_x 0.25 0.75
    table_y -0.3 0.3
    start 0.45 0.0 0.35
    goal g0 0.35 -0.15 0.0
    goal g1 0.35 0.15 0.0
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Scene:
    table_height: float = 0.0
    table_x: tuple = (0.25, 0.75)
    table_y: tuple = (-0.30, 0.30)
    start: tuple = (0.45, 0.0, 0.35)
    goal_ids: list = field(default_factory=list)
    goals: np.ndarray = None  # (G, 3)

    def __post_init__(self):
        if self.goals is None:
            self.goals = np.zeros((0, 3))
        self.goals = np.asarray(self.goals, dtype=np.float64).reshape(-1, 3)
        if not self.goal_ids:
            self.goal_ids = [f"g{i}" for i in range(self.goals.shape[0])]


def cube_layout() -> Scene:
    """Four cubes in a rectangle on the table, the default task scene."""
    return Scene(goals=np.array([
        [0.35, -0.15, 0.0],
        [0.35, 0.15, 0.0],
        [0.55, -0.15, 0.0],
        [0.55, 0.15, 0.0],
    ]))


class SceneError(ValueError):
    pass


def load_scene(path) -> Scene:
    table_height = 0.0
    table_x = (0.25, 0.75)
    table_y = (-0.30, 0.30)
    start = (0.45, 0.0, 0.35)
    goal_ids, goals = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "table_height":
                    table_height = float(parts[1])
                elif parts[0] == "table_x":
                    table_x = (float(parts[1]), float(parts[2]))
                elif parts[0] == "table_y":
                    table_y = (float(parts[1]), float(parts[2]))
                elif parts[0] == "start":
                    start = tuple(float(v) for v in parts[1:4])
                elif parts[0] == "goal":
                    goal_ids.append(parts[1])
                    goals.append([float(v) for v in parts[2:5]])
                else:
                    raise SceneError(f"{path}:{lineno}: unknown key {parts[0]!r}")
            except (IndexError, ValueError) as e:
                if isinstance(e, SceneError):
                    raise
                raise SceneError(f"{path}:{lineno}: malformed line {line!r}") from e
    return Scene(table_height, table_x, table_y, start, goal_ids,
                 np.array(goals) if goals else None)


def save_scene(scene: Scene, path) -> None:
    lines = [
        f"table_height {scene.table_height}",
        f"table_x {scene.table_x[0]} {scene.table_x[1]}",
        f"table_y {scene.table_y[0]} {scene.table_y[1]}",
        f"start {scene.start[0]} {scene.start[1]} {scene.start[2]}",
    ]
    for gid, g in zip(scene.goal_ids, scene.goals):
        lines.append(f"goal {gid} {g[0]} {g[1]} {g[2]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
