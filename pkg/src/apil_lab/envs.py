"""Grid environments with shortest-path distances and reference action sets."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ENCODE_EMPTY = 0.0
ENCODE_WALL = 0.25
ENCODE_AGENT = 0.5
ENCODE_GOAL = 1.0


class GridPos(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class EnvState:
    agent: GridPos
    goal: GridPos
    step_count: int
    terminal: bool


class GridWorld:
    """5x5 corridor-free grid, start (0,0), goal (4,4), actions [right, down].

    A move that would leave the grid is deflected to the only in-grid
    direction, so every step reduces the goal distance by exactly one and
    any 8-step episode terminates at the goal.
    """

    kind = "grid"
    side = 5
    horizon = 8
    n_actions = 2
    action_names = ("right", "down")
    always_succeeds = True

    RIGHT = 0
    DOWN = 1

    def __init__(self):
        self.state_dim = self.side * self.side
        self._goal = GridPos(self.side - 1, self.side - 1)

    def reset(self) -> EnvState:
        return EnvState(GridPos(0, 0), self._goal, 0, False)

    def step(self, state: EnvState, action: int) -> EnvState:
        if state.terminal:
            raise ValueError("step called on a terminal state")
        if action not in (self.RIGHT, self.DOWN):
            raise ValueError(f"invalid action {action}")
        r, c = state.agent
        last = self.side - 1
        if action == self.RIGHT:
            agent = GridPos(r, c + 1) if c < last else GridPos(r + 1, c)
        else:
            agent = GridPos(r + 1, c) if r < last else GridPos(r, c + 1)
        count = state.step_count + 1
        terminal = agent == state.goal or count == self.horizon
        return EnvState(agent, state.goal, count, terminal)

    def distance(self, state: EnvState) -> float:
        r, c = state.agent
        return float((self.side - 1 - r) + (self.side - 1 - c))

    def ref_action_set(self, state: EnvState) -> tuple[int, ...]:
        if state.terminal:
            raise ValueError("reference actions undefined at a terminal state")
        r, c = state.agent
        last = self.side - 1
        if r < last and c < last:
            return (self.RIGHT, self.DOWN)
        if r == last:
            return (self.RIGHT,)
        return (self.DOWN,)

    def encode(self, state: EnvState) -> np.ndarray:
        vec = np.zeros(self.state_dim)
        vec[state.goal.row * self.side + state.goal.col] = ENCODE_GOAL
        vec[state.agent.row * self.side + state.agent.col] = ENCODE_AGENT
        return vec


DEFAULT_MAZE_MAP = """\
S.....
.####.
......
.####.
......
#####G
"""

# move deltas in canonical order [up, right, down, left]
MAZE_DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))


class MazeGrid:
    """Walled grid parsed from a text map; bumping a wall or border is a no-op."""

    kind = "maze"
    n_actions = 4
    action_names = ("up", "right", "down", "left")
    always_succeeds = False

    def __init__(self, map_text: str = DEFAULT_MAZE_MAP, horizon: int = 12):
        rows = [line for line in map_text.splitlines() if line]
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise ValueError("maze map must be rectangular and non-empty")
        self.n_rows = len(rows)
        self.n_cols = len(rows[0])
        self.state_dim = self.n_rows * self.n_cols
        self.horizon = horizon
        self._walls = np.zeros((self.n_rows, self.n_cols), dtype=bool)
        start = goal = None
        for r, line in enumerate(rows):
            for c, ch in enumerate(line):
                if ch == "#":
                    self._walls[r, c] = True
                elif ch == "S":
                    start = GridPos(r, c)
                elif ch == "G":
                    goal = GridPos(r, c)
                elif ch != ".":
                    raise ValueError(f"unknown map character {ch!r}")
        if start is None or goal is None:
            raise ValueError("maze map needs exactly one S and one G")
        self._start = start
        self._goal = goal
        self._dist = self._bfs_from_goal()
        if not np.isfinite(self._dist[start]):
            raise ValueError("goal is unreachable from the start cell")
        if horizon < self._dist[start]:
            raise ValueError(
                f"horizon {horizon} is shorter than the {int(self._dist[start])}-step "
                "optimal path"
            )

    def _bfs_from_goal(self) -> np.ndarray:
        dist = np.full((self.n_rows, self.n_cols), np.inf)
        dist[self._goal] = 0.0
        frontier = deque([self._goal])
        while frontier:
            r, c = frontier.popleft()
            for dr, dc in MAZE_DELTAS:
                nr, nc = r + dr, c + dc
                if (0 <= nr < self.n_rows and 0 <= nc < self.n_cols
                        and not self._walls[nr, nc] and dist[nr, nc] == np.inf):
                    dist[nr, nc] = dist[r, c] + 1.0
                    frontier.append(GridPos(nr, nc))
        return dist

    def reset(self) -> EnvState:
        return EnvState(self._start, self._goal, 0, False)

    def _move(self, pos: GridPos, action: int) -> GridPos:
        dr, dc = MAZE_DELTAS[action]
        nr, nc = pos.row + dr, pos.col + dc
        if not (0 <= nr < self.n_rows and 0 <= nc < self.n_cols):
            return pos
        if self._walls[nr, nc]:
            return pos
        return GridPos(nr, nc)

    def step(self, state: EnvState, action: int) -> EnvState:
        if state.terminal:
            raise ValueError("step called on a terminal state")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"invalid action {action}")
        agent = self._move(state.agent, action)
        count = state.step_count + 1
        terminal = agent == state.goal or count == self.horizon
        return EnvState(agent, state.goal, count, terminal)

    def distance(self, state: EnvState) -> float:
        d = self._dist[state.agent]
        if not np.isfinite(d):
            raise ValueError(f"cell {state.agent} cannot reach the goal")
        return float(d)

    def ref_action_set(self, state: EnvState) -> tuple[int, ...]:
        if state.terminal:
            raise ValueError("reference actions undefined at a terminal state")
        here = self._dist[state.agent]
        return tuple(a for a in range(self.n_actions)
                     if self._dist[self._move(state.agent, a)] == here - 1.0)

    def encode(self, state: EnvState) -> np.ndarray:
        vec = np.full(self.state_dim, ENCODE_EMPTY)
        vec[self._walls.reshape(-1)] = ENCODE_WALL
        vec[state.goal.row * self.n_cols + state.goal.col] = ENCODE_GOAL
        vec[state.agent.row * self.n_cols + state.agent.col] = ENCODE_AGENT
        return vec

    def free_cells(self) -> list[GridPos]:
        return [GridPos(r, c) for r in range(self.n_rows) for c in range(self.n_cols)
                if not self._walls[r, c]]


def make_env(kind: str, map_path=None):
    if kind == "grid":
        return GridWorld()
    if kind == "maze":
        if map_path is None:
            return MazeGrid()
        with open(map_path) as fh:
            return MazeGrid(fh.read())
    raise ValueError(f"unknown environment kind {kind!r}")
