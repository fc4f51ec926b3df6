"""Continuing gridworld with a rewarding cell and teleportation."""

from __future__ import annotations

import numpy as np

from ..mdp import Mdp

UP, DOWN, LEFT, RIGHT = range(4)
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
ACTION_NAMES = ("up", "down", "left", "right")
GREEN_REWARD = 100.0


class GridworldEnv:
    """Grid with a +100 cell. Reaching it, or spending ``budget`` steps without
    reaching it, teleports the agent to a uniformly random free cell.

    Walls are blocked cells; bumping into a wall or the border leaves the
    agent in place. The learner observes the free-cell index only; the step
    counter stays internal.
    """

    ap = ("green",)

    def __init__(self, width=6, height=6, green=None, wall=False, wall_cells=None, budget=100, start=(0, 0)):
        self.width, self.height, self.budget = int(width), int(height), int(budget)
        self.green = tuple(green) if green is not None else (self.height - 1, self.width - 1)
        if wall_cells is None:
            wall_cells = [(2, c) for c in range(2, 6)] if wall else []
        self.walls = frozenset((r, c) for r, c in wall_cells if 0 <= r < self.height and 0 <= c < self.width)
        if self.green in self.walls or tuple(start) in self.walls:
            raise ValueError("green and start cells must be free")
        self.cells = [(r, c) for r in range(self.height) for c in range(self.width) if (r, c) not in self.walls]
        self.index = {cell: i for i, cell in enumerate(self.cells)}
        self.start = self.index[tuple(start)]
        self.green_index = self.index[self.green]
        n = len(self.cells)
        self.next_cell = np.array([[self.index[self._move(cell, a)] for a in range(4)] for cell in self.cells])
        self.available = np.ones((n, 4), dtype=bool)
        self.available.setflags(write=False)
        self.coords = np.array(self.cells, dtype=np.int64)
        self.state = self.start
        self.count = 0

    @property
    def n_states(self) -> int:
        return len(self.cells)

    n_actions = 4

    def _move(self, cell, a):
        r, c = cell[0] + MOVES[a][0], cell[1] + MOVES[a][1]
        if not (0 <= r < self.height and 0 <= c < self.width) or (r, c) in self.walls:
            return cell
        return (r, c)

    def label(self, s: int) -> int:
        return int(s == self.green_index)

    def reset(self, rng=None) -> int:
        self.state, self.count = self.start, 0
        return self.state

    def step(self, action: int, rng) -> tuple[int, float, int]:
        s2 = int(self.next_cell[self.state, action])
        self.count += 1
        r = 0.0
        if s2 == self.green_index:
            r = GREEN_REWARD
            s2, self.count = int(rng.integers(self.n_states)), 0
        elif self.count >= self.budget:
            s2, self.count = int(rng.integers(self.n_states)), 0
        self.state = s2
        return s2, r, self.label(s2)


def gridworld_as_mdp(env: GridworldEnv, kind: str = "exact") -> Mdp:
    """Tabular model of ``env``.

    ``exact`` augments each cell with the step counter ``k`` since the last
    teleport; :func:`exact_state_index` maps ``(k, cell)`` to the state.
    ``memoryless`` drops the counter and resets uniformly with probability
    ``1 / budget`` per step.
    """
    n, u = env.n_states, 1.0 / env.n_states
    green = env.green_index
    labels = np.array([env.label(c) for c in range(n)], dtype=np.int64)
    if kind == "memoryless":
        trans = {}
        leave = 1.0 / env.budget
        for c in range(n):
            for a in range(4):
                c2 = int(env.next_cell[c, a])
                if c2 == green:
                    trans[c, a] = [(x, u, GREEN_REWARD) for x in range(n)]
                else:
                    row = [(x, leave * u + (1.0 - leave if x == c2 else 0.0), 0.0) for x in range(n)]
                    trans[c, a] = row
        return Mdp.from_transitions(n, 4, trans, initial=env.start, labels=labels, ap=env.ap,
                                    action_names=ACTION_NAMES, coords=env.coords)
    if kind != "exact":
        raise ValueError(f"unknown model kind {kind!r}")
    index = exact_state_index(env)
    keep = np.argwhere(index >= 0)  # rows (k, cell) in index order
    teleport = [(int(x), u) for x in index[0]]
    trans = {}
    for k, c in keep:
        v = int(index[k, c])
        for a in range(4):
            c2 = int(env.next_cell[c, a])
            if c2 == green:
                trans[v, a] = [(x, p, GREEN_REWARD) for x, p in teleport]
            elif k + 1 >= env.budget:
                trans[v, a] = [(x, p, 0.0) for x, p in teleport]
            else:
                trans[v, a] = [(int(index[k + 1, c2]), 1.0, 0.0)]
    names = tuple(f"{k}:{env.cells[c][0]},{env.cells[c][1]}" for k, c in keep)
    return Mdp.from_transitions(len(keep), 4, trans, initial=int(index[0, env.start]), labels=labels[keep[:, 1]],
                                ap=env.ap, state_names=names, action_names=ACTION_NAMES,
                                coords=env.coords[keep[:, 1]])


def exact_state_index(env: GridworldEnv) -> np.ndarray:
    """``index[k, cell]`` of the counter-augmented state, or -1 where it cannot occur.

    Only pairs reachable after a teleport are kept; the green cell, for
    instance, is only ever occupied with counter 0.
    """
    n, green = env.n_states, env.green_index
    seen = np.zeros((env.budget, n), dtype=bool)
    seen[0] = True
    for k in range(env.budget - 1):
        src = np.flatnonzero(seen[k] & (np.arange(n) != green))
        nxt = env.next_cell[src].ravel()
        seen[k + 1, nxt[nxt != green]] = True
    index = np.full((env.budget, n), -1, dtype=np.int64)
    index[seen] = np.arange(int(seen.sum()))
    return index


def monotone_advice_mdp(env: GridworldEnv) -> tuple[Mdp, np.ndarray]:
    """Cells paired with a bit recording whether the last move was down or right.

    Labelled with ``monotone`` when the bit is set. Returns the MDP and the map
    from its states to learner cells.
    """
    base = gridworld_as_mdp(env, "memoryless")
    n = env.n_states
    trans = {}
    for bit in (0, 1):
        for c in range(n):
            for a in range(4):
                b2 = int(a in (DOWN, RIGHT))
                trans[bit * n + c, a] = [(b2 * n + int(s2), p, r) for s2, p, r in zip(*base.successors(c, a))]
    labels = np.repeat([0, 1], n)
    mdp = Mdp.from_transitions(2 * n, 4, trans, initial=n + env.start, labels=labels, ap=("monotone",),
                               action_names=ACTION_NAMES, coords=np.tile(env.coords, (2, 1)))
    return mdp, np.tile(np.arange(n), 2)
