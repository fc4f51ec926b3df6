"""Continual area sweeping on a floor plan, optionally with a wandering human."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..errors import ParseError
from ..mdp import Mdp
from ..product import l1_distance

SPEED = 3
SIGHT = 5.0
CLEAR_PROB = 0.2
FREQ_RANGE = (1 / 20, 1 / 10)
OFFSETS = tuple((dr, dc) for dr in range(-SPEED, SPEED + 1) for dc in range(-SPEED, SPEED + 1)
                if abs(dr) + abs(dc) <= SPEED)
LAYOUT_CHARS = set("#.KCTRH")


@dataclass(frozen=True, eq=False)
class Layout:
    """Character floor plan: ``#`` wall, ``.`` floor, ``K`` kitchen, ``C`` corridor,
    ``T`` top-left room, ``R`` robot start, ``H`` human start (both corridor cells)."""

    rows: tuple

    def __post_init__(self):
        if not self.rows or len({len(r) for r in self.rows}) != 1:
            raise ParseError("layout rows must be non-empty and equally long")
        bad = set("".join(self.rows)) - LAYOUT_CHARS
        if bad:
            raise ParseError(f"unknown layout characters {sorted(bad)}")
        if "".join(self.rows).count("R") != 1:
            raise ParseError("layout needs exactly one robot start R")
        if "".join(self.rows).count("H") > 1:
            raise ParseError("layout has more than one human start H")

    @classmethod
    def from_text(cls, text: str) -> Layout:
        return cls(tuple(line.rstrip() for line in text.splitlines() if line.strip()))

    @classmethod
    def load(cls, path) -> Layout:
        with open(path) as fh:
            return cls.from_text(fh.read())

    @classmethod
    def default(cls) -> Layout:
        return cls.from_text(resources.files(__package__).joinpath("layouts/house15.txt").read_text())

    @property
    def shape(self):
        return len(self.rows), len(self.rows[0])

    def char(self, r, c) -> str:
        return self.rows[r][c]

    def find(self, ch):
        return next(((r, c) for r, row in enumerate(self.rows) for c, x in enumerate(row) if x == ch), None)


def _segment_hits_box(p0, p1, lo, hi) -> bool:
    """Whether the segment ``p0 -> p1`` meets the open box ``(lo, hi)``."""
    t0, t1 = 0.0, 1.0
    for k in range(2):
        d = p1[k] - p0[k]
        if d == 0.0:
            if not lo[k] < p0[k] < hi[k]:
                return False
            continue
        a, b = (lo[k] - p0[k]) / d, (hi[k] - p0[k]) / d
        if a > b:
            a, b = b, a
        t0, t1 = max(t0, a), min(t1, b)
    return t0 < t1


def line_of_sight(layout: Layout, cells, radius: float = SIGHT) -> np.ndarray:
    """``vis[i, j]``: cell centres within ``radius`` with no wall interior on the segment."""
    walls = [(r, c) for r in range(layout.shape[0]) for c in range(layout.shape[1]) if layout.char(r, c) == "#"]
    pts = np.asarray(cells, dtype=float)
    n = len(pts)
    vis = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i, n):
            p0, p1 = pts[i], pts[j]
            if np.hypot(*(p1 - p0)) > radius:
                continue
            rlo, rhi = min(p0[0], p1[0]), max(p0[0], p1[0])
            clo, chi = min(p0[1], p1[1]), max(p0[1], p1[1])
            ok = True
            for wr, wc in walls:
                if wr + 0.5 <= rlo or wr - 0.5 >= rhi or wc + 0.5 <= clo or wc - 0.5 >= chi:
                    continue
                if _segment_hits_box(p0, p1, (wr - 0.5, wc - 0.5), (wr + 0.5, wc + 0.5)):
                    ok = False
                    break
            vis[i, j] = vis[j, i] = ok
    return vis


class SweepingEnv:
    """Robot collecting trash that appears per cell with a fixed frequency.

    Each step the robot jumps to any cell within ``SPEED`` walking steps and
    collects the trash there (reward 1). Clean cells then turn dirty with
    their frequency, dirty cells clear with probability 0.2, and the human
    (if any) moves to a uniformly chosen neighbouring corridor or top-left
    room cell, leaving trash behind with probability ``human_trash``.

    The learner observes the robot cell, or the robot and human cells jointly
    (index ``robot * n_human + human``) when a human is present.
    """

    n_actions = len(OFFSETS)

    def __init__(self, layout: Layout | None = None, trash_cells="kitchen", human=False, extra=False,
                 extra_fraction=0.5, human_trash=0.2, seed=0):
        self.layout = layout or Layout.default()
        L = self.layout
        H, W = L.shape
        self.cells = [(r, c) for r in range(H) for c in range(W) if L.char(r, c) != "#"]
        self.index = {cell: i for i, cell in enumerate(self.cells)}
        self.coords = np.array(self.cells, dtype=np.int64)
        kinds = np.array([L.char(r, c) for r, c in self.cells])
        self.kitchen = kinds == "K"
        self.corridor = np.isin(kinds, list("CRH"))
        self.top_left = kinds == "T"
        self.robot_start = self.index[L.find("R")]
        n = len(self.cells)
        self.target, self.robot_available = self._moves()

        rng = np.random.default_rng(seed)
        freq = rng.uniform(*FREQ_RANGE, size=n)
        source = np.zeros(n, dtype=bool)
        if trash_cells == "kitchen":
            source |= self.kitchen
        elif trash_cells == "corridor":
            source |= self.corridor
        elif trash_cells != "none":
            raise ValueError(f"unknown trash source {trash_cells!r}")
        if extra:
            right = self.corridor & (self.coords[:, 1] >= W // 2 + 1)
            pick = rng.random(n) < extra_fraction
            source |= right & pick
        self.extra_cells = np.flatnonzero(source & ~self.kitchen) if trash_cells == "kitchen" else np.array([], int)
        self.freq = np.where(source, freq, 0.0)

        self.human = bool(human)
        self.human_trash = float(human_trash) if self.human else 0.0
        if self.human:
            if L.find("H") is None:
                raise ParseError("layout has no human start H")
            self.human_cells = np.flatnonzero(self.corridor | self.top_left)
            self.human_index = {int(c): i for i, c in enumerate(self.human_cells)}
            self.human_start = self.human_index[self.index[L.find("H")]]
            self.human_moves = self._human_moves()
            self.visible = line_of_sight(L, self.cells)[:, self.human_cells]
            self.ap = ("human_visible",)
        else:
            self.ap = ("kitchen",)
        self.reset()

    # geometry

    def _moves(self):
        n = len(self.cells)
        target = np.tile(np.arange(n)[:, None], (1, self.n_actions))
        available = np.zeros((n, self.n_actions), dtype=bool)
        _H, _W = self.layout.shape
        for i, (r, c) in enumerate(self.cells):
            dist = {(r, c): 0}
            queue = deque([(r, c)])
            while queue:
                cur = queue.popleft()
                if dist[cur] == SPEED:
                    continue
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    nxt = (cur[0] + dr, cur[1] + dc)
                    if nxt in self.index and nxt not in dist:
                        dist[nxt] = dist[cur] + 1
                        queue.append(nxt)
            for a, (dr, dc) in enumerate(OFFSETS):
                if (r + dr, c + dc) in dist:
                    available[i, a] = True
                    target[i, a] = self.index[(r + dr, c + dc)]
        return target, available

    def _human_moves(self):
        moves = []
        for c in self.human_cells:
            r0, c0 = self.cells[c]
            nb = [self.human_index[self.index[(r0 + dr, c0 + dc)]]
                  for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                  if (r0 + dr, c0 + dc) in self.index and self.index[(r0 + dr, c0 + dc)] in self.human_index]
            moves.append(np.array(nb or [self.human_index[int(c)]]))
        return moves

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_human(self) -> int:
        return len(self.human_cells) if self.human else 1

    @property
    def n_states(self) -> int:
        return self.n_cells * self.n_human

    @property
    def available(self) -> np.ndarray:
        return np.repeat(self.robot_available, self.n_human, axis=0)

    def observe(self) -> int:
        return self.robot * self.n_human + (self.human_pos if self.human else 0)

    def label_of(self, robot: int, human: int = 0) -> int:
        if self.human:
            return int(self.visible[robot, human])
        return int(self.kitchen[robot])

    # dynamics

    def reset(self, rng=None) -> int:
        self.robot = self.robot_start
        self.human_pos = self.human_start if self.human else 0
        self.trash = np.zeros(self.n_cells, dtype=bool)
        return self.observe()

    def step(self, action: int, rng) -> tuple[int, float, int]:
        c = int(self.target[self.robot, action])
        r = 1.0 if self.trash[c] else 0.0
        self.trash[c] = False
        self.robot = c
        u = rng.random(self.n_cells)
        self.trash = np.where(self.trash, u >= CLEAR_PROB, u < self.freq)
        if self.human:
            options = self.human_moves[self.human_pos]
            self.human_pos = int(options[rng.integers(len(options))])
            if rng.random() < self.human_trash:
                self.trash[self.human_cells[self.human_pos]] = True
        return self.observe(), r, self.label_of(self.robot, self.human_pos)

    # models for advice synthesis

    def robot_mdp(self) -> Mdp:
        """Deterministic robot motion, labelled with ``kitchen``."""
        n, A = self.n_cells, self.n_actions
        avail = self.robot_available
        counts = avail.reshape(-1).astype(np.int64)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        succ = self.target.reshape(-1)[avail.reshape(-1)]
        return Mdp(n, A, self.robot_start, avail.copy(), indptr, succ.astype(np.int64), np.ones(len(succ)),
                   np.zeros(len(succ)), self.kitchen.astype(np.int64), ("kitchen",),
                   tuple(f"{r},{c}" for r, c in self.cells), tuple(f"{dr},{dc}" for dr, dc in OFFSETS), self.coords)

    def joint_mdp(self) -> Mdp:
        """Robot and human jointly; the human walks uniformly. Labelled with ``human_visible``."""
        if not self.human:
            raise ValueError("environment has no human")
        n, m, A = self.n_cells, self.n_human, self.n_actions
        deg = np.array([len(x) for x in self.human_moves])
        avail = np.repeat(self.robot_available, m, axis=0)
        rows_s, rows_a = np.nonzero(avail)
        robot, human = rows_s // m, rows_s % m
        counts = np.zeros(n * m * A, dtype=np.int64)
        counts[rows_s * A + rows_a] = deg[human]
        indptr = np.concatenate([[0], np.cumsum(counts)])
        nxt_robot = self.target[robot, rows_a]
        succ = np.concatenate([nxt_robot[k] * m + self.human_moves[human[k]] for k in range(len(rows_s))])
        prob = np.repeat(1.0 / deg[human], deg[human])
        labels = self.visible.reshape(-1).astype(np.int64)
        return Mdp(n * m, A, self.robot_start * m + self.human_start, avail, indptr, succ.astype(np.int64), prob,
                   np.zeros(len(succ)), labels, ("human_visible",))


@dataclass(frozen=True, eq=False)
class RobotDistanceToRegion:
    """Robot L1 distance to the nearest winning robot cell for the same human cell.

    States where the human is out of sight get ``fallback``; so do states with
    no winning cell for that human position.
    """

    env: SweepingEnv
    scale: float = 1.0
    fallback: float = -6.0

    def evaluate(self, mdp, region):
        m = self.env.n_human
        win = region.states().reshape(self.env.n_cells, m)
        out = np.full((self.env.n_cells, m), self.fallback)
        for h in range(m):
            if win[:, h].any():
                d = l1_distance(self.env.coords, win[:, h])
                out[:, h] = np.where(np.isfinite(d), -self.scale * d, self.fallback)
        out = out.reshape(-1)
        if region.violating is not None:
            out[region.violating] = self.fallback
        return np.repeat(out[:, None], self.env.n_actions, axis=1)

    def __str__(self):
        return f"robot-region:scale={self.scale:g},fallback={self.fallback:g}"
