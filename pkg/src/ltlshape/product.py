"""Product MDPs, almost-sure winning regions and potential synthesis."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import distance_transform_cdt
from scipy.sparse.csgraph import dijkstra

from .automata import SafetyAutomaton
from .errors import (
    DistanceClampWarning,
    EmptyRegionWarning,
    InvalidC,
    ParseError,
    RegistryMismatch,
)
from .mdp import Mdp

CLAMP_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class ProductMdp:
    """Synchronous product of an MDP and a safety DFA.

    Joint states are the label-consistent pairs ``(s, q)``: ``q`` is a state the
    automaton can occupy right after reading ``L(s)``. Pair rows share the
    CSR layout of :class:`Mdp` (row ``v * n_actions + a``).
    """

    mdp: Mdp
    aut: SafetyAutomaton
    pairs: np.ndarray  # [V, 2] of (s, q)
    index: np.ndarray  # [S, Q] -> v or -1
    initial: int
    available: np.ndarray  # [V, A]
    indptr: np.ndarray
    succ: np.ndarray
    prob: np.ndarray
    accepting: np.ndarray  # [V]

    @property
    def n_states(self) -> int:
        return len(self.pairs)

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def successors(self, v: int, a: int):
        k = v * self.n_actions + a
        lo, hi = self.indptr[k], self.indptr[k + 1]
        return self.succ[lo:hi], self.prob[lo:hi]

    def row_sums(self) -> np.ndarray:
        pair = np.repeat(np.arange(len(self.indptr) - 1), np.diff(self.indptr))
        return np.bincount(pair, weights=self.prob, minlength=len(self.indptr) - 1).reshape(-1, self.n_actions)


def build_product(mdp: Mdp, aut: SafetyAutomaton) -> ProductMdp:
    if tuple(mdp.ap) != tuple(aut.registry.names):
        raise RegistryMismatch(f"MDP propositions {mdp.ap} differ from automaton {aut.registry.names}")
    S, A, Q = mdp.n_states, mdp.n_actions, aut.n_states
    labels = mdp.labels
    # after reading L(s) from any automaton state
    reach = np.zeros((S, Q), dtype=bool)
    reach[np.repeat(np.arange(S), Q), aut.delta[:, labels].T.ravel()] = True
    q_init = int(aut.delta[aut.initial, labels[mdp.initial]])
    reach[mdp.initial, q_init] = True
    pairs = np.argwhere(reach)
    index = np.full((S, Q), -1, dtype=np.int64)
    index[pairs[:, 0], pairs[:, 1]] = np.arange(len(pairs))
    vs, vq = pairs[:, 0], pairs[:, 1]

    rows = (vs[:, None] * A + np.arange(A)).ravel()
    starts = mdp.indptr[rows]
    counts = mdp.indptr[rows + 1] - starts
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    entry = np.repeat(starts - indptr[:-1], counts) + np.arange(indptr[-1])
    s2 = mdp.succ[entry]
    q_src = np.repeat(np.repeat(vq, A), counts)
    q2 = aut.delta[q_src, labels[s2]]
    succ = index[s2, q2]
    assert np.all(succ >= 0)
    return ProductMdp(
        mdp=mdp,
        aut=aut,
        pairs=pairs,
        index=index,
        initial=int(index[mdp.initial, q_init]),
        available=mdp.available[vs],
        indptr=indptr,
        succ=succ,
        prob=mdp.prob[entry],
        accepting=aut.accepting[vq],
    )


@dataclass(frozen=True, eq=False)
class WinningRegion:
    """Almost-sure safe pairs, both on the product and projected to the MDP."""

    pairs: np.ndarray  # bool [S, A]
    product_pairs: np.ndarray | None = None  # bool [V, A]
    product: ProductMdp | None = None
    # states whose label already violates the advice from every automaton state
    violating: np.ndarray | None = None

    @property
    def is_empty(self) -> bool:
        return not self.pairs.any()

    def states(self) -> np.ndarray:
        return self.pairs.any(axis=1)

    def project(self, obs_map, n_obs: int) -> WinningRegion:
        """Existential projection through a state map ``obs_map[s] -> o``."""
        obs_map = np.asarray(obs_map)
        out = np.zeros((n_obs, self.pairs.shape[1]), dtype=bool)
        np.logical_or.at(out, obs_map, self.pairs)
        violating = None
        if self.violating is not None:
            ok = np.zeros(n_obs, dtype=bool)
            np.logical_or.at(ok, obs_map, ~self.violating)
            violating = ~ok
        return WinningRegion(out, self.product_pairs, self.product, violating)


def _predecessor_index(prod: ProductMdp):
    """CSR over successor states listing the product rows that can reach them."""
    n_rows = len(prod.indptr) - 1
    row_of = np.repeat(np.arange(n_rows), np.diff(prod.indptr))
    pos = prod.prob > 0
    m = sp.csr_matrix(
        (np.ones(int(pos.sum()), dtype=np.int8), (prod.succ[pos], row_of[pos])),
        shape=(prod.n_states, n_rows),
    )
    m.sum_duplicates()
    return m.indptr, m.indices


def almost_sure_region(prod: ProductMdp) -> WinningRegion:
    """Pairs with minimum probability 0 of leaving the accepting states.

    Removal runs as a frontier worklist: a pair becomes losing once any
    successor is losing, a state once all its available actions are losing.
    """
    A = prod.n_actions
    avail = prod.available
    losing_pair = np.zeros((prod.n_states, A), dtype=bool)
    losing_pair[~prod.accepting] = True
    losing_state = ~prod.accepting.copy()
    remaining = np.where(prod.accepting, avail.sum(axis=1), 0)
    pred_ptr, pred_rows = _predecessor_index(prod)

    frontier = np.flatnonzero(losing_state | (prod.accepting & (remaining == 0)))
    losing_state[frontier] = True
    flat = losing_pair.reshape(-1)
    while len(frontier):
        lo, hi = pred_ptr[frontier], pred_ptr[frontier + 1]
        counts = hi - lo
        idx = np.repeat(lo - np.concatenate(([0], np.cumsum(counts)[:-1])), counts) + np.arange(counts.sum())
        rows = np.unique(pred_rows[idx])
        rows = rows[~flat[rows]]
        flat[rows] = True
        v = rows // A
        np.subtract.at(remaining, v, avail.reshape(-1)[rows].astype(np.int64))
        cand = np.unique(v)
        frontier = cand[(remaining[cand] <= 0) & ~losing_state[cand]]
        losing_state[frontier] = True

    win = avail & ~losing_pair
    S = prod.mdp.n_states
    projected = np.zeros((S, A), dtype=bool)
    np.logical_or.at(projected, prod.pairs[:, 0], win)
    ok_state = np.zeros(S, dtype=bool)
    np.logical_or.at(ok_state, prod.pairs[:, 0], prod.accepting)
    return WinningRegion(projected, win, prod, ~ok_state)


def algorithm1_sweep(prod: ProductMdp, losing_pair: np.ndarray, losing_state: np.ndarray):
    """One pass of the removal loop over accepting states, in index order.

    Returns updated copies; a fixpoint of this map is the losing set.
    """
    losing_pair = losing_pair.copy()
    losing_state = losing_state.copy()
    for v in np.flatnonzero(prod.accepting):
        acts = np.flatnonzero(prod.available[v])
        for a in acts:
            succ, p = prod.successors(v, a)
            if np.any(losing_state[succ[p > 0]]):
                losing_pair[v, a] = True
        if np.all(losing_pair[v, acts]):
            losing_state[v] = True
    return losing_pair, losing_state


def almost_sure_region_sweep(prod: ProductMdp) -> np.ndarray:
    """Literal repeated-sweep form of the removal loop; returns winning product pairs."""
    losing_pair = np.zeros((prod.n_states, prod.n_actions), dtype=bool)
    losing_pair[~prod.accepting] = True
    losing_state = ~prod.accepting
    while True:
        new_pair, new_state = algorithm1_sweep(prod, losing_pair, losing_state)
        if np.array_equal(new_pair, losing_pair) and np.array_equal(new_state, losing_state):
            return prod.available & ~losing_pair
        losing_pair, losing_state = new_pair, new_state


# potentials -----------------------------------------------------------------


def l1_distance(coords: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Manhattan distance from every coordinate row to the nearest target row."""
    if not targets.any():
        return np.full(len(coords), np.inf)
    lo = coords.min(axis=0)
    shape = tuple(coords.max(axis=0) - lo + 1)
    grid = np.ones(shape, dtype=np.int8)
    grid[tuple((coords[targets] - lo).T)] = 0
    dist = distance_transform_cdt(grid, metric="taxicab")
    return dist[tuple((coords - lo).T)].astype(float)


def hop_distance(mdp: Mdp, targets: np.ndarray) -> np.ndarray:
    """Fewest transitions from each state to a target state."""
    if not targets.any():
        return np.full(mdp.n_states, np.inf)
    src = np.repeat(np.arange(mdp.n_states), np.diff(mdp.indptr).reshape(mdp.n_states, -1).sum(axis=1))
    graph = sp.csr_matrix((np.ones(len(src)), (mdp.succ, src)), shape=(mdp.n_states,) * 2)
    return dijkstra(graph, unweighted=True, indices=np.flatnonzero(targets), min_only=True)


def state_distance(mdp: Mdp, targets: np.ndarray) -> np.ndarray:
    if mdp.coords is not None:
        return l1_distance(mdp.coords, targets)
    return hop_distance(mdp, targets)


def _closer(mdp: Mdp, dist: np.ndarray) -> np.ndarray:
    """Pairs whose expected successor distance is below the current one."""
    finite = np.where(np.isfinite(dist), dist, 1e300)
    pair = np.repeat(np.arange(mdp.n_states * mdp.n_actions), np.diff(mdp.indptr))
    exp = np.bincount(pair, weights=mdp.prob * finite[mdp.succ], minlength=mdp.n_states * mdp.n_actions)
    exp = exp.reshape(mdp.n_states, mdp.n_actions)
    return mdp.available & (exp < finite[:, None] - 1e-12)


@dataclass(frozen=True)
class ConstantPenalty:
    value: float = -1.0

    def evaluate(self, mdp: Mdp, region: WinningRegion) -> np.ndarray:
        return np.full((mdp.n_states, mdp.n_actions), float(self.value))

    def __str__(self):
        return f"const:{self.value:g}"


@dataclass(frozen=True)
class ManhattanToRegion:
    """``-scale * dist(s, nearest region state)`` plus a bonus for approaching actions.

    States whose label violates the advice outright get ``fallback`` when set.
    """

    scale: float = 1.0
    closer_bonus: float = 0.0
    fallback: float | None = None

    def evaluate(self, mdp, region):
        dist = state_distance(mdp, region.states())
        out = _distance_values(mdp, dist, self.scale, self.closer_bonus, self.fallback)
        if self.fallback is not None and region.violating is not None:
            out[region.violating] = self.fallback
        return out

    def __str__(self):
        s = f"region:scale={self.scale:g},bonus={self.closer_bonus:g}"
        return s + (f",fallback={self.fallback:g}" if self.fallback is not None else "")


@dataclass(frozen=True)
class ManhattanToTarget:
    """``-scale * dist(s, nearest state labelled `label`)`` plus an approach bonus."""

    label: str
    scale: float = 1.0
    closer_bonus: float = 0.0

    def evaluate(self, mdp, region):
        if self.label not in mdp.ap:
            raise ParseError(f"unknown proposition {self.label!r}")
        bit = 1 << mdp.ap.index(self.label)
        dist = state_distance(mdp, (mdp.labels & bit) != 0)
        return _distance_values(mdp, dist, self.scale, self.closer_bonus, None)

    def __str__(self):
        return f"target:{self.label},scale={self.scale:g},bonus={self.closer_bonus:g}"


@dataclass(frozen=True, eq=False)
class Custom:
    table: np.ndarray
    name: str = "custom"

    def evaluate(self, mdp, region):
        t = np.asarray(self.table, dtype=float)
        if t.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError(f"custom distance table has shape {t.shape}")
        return t.copy()

    def __str__(self):
        return self.name


def _distance_values(mdp, dist, scale, bonus, fallback):
    far = fallback if fallback is not None else -scale * (np.nanmax(dist[np.isfinite(dist)], initial=0.0) + 1)
    base = np.where(np.isfinite(dist), -scale * dist, far)
    out = np.repeat(base[:, None], mdp.n_actions, axis=1)
    if bonus:
        out = out + bonus * _closer(mdp, dist)
    return out


def parse_distance(text: str):
    """``const:-1`` | ``region[:scale=..,bonus=..,fallback=..]`` | ``target:LABEL[,scale=..,bonus=..]`` | ``table:FILE``."""
    kind, _, rest = text.partition(":")
    opts, pos = {}, []
    for part in filter(None, rest.split(",")):
        if "=" in part:
            k, v = part.split("=", 1)
            opts[k.strip()] = float(v)
        else:
            pos.append(part.strip())
    try:
        if kind == "const":
            return ConstantPenalty(float(pos[0]) if pos else opts.get("value", -1.0))
        if kind == "region":
            return ManhattanToRegion(opts.get("scale", 1.0), opts.get("bonus", 0.0), opts.get("fallback"))
        if kind == "target":
            return ManhattanToTarget(pos[0], opts.get("scale", 1.0), opts.get("bonus", 0.0))
        if kind == "table":
            with open(rest) as fh:
                return Custom(np.array(json.load(fh), dtype=float), name=f"table:{rest}")
    except (IndexError, ValueError) as exc:
        raise ParseError(f"bad distance spec {text!r}: {exc}") from exc
    raise ParseError(f"unknown distance spec {text!r}")


@dataclass(frozen=True, eq=False)
class PotentialTable:
    values: np.ndarray  # [S, A]
    C: float
    in_region: np.ndarray  # bool [S, A]
    distance: str = ""
    clamped: int = field(default=0)

    def shifted(self, offset: float) -> PotentialTable:
        return PotentialTable(self.values + offset, self.C + offset, self.in_region, self.distance, self.clamped)

    def to_dict(self) -> dict:
        return {
            "C": float(f"{self.C:.12g}"),
            "distance": self.distance,
            "shape": list(self.values.shape),
            "in_region": ["".join("1" if b else "0" for b in row) for row in self.in_region],
            "phi": [[float(f"{x:.12g}") for x in row] for row in self.values],
        }

    @classmethod
    def from_dict(cls, data: dict) -> PotentialTable:
        bits = np.array([[c == "1" for c in row] for row in data["in_region"]], dtype=bool)
        return cls(np.array(data["phi"], dtype=float), float(data["C"]), bits, data.get("distance", ""))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> PotentialTable:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def synthesize_potential(mdp: Mdp, region: WinningRegion, C: float = 1.0, distance=None) -> PotentialTable:
    """``Phi = C`` on the winning region, ``d(s, a) < C`` elsewhere."""
    if not np.isfinite(C):
        raise InvalidC(f"C must be finite, got {C}")
    if distance is None:
        distance = ConstantPenalty(C - 1.0)
    if region.is_empty:
        warnings.warn("winning region is empty; potential is pure distance advice", EmptyRegionWarning, stacklevel=2)
    d = np.asarray(distance.evaluate(mdp, region), dtype=float)
    outside = ~region.pairs
    bad = outside & ~(d < C)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} distance values >= C clamped", DistanceClampWarning, stacklevel=2)
        d = np.where(bad, C - CLAMP_EPS, d)
    values = np.where(region.pairs, C, d)
    return PotentialTable(values, float(C), region.pairs.copy(), str(distance), int(bad.sum()))
