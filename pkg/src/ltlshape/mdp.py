"""Finite tabular MDPs and exact average-reward solvers.

Transitions are stored sparsely: the successors of pair ``k = s * n_actions + a``
occupy ``succ[indptr[k]:indptr[k + 1]]`` with matching ``prob`` and ``reward``
entries. Unavailable pairs have empty rows.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import InvalidMdp, NoConvergence, NonUnichain, NotCommunicating, ParseError

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Mdp:
    n_states: int
    n_actions: int
    initial: int
    available: np.ndarray
    indptr: np.ndarray
    succ: np.ndarray
    prob: np.ndarray
    reward: np.ndarray
    labels: np.ndarray
    ap: tuple = ()
    state_names: tuple = ()
    action_names: tuple = ()
    coords: np.ndarray | None = None

    def __post_init__(self):
        for name in ("available", "indptr", "succ", "prob", "reward", "labels"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_transitions(
        cls,
        n_states: int,
        n_actions: int,
        transitions: Mapping[tuple[int, int], Iterable[tuple[int, float, float]]],
        initial: int = 0,
        labels: Sequence[int] | None = None,
        ap: Sequence[str] = (),
        state_names: Sequence[str] | None = None,
        action_names: Sequence[str] | None = None,
        coords=None,
    ) -> Mdp:
        """Build from ``{(s, a): [(s2, p, r), ...]}``; listed pairs are the available ones."""
        available = np.zeros((n_states, n_actions), dtype=bool)
        rows = [[] for _ in range(n_states * n_actions)]
        for (s, a), outs in transitions.items():
            available[s, a] = True
            rows[s * n_actions + a] = list(outs)
        counts = np.array([len(r) for r in rows], dtype=np.int64)
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        flat = [t for r in rows for t in r]
        succ = np.array([t[0] for t in flat], dtype=np.int64)
        prob = np.array([t[1] for t in flat], dtype=float)
        reward = np.array([t[2] if len(t) > 2 else 0.0 for t in flat], dtype=float)
        if labels is None:
            labels = np.zeros(n_states, dtype=np.int64)
        return cls(
            n_states=n_states,
            n_actions=n_actions,
            initial=initial,
            available=available,
            indptr=indptr,
            succ=succ,
            prob=prob,
            reward=reward,
            labels=np.asarray(labels, dtype=np.int64),
            ap=tuple(ap),
            state_names=tuple(state_names) if state_names else tuple(f"s{i}" for i in range(n_states)),
            action_names=tuple(action_names) if action_names else tuple(f"a{i}" for i in range(n_actions)),
            coords=None if coords is None else np.asarray(coords, dtype=np.int64),
        )

    @classmethod
    def from_dense(cls, P, R, initial=0, available=None, **kwargs) -> Mdp:
        """Build from dense ``P[s, a, s2]`` and ``R[s, a, s2]`` (or ``R[s, a]``)."""
        P = np.asarray(P, dtype=float)
        R = np.asarray(R, dtype=float)
        if R.ndim == 2:
            R = np.repeat(R[:, :, None], P.shape[2], axis=2)
        S, A, _ = P.shape
        if available is None:
            available = np.ones((S, A), dtype=bool)
        trans = {}
        for s in range(S):
            for a in range(A):
                if available[s, a]:
                    nz = np.flatnonzero(P[s, a])
                    trans[(s, a)] = [(int(j), P[s, a, j], R[s, a, j]) for j in nz]
        return cls.from_transitions(S, A, trans, initial=initial, **kwargs)

    def successors(self, s: int, a: int):
        k = s * self.n_actions + a
        lo, hi = self.indptr[k], self.indptr[k + 1]
        return self.succ[lo:hi], self.prob[lo:hi], self.reward[lo:hi]

    def expected_reward(self) -> np.ndarray:
        """Expected immediate reward ``[S, A]``; unavailable pairs are 0."""
        pair = np.repeat(np.arange(self.n_states * self.n_actions), np.diff(self.indptr))
        out = np.bincount(pair, weights=self.prob * self.reward, minlength=self.n_states * self.n_actions)
        return out.reshape(self.n_states, self.n_actions)

    def transition_matrix(self) -> sp.csr_matrix:
        """Sparse ``(S*A) x S`` matrix of ``P(s, a, s2)``."""
        return sp.csr_matrix(
            (self.prob, self.succ, self.indptr),
            shape=(self.n_states * self.n_actions, self.n_states),
        )

    def policy_chain(self, policy) -> tuple[sp.csr_matrix, np.ndarray]:
        """Transition matrix and expected reward vector of the chain induced by ``policy``."""
        actions = _as_actions(policy)
        rows = np.arange(self.n_states) * self.n_actions + actions
        P = self.transition_matrix()[rows]
        r = self.expected_reward()[np.arange(self.n_states), actions]
        return P, r

    def label_of(self, s: int) -> frozenset:
        bits = int(self.labels[s])
        return frozenset(p for i, p in enumerate(self.ap) if bits >> i & 1)


@dataclass(frozen=True)
class StationaryPolicy:
    actions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int64))

    def __getitem__(self, s):
        return int(self.actions[s])

    def __len__(self):
        return len(self.actions)

    def is_valid(self, mdp: Mdp) -> bool:
        return len(self.actions) == mdp.n_states and bool(
            mdp.available[np.arange(mdp.n_states), self.actions].all()
        )


@dataclass(frozen=True)
class GainAndBias:
    gain: float
    bias_q: np.ndarray
    reference_state: int
    residual: float = field(default=0.0)
    iterations: int = field(default=0)


class Violation(NamedTuple):
    s: int | None
    a: int | None
    message: str

    def __str__(self):
        if self.s is None:
            return self.message
        if self.a is None:
            return f"state {self.s}: {self.message}"
        return f"({self.s}, {self.a}): {self.message}"


def _as_actions(policy) -> np.ndarray:
    if isinstance(policy, StationaryPolicy):
        return policy.actions
    return np.asarray(policy, dtype=np.int64)


def validate(mdp: Mdp) -> list[Violation]:
    """Report every broken structural invariant; never raises."""
    out: list[Violation] = []
    S, A = mdp.n_states, mdp.n_actions
    if not 0 <= mdp.initial < S:
        out.append(Violation(None, None, f"initial state {mdp.initial} not in states"))
    nbits = len(mdp.ap)
    if len(mdp.labels) != S:
        out.append(Violation(None, None, "label vector length differs from state count"))
    elif np.any(mdp.labels >> nbits):
        for s in np.flatnonzero(mdp.labels >> nbits):
            out.append(Violation(int(s), None, "label uses an undeclared proposition"))
    for s in range(S):
        if not mdp.available[s].any():
            out.append(Violation(s, None, "no available action"))
        for a in range(A):
            k = s * A + a
            lo, hi = mdp.indptr[k], mdp.indptr[k + 1]
            if not mdp.available[s, a]:
                if hi > lo:
                    out.append(Violation(s, a, "unavailable action lists successors"))
                continue
            succ, p, r = mdp.succ[lo:hi], mdp.prob[lo:hi], mdp.reward[lo:hi]
            if hi == lo:
                out.append(Violation(s, a, "no successors"))
                continue
            if np.any((succ < 0) | (succ >= S)):
                out.append(Violation(s, a, "successor index out of range"))
            if len(np.unique(succ)) != len(succ):
                out.append(Violation(s, a, "duplicate successor"))
            if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
                out.append(Violation(s, a, "probability out of range"))
            elif np.any(p == 0):
                out.append(Violation(s, a, "listed successor has probability 0"))
            total = float(np.sum(p))
            if not abs(total - 1.0) <= ROW_SUM_TOL:
                out.append(Violation(s, a, f"probabilities sum to {total:.15g}"))
            if not np.all(np.isfinite(r)):
                out.append(Violation(s, a, "non-finite reward"))
    return out


def _require_valid(mdp: Mdp):
    problems = validate(mdp)
    if problems:
        raise InvalidMdp("; ".join(str(v) for v in problems[:5]))


def is_communicating(mdp: Mdp) -> bool:
    """True iff every state reaches every other under some policy."""
    graph = sp.csr_matrix(
        (np.ones(len(mdp.succ)), (np.repeat(np.arange(mdp.n_states), _row_counts_by_state(mdp)), mdp.succ)),
        shape=(mdp.n_states, mdp.n_states),
    )
    n, _ = connected_components(graph, directed=True, connection="strong")
    return n == 1


def _row_counts_by_state(mdp: Mdp) -> np.ndarray:
    return np.diff(mdp.indptr).reshape(mdp.n_states, mdp.n_actions).sum(axis=1)


def recurrent_classes(P: sp.spmatrix) -> list[np.ndarray]:
    """Closed strongly connected components of a Markov chain."""
    P = sp.csr_matrix(P)
    n, comp = connected_components(P, directed=True, connection="strong")
    coo = P.tocoo()
    leaving = comp[coo.row] != comp[coo.col]
    open_ = np.zeros(n, dtype=bool)
    open_[comp[coo.row[leaving]]] = True
    return [np.flatnonzero(comp == c) for c in range(n) if not open_[c]]


def stationary_distribution(P: sp.spmatrix) -> np.ndarray:
    """Stationary distribution of a unichain transition matrix."""
    classes = recurrent_classes(P)
    if len(classes) != 1:
        raise NonUnichain(f"induced chain has {len(classes)} recurrent classes")
    cls_ = classes[0]
    Pc = sp.csr_matrix(P)[cls_][:, cls_]
    m = len(cls_)
    # mu (P - I) = 0 with one equation replaced by sum(mu) = 1
    M = (Pc.T - sp.identity(m)).tolil()
    M[m - 1, :] = np.ones(m)
    b = np.zeros(m)
    b[-1] = 1.0
    if m <= 400:
        mu_c = np.linalg.solve(M.toarray(), b)
    else:
        from scipy.sparse.linalg import spsolve

        mu_c = spsolve(M.tocsc(), b)
    mu = np.zeros(P.shape[0])
    mu[cls_] = mu_c
    return mu


def policy_gain(mdp: Mdp, policy, reward=None) -> float:
    """Exact long-run average reward of a stationary policy.

    ``reward`` optionally overrides the per-transition rewards (same layout as
    ``mdp.reward``), which is how shaped rewards are evaluated.
    """
    actions = _as_actions(policy)
    P, r = mdp.policy_chain(actions)
    if reward is not None:
        pair = np.repeat(np.arange(mdp.n_states * mdp.n_actions), np.diff(mdp.indptr))
        rbar = np.bincount(pair, weights=mdp.prob * np.asarray(reward), minlength=len(mdp.indptr) - 1)
        r = rbar.reshape(mdp.n_states, mdp.n_actions)[np.arange(mdp.n_states), actions]
    mu = stationary_distribution(P)
    return float(mu @ r)


def greedy(q: np.ndarray, available: np.ndarray) -> np.ndarray:
    """Row-wise argmax over available actions, ties to the lowest index."""
    return np.argmax(np.where(available, q, -np.inf), axis=1)


def bellman_residual(mdp: Mdp, gain: float, q: np.ndarray) -> float:
    """Max-norm residual of ``Q = E[R + max Q'] - gain`` over available pairs."""
    v = np.where(mdp.available, q, -np.inf).max(axis=1)
    target = mdp.expected_reward() + (mdp.transition_matrix() @ v).reshape(q.shape) - gain
    diff = np.abs(q - target)[mdp.available]
    return float(diff.max()) if diff.size else 0.0


def solve_average_reward(
    mdp: Mdp,
    tol: float = 1e-10,
    max_iter: int = 10**6,
    aperiodicity: float = 0.5,
) -> tuple[GainAndBias, StationaryPolicy]:
    """Optimal gain, relative Q-values and greedy policy of a communicating MDP.

    Relative value iteration on the aperiodicity-transformed operator
    ``(1 - tau) h + tau T h`` runs until the span of ``T h - h`` drops below
    ``tol``. The greedy policy is then evaluated exactly (when unichain) and
    improved until stable, which pins the Bellman residual near machine
    precision.
    """
    _require_valid(mdp)
    if not is_communicating(mdp):
        raise NotCommunicating("some state cannot reach another under any policy")
    S, A = mdp.n_states, mdp.n_actions
    ref = mdp.initial
    P = mdp.transition_matrix()
    rbar = mdp.expected_reward()
    avail = mdp.available
    h = np.zeros(S)
    it = 0
    while True:
        q = rbar + (P @ h).reshape(S, A)
        th = np.where(avail, q, -np.inf).max(axis=1)
        delta = th - h
        span = delta.max() - delta.min()
        it += 1
        if span < tol:
            break
        if it >= max_iter:
            raise NoConvergence(f"span {span:.3e} after {it} iterations")
        h = h + aperiodicity * delta
        h -= h[ref]
    gain = 0.5 * (delta.max() + delta.min())
    q = rbar + (P @ h).reshape(S, A) - gain
    pi = greedy(q, avail)

    for _ in range(100):
        refined = _evaluate_policy(mdp, pi, ref, P, rbar)
        if refined is None:
            break
        g_pi, h_pi = refined
        q_pi = rbar + (P @ h_pi).reshape(S, A) - g_pi
        best = np.where(avail, q_pi, -np.inf).max(axis=1)
        current = q_pi[np.arange(S), pi]
        improvable = best > current + 1e-12 * np.maximum(1.0, np.abs(best))
        if not improvable.any():
            gain, q = g_pi, q_pi
            break
        pi = np.where(improvable, greedy(q_pi, avail), pi)

    pi = greedy(q, avail)
    q = q - np.where(avail[ref], q[ref], -np.inf).max()
    q = np.where(avail, q, 0.0)
    residual = bellman_residual(mdp, gain, q)
    logger.debug("average-reward solve: gain=%.12g residual=%.2e iters=%d", gain, residual, it)
    return GainAndBias(float(gain), q, ref, residual, it), StationaryPolicy(pi)


def _evaluate_policy(mdp, pi, ref, P, rbar):
    """Solve ``h = r_pi - g + P_pi h`` with ``h[ref] = 0``; None if multichain."""
    S, A = mdp.n_states, mdp.n_actions
    rows = np.arange(S) * A + pi
    Ppi = P[rows]
    if len(recurrent_classes(Ppi)) != 1:
        return None
    r = rbar[np.arange(S), pi]
    # unknowns: h (with h[ref] replaced by g)
    M = (sp.identity(S) - Ppi).tolil()
    M[:, ref] = np.ones((S, 1))
    if S <= 600:
        x = np.linalg.solve(M.toarray(), r)
    else:
        from scipy.sparse.linalg import spsolve

        x = spsolve(M.tocsc(), r)
    g = x[ref]
    h = x.copy()
    h[ref] = 0.0
    return float(g), h


def simulate(mdp: Mdp, policy, steps: int, seed: int, start: int | None = None) -> np.ndarray:
    """Reward trace of ``steps`` transitions under a stationary policy."""
    actions = _as_actions(policy)
    rng = np.random.default_rng(seed)
    u = rng.random(steps)
    s = mdp.initial if start is None else start
    out = np.empty(steps)
    A = mdp.n_actions
    cum = _cumulative_probs(mdp)
    for t in range(steps):
        k = s * A + actions[s]
        lo, hi = mdp.indptr[k], mdp.indptr[k + 1]
        j = lo + min(int(np.searchsorted(cum[lo:hi], u[t], side="right")), hi - lo - 1)
        out[t] = mdp.reward[j]
        s = int(mdp.succ[j])
    return out


def _cumulative_probs(mdp: Mdp) -> np.ndarray:
    cum = np.cumsum(mdp.prob)
    starts = mdp.indptr[:-1]
    counts = np.diff(mdp.indptr)
    offset = np.where(starts > 0, cum[np.maximum(starts - 1, 0)], 0.0)
    base = np.repeat(offset, counts)
    return cum - base


def monte_carlo_gain(mdp: Mdp, policy, steps: int, seed: int) -> float:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return float(simulate(mdp, policy, steps, seed).mean())


def random_mdp(
    n_states: int,
    n_actions: int,
    rng: np.random.Generator,
    max_successors: int = 3,
    dense: bool = False,
    reward_scale: float = 1.0,
) -> Mdp:
    """Random communicating MDP with rewards uniform on ``[0, reward_scale]``.

    Each pair draws 1..max_successors successors (all states when ``dense``)
    with Dirichlet probabilities; draws repeat until the MDP communicates.
    """
    while True:
        trans = {}
        for s in range(n_states):
            for a in range(n_actions):
                if dense:
                    succ = np.arange(n_states)
                else:
                    k = int(rng.integers(1, min(max_successors, n_states) + 1))
                    succ = np.sort(rng.choice(n_states, size=k, replace=False))
                p = rng.dirichlet(np.ones(len(succ)))
                p[-1] = 1.0 - p[:-1].sum()
                if np.any(p <= 0):
                    continue
                r = rng.random(len(succ)) * reward_scale
                trans[(s, a)] = list(zip(succ.tolist(), p.tolist(), r.tolist()))
        if len(trans) < n_states * n_actions:
            continue
        mdp = Mdp.from_transitions(n_states, n_actions, trans)
        if not validate(mdp) and is_communicating(mdp):
            return mdp


# JSON interchange -----------------------------------------------------------


def mdp_to_dict(mdp: Mdp) -> dict:
    states = []
    for s in range(mdp.n_states):
        entry = {"name": mdp.state_names[s], "labels": sorted(mdp.label_of(s))}
        if mdp.coords is not None:
            entry["coords"] = [int(c) for c in mdp.coords[s]]
        states.append(entry)
    transitions = []
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            if not mdp.available[s, a]:
                continue
            succ, p, r = mdp.successors(s, a)
            transitions.append(
                {
                    "s": mdp.state_names[s],
                    "a": mdp.action_names[a],
                    "to": [
                        {"s2": mdp.state_names[j], "p": float(f"{pp:.15g}"), "r": float(rr)}
                        for j, pp, rr in zip(succ, p, r)
                    ],
                }
            )
    return {
        "ap": list(mdp.ap),
        "states": states,
        "actions": list(mdp.action_names),
        "initial": mdp.state_names[mdp.initial],
        "transitions": transitions,
    }


def mdp_from_dict(data: dict) -> Mdp:
    try:
        ap = list(data.get("ap", []))
        states = data["states"]
        actions = list(data["actions"])
        names = [st["name"] if isinstance(st, dict) else str(st) for st in states]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed MDP document: {exc}") from exc
    if len(set(names)) != len(names):
        raise ParseError("duplicate state name")
    if len(set(actions)) != len(actions):
        raise ParseError("duplicate action name")
    s_index = {n: i for i, n in enumerate(names)}
    a_index = {n: i for i, n in enumerate(actions)}
    ap_index = {p: i for i, p in enumerate(ap)}

    def lookup(table, key, what):
        if isinstance(key, int) and not isinstance(key, bool):
            if 0 <= key < len(table):
                return key
        elif key in table:
            return table[key]
        raise ParseError(f"unknown {what} {key!r}")

    labels = []
    coords = []
    for st in states:
        bits = 0
        for p in (st.get("labels", []) if isinstance(st, dict) else []):
            if p not in ap_index:
                from .errors import UnknownAtom

                raise UnknownAtom(f"label {p!r} not declared in ap")
            bits |= 1 << ap_index[p]
        labels.append(bits)
        if isinstance(st, dict) and "coords" in st:
            coords.append(st["coords"])
    trans = {}
    for t in data.get("transitions", []):
        s = lookup(s_index, t["s"], "state")
        a = lookup(a_index, t["a"], "action")
        if (s, a) in trans:
            raise ParseError(f"duplicate transition row for ({t['s']}, {t['a']})")
        trans[(s, a)] = [
            (lookup(s_index, o["s2"], "state"), float(o["p"]), float(o.get("r", 0.0))) for o in t["to"]
        ]
    return Mdp.from_transitions(
        len(names),
        len(actions),
        trans,
        initial=lookup(s_index, data.get("initial", 0), "state"),
        labels=labels,
        ap=ap,
        state_names=names,
        action_names=actions,
        coords=coords if len(coords) == len(names) and coords else None,
    )


def load_mdp(path) -> Mdp:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc)) from exc
    return mdp_from_dict(data)


def save_mdp(mdp: Mdp, path):
    with open(path, "w") as fh:
        json.dump(mdp_to_dict(mdp), fh, indent=1)
