"""Tabular R-learning: baseline, look-ahead shaped, and shielded variants.

All learners keep a relative action-value table ``q[s, a]`` and a gain
estimate. The shaped learner estimates ``Q* - Phi`` and acts on ``Q + Phi``.
Potentials enter action choice through ``Phi(s, .) - max_a Phi(s, a)``; a
per-state constant never changes an argmax or a softmax, and dropping it keeps
constant potentials bit-for-bit equivalent to no potential.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .errors import NonFinite
from .mdp import StationaryPolicy

Variant = Literal["baseline", "shaping", "shielding"]


@dataclass(frozen=True)
class Softmax:
    """Boltzmann exploration with a geometric temperature decay over the run."""

    tau0: float = 5.0
    tau_min: float = 0.05

    def __post_init__(self):
        if not (self.tau0 > 0 and self.tau_min > 0):
            raise ValueError("temperatures must be positive")

    def value(self, t: int, total: int) -> float:
        if total <= 1 or self.tau0 == self.tau_min:
            return self.tau0
        return self.tau0 * (self.tau_min / self.tau0) ** (t / (total - 1))


@dataclass(frozen=True)
class EpsilonGreedy:
    epsilon: float = 0.1
    epsilon_min: float | None = None

    def __post_init__(self):
        for e in (self.epsilon, self.epsilon_min):
            if e is not None and not 0 <= e <= 1:
                raise ValueError("epsilon must lie in [0, 1]")

    def value(self, t: int, total: int) -> float:
        if self.epsilon_min is None or total <= 1:
            return self.epsilon
        return self.epsilon + (self.epsilon_min - self.epsilon) * t / (total - 1)


@dataclass(frozen=True)
class LearnerConfig:
    alpha: float = 0.1
    beta: float = 0.01
    exploration: Softmax | EpsilonGreedy = field(default_factory=Softmax)
    seed: int = 0
    variant: Variant = "baseline"
    gain_mode: Literal["per_state", "scalar"] = "per_state"
    # rates decay as rate * ((1 + k) / (1 + k + visits(s, a))) ** decay when set, k = decay_offset
    decay: float | None = None
    decay_offset: float = 0.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.variant not in ("baseline", "shaping", "shielding"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.decay is not None and self.decay < 0 or self.decay_offset < 0:
            raise ValueError("decay and decay_offset must be non-negative")
        if self.gain_mode not in ("per_state", "scalar"):
            raise ValueError(f"unknown gain mode {self.gain_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exploration"] = {"kind": type(self.exploration).__name__, **asdict(self.exploration)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LearnerConfig:
        d = dict(d)
        exp = dict(d.pop("exploration", {"kind": "Softmax"}))
        kind = exp.pop("kind", "Softmax")
        d["exploration"] = Softmax(**exp) if kind == "Softmax" else EpsilonGreedy(**exp)
        return cls(**d)


@dataclass
class LearnerState:
    q: np.ndarray
    rho: np.ndarray
    visits: np.ndarray
    t: int = 0
    per_state: bool = True

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, gain_mode: str = "per_state") -> LearnerState:
        per_state = gain_mode == "per_state"
        return cls(
            np.zeros((n_states, n_actions)),
            np.zeros(n_states if per_state else 1),
            np.zeros((n_states, n_actions), dtype=np.int64),
            0,
            per_state,
        )

    def gain_index(self, s: int) -> int:
        return s if self.per_state else 0

    def copy(self) -> LearnerState:
        return LearnerState(self.q.copy(), self.rho.copy(), self.visits.copy(), self.t, self.per_state)

    def to_dict(self, variant: str = "baseline") -> dict:
        return {
            "variant": variant,
            "gain_mode": "per_state" if self.per_state else "scalar",
            "steps": int(self.t),
            "shape": list(self.q.shape),
            "q": [[float(f"{x:.12g}") for x in row] for row in self.q],
            "rho": [float(f"{x:.12g}") for x in self.rho],
        }

    @classmethod
    def from_dict(cls, d: dict) -> LearnerState:
        q = np.array(d["q"], dtype=float)
        return cls(q, np.array(d["rho"], dtype=float), np.zeros(q.shape, dtype=np.int64), int(d["steps"]),
                   d.get("gain_mode", "per_state") == "per_state")

    def save(self, path, variant: str = "baseline"):
        with open(path, "w") as fh:
            json.dump(self.to_dict(variant), fh, indent=1)

    @classmethod
    def load(cls, path) -> LearnerState:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class ShieldMask:
    """Allowed actions per state. States the region would leave empty allow every available action."""

    allowed: np.ndarray
    fallback_states: np.ndarray

    @property
    def fallback_count(self) -> int:
        return int(self.fallback_states.sum())

    @classmethod
    def from_region(cls, region_pairs: np.ndarray, available: np.ndarray, relax: np.ndarray | None = None):
        allowed = region_pairs & available
        if relax is not None:
            allowed = allowed | (relax & available)
        empty = ~allowed.any(axis=1)
        allowed = np.where(empty[:, None], available, allowed)
        return cls(allowed, empty)


def _rates(state: LearnerState, s: int, a: int, config: LearnerConfig):
    if config.decay is None:
        return config.alpha, config.beta
    k = config.decay_offset
    scale = ((1.0 + k) / (1.0 + k + state.visits[s, a])) ** config.decay
    return config.alpha * scale, config.beta * scale


def _apply(state: LearnerState, s, a, td, alpha, beta, step=None):
    g = state.gain_index(s)
    new_q = state.q[s, a] + alpha * td
    new_rho = state.rho[g] + beta * td
    if not (math.isfinite(new_q) and math.isfinite(new_rho)):
        raise NonFinite(f"non-finite update at ({s}, {a}): td={td!r}", step)
    state.q[s, a] = new_q
    state.rho[g] = new_rho
    state.visits[s, a] += 1
    state.t += 1


def _argmax_avail(row, acts):
    best, best_v = acts[0], row[acts[0]]
    for b in acts[1:]:
        if row[b] > best_v:
            best, best_v = b, row[b]
    return best


def r_learning_update(state, s, a, r, s2, config, available=None, alpha=None, beta=None):
    """One R-learning step; both updates read the same pre-update snapshot. Returns the TD error."""
    acts = np.flatnonzero(available[s2]) if available is not None else np.arange(state.q.shape[1])
    if alpha is None:
        alpha, beta = _rates(state, s, a, config)
    best = state.q[s2, _argmax_avail(state.q[s2], acts)]
    td = r + best - state.rho[state.gain_index(s)] - state.q[s, a]
    _apply(state, s, a, td, alpha, beta)
    return td


def relative_potential(phi: np.ndarray, available: np.ndarray) -> np.ndarray:
    """``Phi`` minus its per-state maximum over available actions."""
    top = np.where(available, phi, -np.inf).max(axis=1)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.where(available, phi - top[:, None], 0.0)


def lookahead_action(state, s2, phi_rel, acts) -> int:
    """Bootstrapped stand-in for ``argmax_a Q*(s2, a)``: argmax of ``Q + Phi``."""
    v = state.q[s2] + phi_rel[s2]
    return _argmax_avail(v, acts)


def shaped_update(state, s, a, r, s2, potential, config, available=None, alpha=None, beta=None, phi_rel=None):
    """Shaped step with ``F = Phi(s2, a+) - Phi(s, a)`` and target ``Q(s2, a+)``. Returns the TD error."""
    phi = potential.values if hasattr(potential, "values") else np.asarray(potential)
    if available is None:
        available = np.ones(state.q.shape, dtype=bool)
    if phi_rel is None:
        phi_rel = relative_potential(phi, available)
    acts = np.flatnonzero(available[s2])
    if alpha is None:
        alpha, beta = _rates(state, s, a, config)
    a_plus = lookahead_action(state, s2, phi_rel, acts)
    shaping = phi[s2, a_plus] - phi[s, a]
    td = (r + shaping) + state.q[s2, a_plus] - state.rho[state.gain_index(s)] - state.q[s, a]
    _apply(state, s, a, td, alpha, beta)
    return td


def recover_policy(state: LearnerState, potential=None, available=None) -> StationaryPolicy:
    """Greedy policy of ``Q`` (or ``Q + Phi`` when a potential is given), ties to the lowest index."""
    q = state.q
    if available is None:
        available = np.ones(q.shape, dtype=bool)
    if potential is not None:
        phi = potential.values if hasattr(potential, "values") else np.asarray(potential)
        q = q + relative_potential(phi, available)
    return StationaryPolicy(np.argmax(np.where(available, q, -np.inf), axis=1))


def action_values(state, s, phi_rel=None):
    return state.q[s] if phi_rel is None else state.q[s] + phi_rel[s]


def sample_action(values, support, exploration, param, u: float) -> int:
    """Draw an action from ``support`` with a single uniform ``u``.

    Softmax inverts the CDF of ``exp((v - max v) / tau)``. Epsilon-greedy
    explores when ``u < eps`` and then reuses ``u / eps`` to pick uniformly.
    """
    n = len(support)
    if n == 1:
        return int(support[0])
    if isinstance(exploration, EpsilonGreedy):
        eps = param
        if u < eps:
            return int(support[min(int(u / eps * n), n - 1)])
        return int(_argmax_avail(values, support))
    tau = param
    vmax = max(values[b] for b in support)
    weights = [math.exp((values[b] - vmax) / tau) for b in support]
    total = 0.0
    for w in weights:
        total += w
    target = u * total
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if target < acc:
            return int(support[i])
    return int(support[n - 1])


def select_action(state, s, config, potential=None, shield=None, rng=None, available=None, t=0, total=1, u=None):
    """Exploratory action at ``s``; the shield (if any) restricts the support."""
    if available is None:
        available = np.ones(state.q.shape, dtype=bool)
    mask = shield.allowed[s] if shield is not None else available[s]
    support = np.flatnonzero(mask)
    phi_rel = None
    if potential is not None:
        phi = potential.values if hasattr(potential, "values") else np.asarray(potential)
        phi_rel = relative_potential(phi, available)
    if u is None:
        u = rng.random()
    values = action_values(state, s, phi_rel)
    return sample_action(values, support, config.exploration, config.exploration.value(t, total), u)


@dataclass
class RunResult:
    window_avg: np.ndarray
    state: LearnerState
    window: int
    fallback_visits: int = 0

    @property
    def steps(self) -> np.ndarray:
        return self.window * np.arange(1, len(self.window_avg) + 1)


def _streams(seed: int):
    env_ss, agent_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(env_ss), np.random.default_rng(agent_ss)


def run_training(env, config: LearnerConfig, potential=None, shield=None, total_steps=10_000, window=100,
                 fast: bool | None = None) -> RunResult:
    """Interact for ``total_steps``; log the raw environment reward averaged per ``window``.

    ``potential`` is used only by the shaping variant and ``shield`` only by
    shielding. MDP-backed environments run through a compiled loop unless
    ``fast=False``.
    """
    if not total_steps >= window >= 1:
        raise ValueError("need total_steps >= window >= 1")
    if config.variant != "shaping":
        potential = None
    if config.variant != "shielding":
        shield = None
    from .envs.mdp_env import MdpEnv

    if fast is None:
        fast = isinstance(env, MdpEnv)
    if fast and isinstance(env, MdpEnv):
        from ._kernels import train_mdp

        return train_mdp(env, config, potential, shield, total_steps, window)

    env_rng, agent_rng = _streams(config.seed)
    available = env.available
    state = LearnerState.zeros(env.n_states, env.n_actions, config.gain_mode)
    phi = phi_rel = None
    if potential is not None:
        phi = potential.values if hasattr(potential, "values") else np.asarray(potential)
        phi_rel = relative_potential(phi, available)
    support_mask = shield.allowed if shield is not None else available
    supports = [np.flatnonzero(row) for row in support_mask]
    acts = [np.flatnonzero(row) for row in available]
    fallback = shield.fallback_states if shield is not None else None

    n_windows = total_steps // window
    sums = np.zeros(n_windows)
    fallback_visits = 0
    explore = config.exploration
    s = env.reset(env_rng)
    for t in range(n_windows * window):
        param = explore.value(t, total_steps)
        u = agent_rng.random()
        values = state.q[s] if phi_rel is None else state.q[s] + phi_rel[s]
        a = sample_action(values, supports[s], explore, param, u)
        if fallback is not None and fallback[s]:
            fallback_visits += 1
        s2, r, _ = env.step(a, env_rng)
        alpha, beta = _rates(state, s, a, config)
        if phi is None:
            best = state.q[s2, _argmax_avail(state.q[s2], acts[s2])]
            td = r + best - state.rho[state.gain_index(s)] - state.q[s, a]
        else:
            a_plus = _argmax_avail(state.q[s2] + phi_rel[s2], acts[s2])
            td = (r + (phi[s2, a_plus] - phi[s, a])) + state.q[s2, a_plus] - state.rho[state.gain_index(s)] - state.q[s, a]
        _apply(state, s, a, td, alpha, beta, step=t)
        sums[t // window] += r
        s = s2
    return RunResult(sums / window, state, window, fallback_visits)
