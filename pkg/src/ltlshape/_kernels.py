"""Compiled training loop for MDP-backed environments.

Mirrors the pure-Python loop in :mod:`ltlshape.learning` operation for
operation and consumes the same uniform streams, so both produce the same
trajectories.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .errors import NonFinite
from .learning import (
    EpsilonGreedy,
    LearnerState,
    RunResult,
    _streams,
    relative_potential,
)

CHUNK = 1 << 20


@njit(cache=True)
def _argmax_row(q, s, phi_rel, use_phi, mask):
    best = -1
    best_v = 0.0
    for b in range(q.shape[1]):
        if not mask[s, b]:
            continue
        v = q[s, b] + phi_rel[s, b] if use_phi else q[s, b]
        if best < 0 or v > best_v:
            best = b
            best_v = v
    return best, best_v


@njit(cache=True)
def _loop(t0, t1, s, u_agent, u_env, indptr, succ, cum, reward, available, allowed, fallback,
          phi, phi_rel, use_phi, q, rho, visits, per_state, alpha0, beta0, decay, offset,
          eps_mode, p0, p1, total, window, sums, weights):
    n_actions = q.shape[1]
    fb = 0
    for t in range(t0, t1):
        # exploration parameter
        if eps_mode:
            if p1 < 0.0 or total <= 1:
                param = p0
            else:
                param = p0 + (p1 - p0) * t / (total - 1)
        else:
            if total <= 1 or p0 == p1:
                param = p0
            else:
                param = p0 * (p1 / p0) ** (t / (total - 1))
        u = u_agent[t - t0]
        n = 0
        for b in range(n_actions):
            if allowed[s, b]:
                n += 1
        if n == 1:
            for b in range(n_actions):
                if allowed[s, b]:
                    a = b
        elif eps_mode:
            if u < param:
                k = min(int(u / param * n), n - 1)
                i = 0
                for b in range(n_actions):
                    if allowed[s, b]:
                        if i == k:
                            a = b
                        i += 1
            else:
                a, _ = _argmax_row(q, s, phi_rel, use_phi, allowed)
        else:
            _, vmax = _argmax_row(q, s, phi_rel, use_phi, allowed)
            tot = 0.0
            i = 0
            for b in range(n_actions):
                if allowed[s, b]:
                    v = q[s, b] + phi_rel[s, b] if use_phi else q[s, b]
                    weights[i] = math.exp((v - vmax) / param)
                    tot += weights[i]
                    i += 1
            target = u * tot
            acc = 0.0
            i = 0
            a = -1
            last = -1
            for b in range(n_actions):
                if allowed[s, b]:
                    last = b
                    if a < 0:
                        acc += weights[i]
                        if target < acc:
                            a = b
                    i += 1
            if a < 0:
                a = last
        if fallback[s]:
            fb += 1
        # environment step
        k = s * n_actions + a
        lo = indptr[k]
        hi = indptr[k + 1]
        ue = u_env[t - t0]
        j = hi - 1
        for i in range(lo, hi):
            if ue < cum[i]:
                j = i
                break
        s2 = succ[j]
        r = reward[j]
        # update
        if decay >= 0.0:
            scale = ((1.0 + offset) / (1.0 + offset + visits[s, a])) ** decay
            alpha = alpha0 * scale
            beta = beta0 * scale
        else:
            alpha = alpha0
            beta = beta0
        g = s if per_state else 0
        if use_phi:
            ap, _ = _argmax_row(q, s2, phi_rel, True, available)
            td = (r + (phi[s2, ap] - phi[s, a])) + q[s2, ap] - rho[g] - q[s, a]
        else:
            ap, _ = _argmax_row(q, s2, phi_rel, False, available)
            td = r + q[s2, ap] - rho[g] - q[s, a]
        nq = q[s, a] + alpha * td
        nr = rho[g] + beta * td
        if not (math.isfinite(nq) and math.isfinite(nr)):
            return s, t, fb
        q[s, a] = nq
        rho[g] = nr
        visits[s, a] += 1
        sums[t // window] += r
        s = s2
    return s, -1, fb


def train_mdp(env, config, potential, shield, total_steps, window) -> RunResult:
    env_rng, agent_rng = _streams(config.seed)
    mdp = env.mdp
    available = np.ascontiguousarray(mdp.available)
    state = LearnerState.zeros(mdp.n_states, mdp.n_actions, config.gain_mode)
    use_phi = potential is not None
    if use_phi:
        phi = np.asarray(potential.values if hasattr(potential, "values") else potential, dtype=float)
        phi_rel = relative_potential(phi, available)
    else:
        phi = phi_rel = np.zeros((1, 1))
    allowed = np.ascontiguousarray(shield.allowed if shield is not None else available)
    fallback = shield.fallback_states if shield is not None else np.zeros(mdp.n_states, dtype=bool)
    explore = config.exploration
    if isinstance(explore, EpsilonGreedy):
        eps_mode, p0 = True, explore.epsilon
        p1 = -1.0 if explore.epsilon_min is None else explore.epsilon_min
    else:
        eps_mode, p0, p1 = False, explore.tau0, explore.tau_min
    decay = -1.0 if config.decay is None else float(config.decay)
    n_windows = total_steps // window
    steps = n_windows * window
    sums = np.zeros(n_windows)
    weights = np.empty(mdp.n_actions)
    s = env.reset(env_rng)
    fb_total = 0
    for t0 in range(0, steps, CHUNK):
        t1 = min(steps, t0 + CHUNK)
        u_agent = agent_rng.random(t1 - t0)
        u_env = env_rng.random(t1 - t0)
        s, bad, fb = _loop(t0, t1, s, u_agent, u_env, mdp.indptr, mdp.succ, env.cum, mdp.reward,
                           available, allowed, fallback, phi, phi_rel, use_phi, state.q, state.rho,
                           state.visits, state.per_state, config.alpha, config.beta, decay, float(config.decay_offset),
                           eps_mode, p0, p1, total_steps, window, sums, weights)
        fb_total += fb
        if bad >= 0:
            raise NonFinite(f"non-finite update at state {s}", bad)
        state.t = t1
    env.state = int(s)
    return RunResult(sums / window, state, window, fb_total)
