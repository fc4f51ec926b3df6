"""Simulator over an explicit tabular MDP."""

from __future__ import annotations

from ..mdp import Mdp, _cumulative_probs


class MdpEnv:
    """Samples successors of an :class:`Mdp` with one uniform per step."""

    def __init__(self, mdp: Mdp, start: int | None = None):
        self.mdp = mdp
        self.start = mdp.initial if start is None else int(start)
        self.cum = _cumulative_probs(mdp)
        self.available = mdp.available
        self.state = self.start

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def reset(self, rng=None) -> int:
        self.state = self.start
        return self.state

    def step(self, action: int, rng) -> tuple[int, float, int]:
        m = self.mdp
        k = self.state * m.n_actions + action
        lo, hi = m.indptr[k], m.indptr[k + 1]
        u = rng.random()
        j = hi - 1
        for i in range(lo, hi):
            if u < self.cum[i]:
                j = i
                break
        self.state = int(m.succ[j])
        return self.state, float(m.reward[j]), int(m.labels[self.state])
