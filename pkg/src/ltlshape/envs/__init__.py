"""Benchmark environments and their reference advice."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from ..automata import ApRegistry, InvariantFormula, compile_invariant, parse_formula
from ..errors import UnknownEnv
from ..learning import ShieldMask
from ..mdp import Mdp
from ..product import (
    ConstantPenalty,
    ManhattanToTarget,
    PotentialTable,
    WinningRegion,
    _closer,
    almost_sure_region,
    build_product,
    state_distance,
    synthesize_potential,
)
from .cartpole import X_RANGE, CartPoleEnv, Discretizer, PredictedRangeDistance
from .gridworld import GridworldEnv, gridworld_as_mdp, monotone_advice_mdp
from .mdp_env import MdpEnv
from .sweeping import Layout, RobotDistanceToRegion, SweepingEnv

ENV_NAMES = (
    "gridworld",
    "gridworld-wall",
    "sweep-kitchen",
    "sweep-kitchen-extra",
    "sweep-human",
    "sweep-human-extra",
    "cartpole",
    "cartpole-inaccurate",
)

__all__ = [
    "ENV_NAMES", "Advice", "AdviceModel", "CartPoleEnv", "Discretizer", "GridworldEnv", "Layout", "MdpEnv",
    "SweepingEnv", "gridworld_as_mdp", "make_env", "reference_advice",
]


def make_env(name: str, seed: int = 0, layout: Layout | None = None):
    """Environment by benchmark name; ``seed`` fixes construction-time randomness (trash frequencies)."""
    if name == "gridworld":
        return GridworldEnv()
    if name == "gridworld-wall":
        return GridworldEnv(wall=True)
    if name == "sweep-kitchen":
        return SweepingEnv(layout, trash_cells="kitchen", seed=seed)
    if name == "sweep-kitchen-extra":
        return SweepingEnv(layout, trash_cells="kitchen", extra=True, seed=seed)
    if name == "sweep-human":
        return SweepingEnv(layout, trash_cells="none", human=True, seed=seed)
    if name == "sweep-human-extra":
        return SweepingEnv(layout, trash_cells="corridor", human=True, seed=seed)
    if name in ("cartpole", "cartpole-inaccurate"):
        return CartPoleEnv()
    raise UnknownEnv(f"unknown environment {name!r}; choose from {', '.join(ENV_NAMES)}")


@dataclass(frozen=True, eq=False)
class AdviceModel:
    """Synthesized advice on learner states."""

    region: WinningRegion
    potential: PotentialTable
    shield: ShieldMask


@dataclass(frozen=True, eq=False)
class Advice:
    """Formula, distance spec, C, and shield rule for one benchmark.

    ``region_fn`` returns the learner-level MDP used for distances (or None)
    and the winning region on learner states; ``relax_fn`` adds
    task-specific actions to the shield.
    """

    formula: InvariantFormula
    distance: object
    C: float
    shield_rule: str
    region_fn: Callable[[], tuple[Mdp | None, WinningRegion]]
    relax_fn: Callable[[Mdp | None, WinningRegion], np.ndarray] | None = None

    def synthesize(self) -> AdviceModel:
        mdp, region = self.region_fn()
        potential = synthesize_potential(mdp, region, self.C, self.distance)
        relax = self.relax_fn(mdp, region) if self.relax_fn is not None else None
        available = np.ones(region.pairs.shape, dtype=bool) if mdp is None else mdp.available
        return AdviceModel(region, potential, ShieldMask.from_region(region.pairs, available, relax))


def _product_region(mdp: Mdp, formula: InvariantFormula) -> WinningRegion:
    aut = compile_invariant(formula, ApRegistry(mdp.ap))
    return almost_sure_region(build_product(mdp, aut))


def _gridworld_advice(env: GridworldEnv) -> Advice:
    formula = parse_formula("G monotone")

    def region():
        advice_mdp, obs = monotone_advice_mdp(env)
        projected = _product_region(advice_mdp, formula).project(obs, env.n_states)
        return gridworld_as_mdp(env, "memoryless"), projected

    return Advice(formula, ConstantPenalty(-1.0), 1.0, "region", region)


def _kitchen_advice(env: SweepingEnv) -> Advice:
    formula = parse_formula("G kitchen")
    distance = ManhattanToTarget("kitchen", scale=1.0, closer_bonus=1.0)

    def region():
        mdp = env.robot_mdp()
        return mdp, _product_region(mdp, formula)

    def relax(mdp, region):
        return _closer(mdp, state_distance(mdp, (mdp.labels & 1) != 0))

    return Advice(formula, distance, 1.0, "region or closer to kitchen", region, relax)


def _human_advice(env: SweepingEnv) -> Advice:
    formula = parse_formula("G human_visible")

    def region():
        mdp = env.joint_mdp()
        return mdp, _product_region(mdp, formula)

    return Advice(formula, RobotDistanceToRegion(env, 1.0, -6.0), 1.0, "region", region)


def _cartpole_advice(env: CartPoleEnv, limit: float, scale: float = 10.0) -> Advice:
    formula = parse_formula("G in_range")
    distance = PredictedRangeDistance(env, limit, scale)

    def region():
        x_next = distance.predicted_x()
        inside = np.abs(x_next) <= limit
        pairs = np.repeat(inside[:, None], 2, axis=1)
        return None, WinningRegion(pairs, violating=np.zeros(len(inside), dtype=bool))

    def relax(mdp, region):
        # outside the predicted range only the push back toward it stays allowed
        x_next = distance.predicted_x()
        toward = np.zeros((len(x_next), 2), dtype=bool)
        toward[:, 0] = x_next > 0
        toward[:, 1] = x_next < 0
        return toward

    return Advice(formula, distance, 1.0, "predicted range or push back", region, relax)


def reference_advice(env_or_name, env=None) -> Advice:
    """Published advice package for a benchmark, by name (optionally with its env instance)."""
    name = env_or_name if isinstance(env_or_name, str) else None
    if name is None:
        raise UnknownEnv("pass the benchmark name")
    if name not in ENV_NAMES:
        raise UnknownEnv(f"no reference advice for {name!r}")
    env = env if env is not None else make_env(name)
    if name.startswith("gridworld"):
        return _gridworld_advice(env)
    if name.startswith("sweep-kitchen"):
        return _kitchen_advice(env)
    if name.startswith("sweep-human"):
        return _human_advice(env)
    return _cartpole_advice(env, X_RANGE if name == "cartpole" else 2.0)
