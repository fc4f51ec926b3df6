"""Continuing cart pole: no termination, clamped cart velocity, discretized observations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GRAVITY = 9.8
MASS_CART = 1.0
MASS_POLE = 0.1
TOTAL_MASS = MASS_CART + MASS_POLE
HALF_LENGTH = 0.5
POLE_MOMENT = MASS_POLE * HALF_LENGTH
FORCE = 10.0
DT = 0.02
MAX_SPEED = 1.0
X_RANGE = 2.4
THETA_RANGE = math.pi / 15


def wrap_angle(theta: float) -> float:
    """Map an angle to ``(-pi, pi]``."""
    t = math.fmod(theta + math.pi, 2 * math.pi)
    if t <= 0.0:
        t += 2 * math.pi
    return t - math.pi


def physics_step(state, action):
    """One Euler step of the classic cart-pole equations, then clamp and wrap."""
    x, x_dot, theta, theta_dot = state
    force = FORCE if action == 1 else -FORCE
    cos, sin = math.cos(theta), math.sin(theta)
    temp = (force + POLE_MOMENT * theta_dot * theta_dot * sin) / TOTAL_MASS
    theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS))
    x_acc = temp - POLE_MOMENT * theta_acc * cos / TOTAL_MASS
    x = x + DT * x_dot
    x_dot = min(MAX_SPEED, max(-MAX_SPEED, x_dot + DT * x_acc))
    theta = wrap_angle(theta + DT * theta_dot)
    theta_dot = theta_dot + DT * theta_acc
    return x, x_dot, theta, theta_dot


def scoring(state) -> bool:
    return abs(state[0]) <= X_RANGE and abs(state[2]) <= THETA_RANGE


@dataclass(frozen=True)
class Discretizer:
    """Uniform bins per dimension. Angles use bins on the circle with one centred at 0."""

    x_bins: int = 10
    v_bins: int = 6
    theta_bins: int = 16
    omega_bins: int = 10
    x_limit: float = 3.0
    v_limit: float = MAX_SPEED
    omega_limit: float = 8.0

    @property
    def shape(self):
        return (self.x_bins, self.v_bins, self.theta_bins, self.omega_bins)

    @property
    def n_states(self) -> int:
        return self.x_bins * self.v_bins * self.theta_bins * self.omega_bins

    @staticmethod
    def _linear(v, limit, n):
        k = int((v + limit) / (2 * limit) * n)
        return min(n - 1, max(0, k))

    def index(self, state) -> int:
        x, v, th, om = state
        width = 2 * math.pi / self.theta_bins
        tb = math.floor((th + width / 2) / width) % self.theta_bins
        xb = self._linear(x, self.x_limit, self.x_bins)
        vb = self._linear(v, self.v_limit, self.v_bins)
        ob = self._linear(om, self.omega_limit, self.omega_bins)
        return ((xb * self.v_bins + vb) * self.theta_bins + tb) * self.omega_bins + ob

    def centres(self) -> np.ndarray:
        """Bin centres ``[n_states, 4]`` in index order."""
        xs = -self.x_limit + (np.arange(self.x_bins) + 0.5) * 2 * self.x_limit / self.x_bins
        vs = -self.v_limit + (np.arange(self.v_bins) + 0.5) * 2 * self.v_limit / self.v_bins
        ts = np.arange(self.theta_bins) * 2 * np.pi / self.theta_bins
        ts = np.where(ts > np.pi, ts - 2 * np.pi, ts)
        os_ = -self.omega_limit + (np.arange(self.omega_bins) + 0.5) * 2 * self.omega_limit / self.omega_bins
        grid = np.meshgrid(xs, vs, ts, os_, indexing="ij")
        return np.stack([g.reshape(-1) for g in grid], axis=1)


class CartPoleEnv:
    """Reward 1 while the cart is in ``[-2.4, 2.4]`` and the pole within ``pi/15`` of upright."""

    n_actions = 2
    ap = ("in_range",)

    def __init__(self, discretizer: Discretizer | None = None, init_noise: float = 0.05):
        self.disc = discretizer or Discretizer()
        self.init_noise = init_noise
        self.available = np.ones((self.disc.n_states, 2), dtype=bool)
        self.available.setflags(write=False)
        self.state = (0.0, 0.0, 0.0, 0.0)

    @property
    def n_states(self) -> int:
        return self.disc.n_states

    def reset(self, rng) -> int:
        x, v, th, om = rng.uniform(-self.init_noise, self.init_noise, size=4)
        self.state = (float(x), float(v), float(th), float(om))
        return self.disc.index(self.state)

    def step(self, action: int, rng=None) -> tuple[int, float, int]:
        self.state = physics_step(self.state, action)
        inside = abs(self.state[0]) <= X_RANGE
        return self.disc.index(self.state), 1.0 if scoring(self.state) else 0.0, int(inside)


@dataclass(frozen=True, eq=False)
class PredictedRangeDistance:
    """``-scale`` times the gap between the predicted next cart position and the range."""

    env: CartPoleEnv
    limit: float = X_RANGE
    scale: float = 1.0

    def predicted_x(self) -> np.ndarray:
        c = self.env.disc.centres()
        return c[:, 0] + c[:, 1] * DT

    def evaluate(self, mdp, region):
        gap = np.maximum(np.abs(self.predicted_x()) - self.limit, 0.0)
        return np.repeat((-self.scale * gap)[:, None], 2, axis=1)

    def __str__(self):
        return f"predicted-x:limit={self.limit:g},scale={self.scale:g}"
