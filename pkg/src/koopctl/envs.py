"""Analytic swing-up environments: pendulum and cart-pole.

States are plain float64 arrays, angle convention is theta = 0 upright,
wrapped to (-pi, pi]. step() is a pure function of (state, control) given
the environment's constants — no hidden counters — so repeated calls agree
bitwise and rollouts can be replayed exactly. The episode horizon
(max_steps) is enforced by the caller; step() only reports physical
termination (cart leaving the track).

Integration is semi-implicit Euler at dt = 0.02 s: velocity first, then
position with the new velocity.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class SimulationError(ArithmeticError):
    """Non-finite state or control reached the simulator."""


class StepResult(NamedTuple):
    next_state: np.ndarray
    reward: float
    done: bool


TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Map any angle into (-pi, pi]."""
    w = (theta + np.pi) % TWO_PI - np.pi
    if w == -np.pi:
        w = np.pi
    return w


def _checked_control(u, dim):
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.shape != (dim,):
        raise SimulationError(f"control has shape {u.shape}, expected ({dim},)")
    if not np.all(np.isfinite(u)):
        raise SimulationError("non-finite control")
    return np.clip(u, -1.0, 1.0)


class Pendulum:
    """Torque-limited pendulum swing-up.

    state = (theta, theta_dot); reward (1 + cos theta)/2 peaks at upright.
    """

    name = "pendulum"
    state_dim = 2
    action_dim = 1
    max_steps = 1000
    dt = 0.02

    def __init__(self, mass=1.0, length=1.0, gravity=9.81, torque_gain=2.0,
                 damping=0.05):
        self.mass = mass
        self.length = length
        self.gravity = gravity
        self.torque_gain = torque_gain
        self.damping = damping

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        eps = rng.uniform(-0.05, 0.05, size=2)
        return np.array([wrap_angle(np.pi + eps[0]), eps[1]])

    def goal_state(self):
        """Upright at rest."""
        return np.zeros(self.state_dim)

    def step(self, state, u):
        if not np.all(np.isfinite(state)):
            raise SimulationError("non-finite state")
        u = _checked_control(u, self.action_dim)
        theta, theta_dot = state
        accel = (self.gravity / self.length) * np.sin(theta) + (
            self.torque_gain * u[0] - self.damping * theta_dot
        ) / (self.mass * self.length ** 2)
        theta_dot = theta_dot + self.dt * accel
        theta = wrap_angle(theta + self.dt * theta_dot)
        reward = 0.5 * (1.0 + np.cos(theta))
        return StepResult(np.array([theta, theta_dot]), float(reward), False)

    def energy(self, state):
        """Mechanical energy, potential zero at the pivot height."""
        theta, theta_dot = state
        kinetic = 0.5 * self.mass * (self.length * theta_dot) ** 2
        potential = self.mass * self.gravity * self.length * np.cos(theta)
        return kinetic + potential


class CartPole:
    """Cart-pole swing-up with the classic pole-on-a-cart equations.

    state = (x, x_dot, theta, theta_dot); the pole starts hanging down and
    reward rewards an upright pole with the cart near the track centre.
    """

    name = "cartpole"
    state_dim = 4
    action_dim = 1
    max_steps = 1000
    dt = 0.02

    def __init__(self, cart_mass=1.0, pole_mass=0.1, half_length=0.5,
                 gravity=9.81, force_gain=10.0, x_limit=2.4):
        self.cart_mass = cart_mass
        self.pole_mass = pole_mass
        self.half_length = half_length
        self.gravity = gravity
        self.force_gain = force_gain
        self.x_limit = x_limit

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        eps = rng.uniform(-0.05, 0.05, size=3)
        return np.array([0.0, eps[0], wrap_angle(np.pi + eps[1]), eps[2]])

    def goal_state(self):
        """Pole upright, cart centred, everything at rest."""
        return np.zeros(self.state_dim)

    def step(self, state, u):
        if not np.all(np.isfinite(state)):
            raise SimulationError("non-finite state")
        u = _checked_control(u, self.action_dim)
        x, x_dot, theta, theta_dot = state
        force = self.force_gain * u[0]
        total_mass = self.cart_mass + self.pole_mass
        sin, cos = np.sin(theta), np.cos(theta)

        temp = (force + self.pole_mass * self.half_length * theta_dot ** 2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.pole_mass * cos ** 2 / total_mass)
        )
        x_acc = temp - self.pole_mass * self.half_length * theta_acc * cos / total_mass

        x_dot = x_dot + self.dt * x_acc
        x = x + self.dt * x_dot
        theta_dot = theta_dot + self.dt * theta_acc
        theta = wrap_angle(theta + self.dt * theta_dot)

        reward = 0.5 * (1.0 + np.cos(theta)) * max(0.0, 1.0 - abs(x) / self.x_limit)
        done = abs(x) > self.x_limit
        return StepResult(np.array([x, x_dot, theta, theta_dot]), float(reward), bool(done))


ENV_NAMES = ("pendulum", "cartpole")


def make_env(name):
    if name == "pendulum":
        return Pendulum()
    if name == "cartpole":
        return CartPole()
    raise ValueError(f"unknown environment {name!r}, expected one of {ENV_NAMES}")
