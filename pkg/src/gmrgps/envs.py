"""Desk-scale simulated control tasks.

Two physical environments (a 2D point mass under force control and a planar
two-link arm under torque control) plus a dimension-configurable synthetic
linear system used for shape tests. States are positions followed by
velocities; integration is semi-implicit Euler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import Trajectory
from .validation import as_float_vector, check_finite


class SimulationDiverged(RuntimeError):
    """Raised when an integration step produces a non-finite state."""


@dataclass
class Condition:
    """One start/goal setup: initial state distribution and target state."""

    id: int
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    x_goal: np.ndarray

    def __post_init__(self):
        self.x0_mean = np.asarray(self.x0_mean, dtype=np.float64)
        self.x0_cov = np.asarray(self.x0_cov, dtype=np.float64)
        self.x_goal = np.asarray(self.x_goal, dtype=np.float64)
        if self.x0_cov.shape != (self.x0_mean.shape[0], self.x0_mean.shape[0]):
            raise ValueError("x0_cov shape does not match x0_mean")
        eigvals = np.linalg.eigvalsh(0.5 * (self.x0_cov + self.x0_cov.T))
        if np.any(eigvals < -1e-12):
            raise ValueError("x0_cov must be positive semi-definite")


class _BaseEnv:
    dt: float
    horizon: int
    d_x: int
    d_u: int
    noise_std: float
    action_limit: float

    def clamp(self, u):
        return np.clip(u, -self.action_limit, self.action_limit)

    def _check_state(self, state, t):
        if not np.all(np.isfinite(state)):
            raise SimulationDiverged(
                f"{type(self).__name__} diverged at step {t}: non-finite state"
            )
        return state


class PointMassEnv(_BaseEnv):
    """Planar point mass under force control.

    State [px, py, vx, vy], action [fx, fy]. Semi-implicit Euler with linear
    velocity damping; Gaussian process noise enters the velocity components.
    """

    kind = "point_mass"

    def __init__(self, mass=1.0, damping=0.1, dt=0.05, horizon=80,
                 noise_std=1e-3, action_limit=10.0):
        if dt <= 0 or horizon < 1 or noise_std < 0:
            raise ValueError("invalid environment parameters")
        self.mass = float(mass)
        self.damping = float(damping)
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.noise_std = float(noise_std)
        self.action_limit = float(action_limit)
        self.d_x = 4
        self.d_u = 2

    def step(self, state, u, rng=None, t=0):
        state = np.asarray(state, dtype=np.float64)
        u = self.clamp(np.asarray(u, dtype=np.float64))
        pos, vel = state[:2], state[2:]
        accel = u / self.mass - (self.damping / self.mass) * vel
        vel_next = vel + self.dt * accel
        if rng is not None and self.noise_std > 0:
            vel_next = vel_next + self.noise_std * rng.standard_normal(2)
        pos_next = pos + self.dt * vel_next
        return self._check_state(np.concatenate([pos_next, vel_next]), t)


class TwoLinkArmEnv(_BaseEnv):
    """Planar two-link arm under joint-torque control.

    State [q1, q2, dq1, dq2], action [tau1, tau2]. Uniform-rod links, optional
    gravity, viscous joint damping. Integrated semi-implicitly with internal
    substeps for energy behaviour at the control rate.
    """

    kind = "two_link_arm"

    def __init__(self, m1=1.0, m2=1.0, l1=1.0, l2=1.0, damping=0.1, gravity=0.0,
                 dt=0.05, horizon=80, noise_std=1e-3, action_limit=20.0,
                 substeps=10):
        if dt <= 0 or horizon < 1 or noise_std < 0 or substeps < 1:
            raise ValueError("invalid environment parameters")
        self.m1, self.m2 = float(m1), float(m2)
        self.l1, self.l2 = float(l1), float(l2)
        self.damping = float(damping)
        self.gravity = float(gravity)
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.noise_std = float(noise_std)
        self.action_limit = float(action_limit)
        self.substeps = int(substeps)
        self.d_x = 4
        self.d_u = 2
        # uniform-rod inertia constants
        self._k1 = (self.m1 / 3.0 + self.m2) * self.l1**2 + self.m2 * self.l2**2 / 3.0
        self._k2 = self.m2 * self.l1 * self.l2
        self._k3 = self.m2 * self.l2**2 / 3.0
        self._k4 = self.m2 * self.l1 * self.l2 / 2.0

    def _mass_matrix(self, q2):
        c2 = np.cos(q2)
        m11 = self._k1 + self._k2 * c2
        m12 = self._k3 + self._k4 * c2
        return np.array([[m11, m12], [m12, self._k3]])

    def _bias(self, q, dq):
        s2 = np.sin(q[1])
        coriolis = np.array(
            [
                -self._k2 * s2 * dq[0] * dq[1] - 0.5 * self._k2 * s2 * dq[1] ** 2,
                0.5 * self._k2 * s2 * dq[0] ** 2,
            ]
        )
        grav = np.zeros(2)
        if self.gravity != 0.0:
            g = self.gravity
            grav = np.array(
                [
                    g * ((self.m1 / 2.0 + self.m2) * self.l1 * np.cos(q[0])
                         + self.m2 * self.l2 / 2.0 * np.cos(q[0] + q[1])),
                    g * self.m2 * self.l2 / 2.0 * np.cos(q[0] + q[1]),
                ]
            )
        return coriolis + grav

    def step(self, state, u, rng=None, t=0):
        state = np.asarray(state, dtype=np.float64)
        u = self.clamp(np.asarray(u, dtype=np.float64))
        q, dq = state[:2].copy(), state[2:].copy()
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            mass = self._mass_matrix(q[1])
            rhs = u - self._bias(q, dq) - self.damping * dq
            ddq = np.linalg.solve(mass, rhs)
            dq = dq + h * ddq
            q = q + h * dq
        if rng is not None and self.noise_std > 0:
            dq = dq + self.noise_std * rng.standard_normal(2)
        return self._check_state(np.concatenate([q, dq]), t)

    def total_energy(self, state):
        """Kinetic plus gravitational potential energy (diagnostics/tests)."""
        q, dq = state[:2], state[2:]
        kinetic = 0.5 * float(dq @ self._mass_matrix(q[1]) @ dq)
        potential = 0.0
        if self.gravity != 0.0:
            potential = self.gravity * (
                (self.m1 / 2.0 + self.m2) * self.l1 * np.sin(q[0])
                + self.m2 * self.l2 / 2.0 * np.sin(q[0] + q[1])
            )
        return kinetic + potential

    def end_effector(self, state):
        q = state[:2]
        x = self.l1 * np.cos(q[0]) + self.l2 * np.cos(q[0] + q[1])
        y = self.l1 * np.sin(q[0]) + self.l2 * np.sin(q[0] + q[1])
        return np.array([x, y])


class LinearEnv(_BaseEnv):
    """Synthetic linear system x' = A x + B u + noise, any dimensions.

    Used for shape checks at the full reflex dimensionality (d_x=12, d_u=6)
    and for oracle tests against known dynamics.
    """

    kind = "linear"

    def __init__(self, A, B, dt=0.05, horizon=80, noise_std=0.0,
                 action_limit=np.inf):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        if self.B.shape[0] != self.A.shape[0]:
            raise ValueError("B row count must match A")
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.noise_std = float(noise_std)
        self.action_limit = float(action_limit)
        self.d_x = self.A.shape[0]
        self.d_u = self.B.shape[1]

    @classmethod
    def default(cls, d_x=12, d_u=6, horizon=80, noise_std=0.0, seed=0):
        rng = np.random.default_rng(seed)
        a = np.eye(d_x) + 0.01 * rng.standard_normal((d_x, d_x))
        a *= 0.98 / max(np.abs(np.linalg.eigvals(a)))
        b = 0.05 * rng.standard_normal((d_x, d_u))
        return cls(A=a, B=b, horizon=horizon, noise_std=noise_std)

    def step(self, state, u, rng=None, t=0):
        state = np.asarray(state, dtype=np.float64)
        u = self.clamp(np.asarray(u, dtype=np.float64))
        nxt = self.A @ state + self.B @ u
        if rng is not None and self.noise_std > 0:
            nxt = nxt + self.noise_std * rng.standard_normal(self.d_x)
        return self._check_state(nxt, t)


def make_env(kind, **params):
    registry = {
        "point_mass": PointMassEnv,
        "two_link_arm": TwoLinkArmEnv,
        "linear": LinearEnv,
    }
    if kind == "linear" and "A" not in params:
        return LinearEnv.default(**params)
    if kind not in registry:
        raise ValueError(f"unknown environment kind {kind!r}")
    return registry[kind](**params)


def _controller_action(controller, t, x, rng, explore):
    if isinstance(controller, (list, tuple)):
        raise TypeError("controller must be a policy object, not a sequence")
    if hasattr(controller, "reflexes"):  # LocalPolicy
        if explore:
            return controller.sample_action(t, x, rng)
        return controller.mean_action(t, x)
    if explore and hasattr(controller, "sample_action"):
        return controller.sample_action(x, rng)
    return controller.predict(x)


def rollout(env, controller, condition, rng, explore=False, noise=True):
    """Run the controller for the environment horizon from a sampled start.

    ``explore=True`` samples stochastic actions (local policies and policies
    with an exploration distribution); otherwise actions are deterministic
    means. Process noise is applied unless ``noise=False``. Actions are
    clamped to the environment bounds and the executed (clamped) actions are
    what the trajectory records.
    """
    if np.allclose(condition.x0_cov, 0.0):
        x = condition.x0_mean.copy()
    else:
        x = rng.multivariate_normal(
            condition.x0_mean, condition.x0_cov + 1e-12 * np.eye(env.d_x),
            method="cholesky",
        )
    states = np.zeros((env.horizon + 1, env.d_x))
    actions = np.zeros((env.horizon, env.d_u))
    states[0] = x
    step_rng = rng if noise else None
    for t in range(env.horizon):
        u = _controller_action(controller, t, states[t], rng, explore)
        u = env.clamp(np.asarray(u, dtype=np.float64))
        actions[t] = u
        states[t + 1] = env.step(states[t], u, rng=step_rng, t=t)
    return Trajectory(states=states, actions=actions, condition_id=condition.id)


def final_state_mse(trajectory, goal):
    """Mean over state components of the squared terminal-state error."""
    goal = as_float_vector(goal, trajectory.d_x, "goal")
    err = trajectory.states[-1] - goal
    return float(np.mean(err**2))
