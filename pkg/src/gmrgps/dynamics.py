"""Time-varying linear-Gaussian dynamics fitted from trajectory samples.

The model for every timestep t is N(f_xu[t] @ [x; u] + f_c[t], F[t]),
estimated by per-timestep ridge regression of the next state onto the
current state-action pair.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .validation import check_finite, symmetrize

TRAJECTORY_CSV_VERSION = 1


@dataclass
class Trajectory:
    """One rollout: states x_0..x_T and the actions u_0..u_{T-1} between them."""

    states: np.ndarray
    actions: np.ndarray
    condition_id: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("states and actions must be 2-D arrays")
        if self.states.shape[0] != self.actions.shape[0] + 1:
            raise ValueError(
                f"expected one more state than actions, got {self.states.shape[0]} "
                f"states and {self.actions.shape[0]} actions"
            )
        check_finite(self.states, "states")
        check_finite(self.actions, "actions")

    @property
    def horizon(self):
        return self.actions.shape[0]

    @property
    def d_x(self):
        return self.states.shape[1]

    @property
    def d_u(self):
        return self.actions.shape[1]


class LinearGaussianDynamics(BaseEstimator):
    """Per-timestep linear-Gaussian dynamics model p(x_{t+1} | x_t, u_t).

    Parameters
    ----------
    regularization : ridge weight on the regression coefficients. Zero is
        allowed only when the per-timestep regressor matrix has full rank.
    cov_floor : added to the diagonal of every fitted covariance so each
        F[t] stays positive definite.
    """

    def __init__(self, regularization=1e-6, cov_floor=1e-6):
        self.regularization = regularization
        self.cov_floor = cov_floor

    def fit(self, trajectories):
        """Fit on a list of Trajectory sharing horizon and dimensions."""
        trajectories = list(trajectories)
        if len(trajectories) < 2:
            raise ValueError("need at least 2 trajectories to fit dynamics")
        horizon = trajectories[0].horizon
        d_x = trajectories[0].d_x
        d_u = trajectories[0].d_u
        for traj in trajectories:
            if (traj.horizon, traj.d_x, traj.d_u) != (horizon, d_x, d_u):
                raise ValueError("trajectories disagree on horizon or dimensions")
        if self.regularization < 0:
            raise ValueError("regularization must be nonnegative")

        n = len(trajectories)
        p = d_x + d_u
        f_xu = np.zeros((horizon, d_x, p))
        f_c = np.zeros((horizon, d_x))
        cov = np.zeros((horizon, d_x, d_x))

        states = np.stack([t.states for t in trajectories])   # (n, T+1, d_x)
        actions = np.stack([t.actions for t in trajectories])  # (n, T, d_u)

        for t in range(horizon):
            design = np.concatenate(
                [states[:, t, :], actions[:, t, :], np.ones((n, 1))], axis=1
            )
            target = states[:, t + 1, :]
            if self.regularization == 0.0:
                rank = np.linalg.matrix_rank(design)
                if rank < p + 1:
                    raise ValueError(
                        f"regressor at t={t} is rank deficient ({rank} < {p + 1}); "
                        "raise `regularization` above zero"
                    )
                theta, *_ = np.linalg.lstsq(design, target, rcond=None)
            else:
                gram = design.T @ design + self.regularization * np.eye(p + 1)
                theta = np.linalg.solve(gram, design.T @ target)
            f_xu[t] = theta[:p].T
            f_c[t] = theta[p]
            residual = target - design @ theta
            cov[t] = symmetrize(residual.T @ residual / n) + self.cov_floor * np.eye(d_x)

        self.f_xu_ = f_xu
        self.f_c_ = f_c
        self.F_ = cov
        self.horizon_ = horizon
        self.d_x_ = d_x
        self.d_u_ = d_u
        return self

    def predict(self, t, x, u):
        """Gaussian over the next state: returns (mean, covariance) at step t."""
        self._check_fitted()
        if not 0 <= t < self.horizon_:
            raise IndexError(f"timestep {t} outside fitted horizon {self.horizon_}")
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        mean = self.f_xu_[t] @ np.concatenate([x, u]) + self.f_c_[t]
        return mean, self.F_[t].copy()

    def mean_next(self, t, x, u):
        """Mean prediction only; used by deterministic value-function rollouts."""
        mean, _ = self.predict(t, x, u)
        return mean

    def _check_fitted(self):
        if not hasattr(self, "f_xu_"):
            raise NotFittedError("dynamics model is not fitted; call fit() first")

    @classmethod
    def from_arrays(cls, f_xu, f_c, F):
        """Build a model directly from its arrays (mainly for synthetic tests)."""
        model = cls()
        model.f_xu_ = np.asarray(f_xu, dtype=np.float64)
        model.f_c_ = np.asarray(f_c, dtype=np.float64)
        model.F_ = np.asarray(F, dtype=np.float64)
        model.horizon_, model.d_x_ = model.f_c_.shape
        model.d_u_ = model.f_xu_.shape[2] - model.d_x_
        return model


def save_trajectories(trajectories, path):
    """Write trajectories as CSV: condition, sample, t, x_0.., u_0..

    The final row of each trajectory (t == horizon) has empty action fields.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories to save")
    d_x = trajectories[0].d_x
    d_u = trajectories[0].d_u
    header = (
        ["condition", "sample", "t"]
        + [f"x_{i}" for i in range(d_x)]
        + [f"u_{i}" for i in range(d_u)]
    )
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for sample, traj in enumerate(trajectories):
            for t in range(traj.horizon + 1):
                row = [traj.condition_id, sample, t]
                row += [repr(float(v)) for v in traj.states[t]]
                if t < traj.horizon:
                    row += [repr(float(v)) for v in traj.actions[t]]
                else:
                    row += [""] * d_u
                writer.writerow(row)


def load_trajectories(path):
    """Read trajectories written by `save_trajectories`."""
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        d_x = sum(1 for col in header if col.startswith("x_"))
        d_u = sum(1 for col in header if col.startswith("u_"))
        rows = {}
        for row in reader:
            condition, sample, t = int(row[0]), int(row[1]), int(row[2])
            state = [float(v) for v in row[3 : 3 + d_x]]
            action_fields = row[3 + d_x : 3 + d_x + d_u]
            action = None
            if all(field != "" for field in action_fields):
                action = [float(v) for v in action_fields]
            rows.setdefault((condition, sample), []).append((t, state, action))

    trajectories = []
    for (condition, _sample), entries in sorted(rows.items()):
        entries.sort(key=lambda item: item[0])
        states = np.array([e[1] for e in entries])
        actions = np.array([e[2] for e in entries if e[2] is not None])
        trajectories.append(
            Trajectory(states=states, actions=actions, condition_id=condition)
        )
    return trajectories
