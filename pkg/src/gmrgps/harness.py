"""End-to-end orchestration: outer training loop, robustness protocol, exports.

One run directory holds everything a result needs to be reproduced and
inspected: the config snapshot, per-iteration metrics and diagnostics, the
sampled trajectories, and the final policy checkpoint. All randomness derives
from a single root seed through named child streams, so a (config, seed)
pair determines every output file.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .dynamics import LinearGaussianDynamics, save_trajectories, load_trajectories
from .envs import Condition, SimulationDiverged, final_state_mse, make_env, rollout
from .policy import BaselinePolicy, GmrPolicy, load_policy, save_policy
from .trajopt import CostSpec, LocalPolicy, c_step


@dataclass
class ExperimentConfig:
    """Everything a training or evaluation run needs, JSON-serializable."""

    env: dict
    conditions: list
    iterations: int = 10
    samples_per_condition: int = 5
    epsilon: float = 50.0
    alpha: float = 1e-2
    beta: float = 2e-4
    policy: str = "gmr"
    seed: int = 0
    success_threshold: float = 0.1
    out_dir: str = "runs/run"
    w_x: float = 1.0
    w_u: float = 0.1
    dynamics_regularization: float = 1e-6
    lambda_init: float = 0.01
    dataset_samples_per_step: int = 5
    exploration_std: float = 1.0
    sample_with_policy: bool = False
    dyn_fit_window: int = 0  # 0 keeps all past samples per condition
    policy_params: dict = field(default_factory=dict)
    baseline_params: dict = field(default_factory=dict)
    robustness: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not self.conditions:
            raise ValueError("at least one condition is required")

    def make_env(self):
        params = dict(self.env)
        kind = params.pop("kind")
        return make_env(kind, **params)

    def make_conditions(self):
        parsed = []
        for raw in self.conditions:
            raw = dict(raw)
            mean = np.asarray(raw["x0_mean"], dtype=np.float64)
            if "x0_cov" in raw:
                cov = np.asarray(raw["x0_cov"], dtype=np.float64)
            else:
                std = np.asarray(raw.get("x0_std", np.zeros_like(mean)),
                                 dtype=np.float64)
                cov = np.diag(std**2)
            parsed.append(
                Condition(
                    id=int(raw["id"]),
                    x0_mean=mean,
                    x0_cov=cov,
                    x_goal=np.asarray(raw["x_goal"], dtype=np.float64),
                )
            )
        return parsed

    def make_policy(self, env):
        if self.policy == "gmr":
            params = dict(alpha=self.alpha, beta=self.beta, seed=self.seed)
            params.update(self.policy_params)
            return GmrPolicy(d_x=env.d_x, d_u=env.d_u, **params)
        if self.policy == "baseline":
            params = dict(beta=self.beta, seed=self.seed)
            params.update(self.baseline_params)
            return BaselinePolicy(d_x=env.d_x, d_u=env.d_u, **params)
        raise ValueError(f"unknown policy kind {self.policy!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)

    def save(self, path):
        with open(path, "w") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as handle:
            return cls.from_dict(json.load(handle))


def load_config(path):
    return ExperimentConfig.load(path)


@dataclass
class GpsResult:
    policy: object
    local_policies: list
    metrics: list
    out_dir: str | None


def _deterministic_eval(env, controller, condition, goal):
    """Noise-free rollout from the condition mean with deterministic actions."""
    eval_condition = Condition(
        id=condition.id,
        x0_mean=condition.x0_mean,
        x0_cov=np.zeros_like(condition.x0_cov),
        x_goal=goal,
    )
    traj = rollout(env, controller, eval_condition, rng=None,
                   explore=False, noise=False)
    return final_state_mse(traj, goal)


def _empirical_mean_states(trajectories, horizon):
    stack = np.stack([t.states for t in trajectories])
    return stack.mean(axis=0)[:horizon]


def _hash_trajectories(trajectories):
    digest = hashlib.sha256()
    for traj in trajectories:
        digest.update(np.ascontiguousarray(traj.states).tobytes())
        digest.update(np.ascontiguousarray(traj.actions).tobytes())
    return digest.hexdigest()


def _write_metrics_csv(metrics, path):
    """Long-format learning curve: one row per (iteration, metric)."""
    keys = sorted({k for row in metrics for k in row if k != "iteration"})
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "metric", "value"])
        for key in keys:
            for row in metrics:
                writer.writerow([row["iteration"], key, repr(float(row[key]))])


def run_gps(config, out_dir=None, policy=None, progress=None):
    """Outer loop: sample, fit dynamics, per-condition C-steps, pooled S-step.

    ``policy=None`` builds the policy named by the config. Returns a
    GpsResult; when an output directory is set, also writes the config
    snapshot, metrics.csv, diagnostics.jsonl, per-iteration trajectory logs
    and the final policy checkpoint.
    """
    out_dir = out_dir or config.out_dir
    env = config.make_env()
    conditions = config.make_conditions()
    horizon = env.horizon

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "trajectories"), exist_ok=True)
        config.save(os.path.join(out_dir, "config.json"))
        diag_path = os.path.join(out_dir, "diagnostics.jsonl")
        diag_handle = open(diag_path, "w")
    else:
        diag_handle = None

    root = np.random.SeedSequence(config.seed)
    policy_stream, sample_stream, cstep_stream = root.spawn(3)
    rng_sample = np.random.default_rng(sample_stream)
    rng_cstep = np.random.default_rng(cstep_stream)

    if policy is None:
        policy = config.make_policy(env)
    if not hasattr(policy, "loss_history_"):
        policy.initialize(rng=np.random.default_rng(policy_stream))
    policy_trained = False

    local_policies = [
        LocalPolicy.zero(horizon, env.d_x, env.d_u, config.exploration_std)
        for _ in conditions
    ]
    duals = [config.lambda_init] * len(conditions)
    sample_store = [[] for _ in conditions]
    metrics = []

    try:
        for iteration in range(1, config.iterations + 1):
            fresh = [[] for _ in conditions]
            for ci, condition in enumerate(conditions):
                for _ in range(config.samples_per_condition):
                    use_policy = (
                        config.sample_with_policy and policy_trained
                    )
                    controller = policy if use_policy else local_policies[ci]
                    traj = rollout(env, controller, condition, rng_sample,
                                   explore=True, noise=True)
                    fresh[ci].append(traj)
                sample_store[ci].append(fresh[ci])
                if config.dyn_fit_window > 0:
                    sample_store[ci] = sample_store[ci][-config.dyn_fit_window:]

            if out_dir:
                all_fresh = [t for block in fresh for t in block]
                save_trajectories(
                    all_fresh,
                    os.path.join(out_dir, "trajectories", f"iter_{iteration:02d}.csv"),
                )

            datasets = []
            for ci, condition in enumerate(conditions):
                pooled = [t for block in sample_store[ci] for t in block]
                dyn = LinearGaussianDynamics(
                    regularization=config.dynamics_regularization
                ).fit(pooled)

                if policy_trained:
                    anchor_states = _empirical_mean_states(fresh[ci], horizon)
                    reference = policy.induced_local_policy(anchor_states)
                else:
                    reference = local_policies[ci]

                cost_spec = CostSpec(
                    x_goal=condition.x_goal, w_x=config.w_x, w_u=config.w_u
                )
                new_policy, dataset, dual, info = c_step(
                    dyn,
                    cost_spec,
                    reference,
                    config.epsilon,
                    x0_mean=condition.x0_mean,
                    x0_cov=condition.x0_cov,
                    lambda_init=duals[ci],
                    rng=rng_cstep,
                    samples_per_step=config.dataset_samples_per_step,
                )
                local_policies[ci] = new_policy
                duals[ci] = dual.lam
                datasets.append(dataset)
                if diag_handle is not None:
                    diag_handle.write(json.dumps({
                        "iteration": iteration,
                        "condition": condition.id,
                        "kl": float(info["kl"]),
                        "epsilon": float(config.epsilon),
                        "lambda_min": float(np.min(dual.lam)),
                        "lambda_max": float(np.max(dual.lam)),
                        "expected_cost": float(info["expected_cost"]),
                        "adjustments": int(info["adjustments"]),
                    }) + "\n")

            policy.fit(datasets)
            policy_trained = True

            row = {"iteration": iteration}
            policy_mses, lqr_mses = [], []
            for ci, condition in enumerate(conditions):
                p_mse = _deterministic_eval(env, policy, condition, condition.x_goal)
                l_mse = _deterministic_eval(
                    env, local_policies[ci], condition, condition.x_goal
                )
                row[f"policy_mse_cond_{condition.id}"] = p_mse
                row[f"lqr_mse_cond_{condition.id}"] = l_mse
                policy_mses.append(p_mse)
                lqr_mses.append(l_mse)
            row["policy_mse"] = float(np.mean(policy_mses))
            row["lqr_mse"] = float(np.mean(lqr_mses))
            metrics.append(row)
            if progress is not None:
                progress(row)
    finally:
        if diag_handle is not None:
            diag_handle.close()

    if out_dir:
        _write_metrics_csv(metrics, os.path.join(out_dir, "metrics.csv"))
        save_policy(policy, os.path.join(out_dir, "checkpoints", "policy"))

    return GpsResult(policy=policy, local_policies=local_policies,
                     metrics=metrics, out_dir=out_dir)


@dataclass
class RobustnessReport:
    """Per-trial outcomes of the random-initial-state protocol."""

    policy_kind: str
    threshold: float
    trials: list  # dicts: initial_state, final_mse, success, trajectory_path

    @property
    def n_trials(self):
        return len(self.trials)

    @property
    def success_count(self):
        return sum(1 for t in self.trials if t["success"])

    def success_count_at(self, threshold):
        return sum(1 for t in self.trials if t["final_mse"] < threshold)

    def to_dict(self):
        return {
            "policy_kind": self.policy_kind,
            "threshold": self.threshold,
            "success_count": self.success_count,
            "n_trials": self.n_trials,
            "trials": self.trials,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            policy_kind=payload["policy_kind"],
            threshold=payload["threshold"],
            trials=payload["trials"],
        )

    def save(self, path):
        with open(path, "w") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as handle:
            return cls.from_dict(json.load(handle))


DEFAULT_ROBUSTNESS = {
    "trials": 50,
    "position_low": [-2.0, -2.0],
    "position_high": [2.0, 2.0],
    "velocity_bound": 0.5,
}


def evaluate_robustness(policy, env, goal, trials=50, seed=0, threshold=0.1,
                        position_low=None, position_high=None,
                        velocity_bound=0.5, out_dir=None, policy_kind=None):
    """Roll the policy out from uniform-random initial states.

    Initial positions are uniform inside the configured workspace box and
    initial velocities uniform in +-velocity_bound. Divergent rollouts count
    as failures. Success is final-state MSE below the threshold.
    """
    goal = np.asarray(goal, dtype=np.float64)
    d_pos = env.d_x // 2
    low = np.asarray(
        DEFAULT_ROBUSTNESS["position_low"] if position_low is None else position_low,
        dtype=np.float64,
    )
    high = np.asarray(
        DEFAULT_ROBUSTNESS["position_high"] if position_high is None else position_high,
        dtype=np.float64,
    )
    if low.shape[0] != d_pos or high.shape[0] != d_pos:
        raise ValueError("position bounds must have one entry per position dim")

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    records = []
    for trial in range(trials):
        pos = rng.uniform(low, high)
        vel = rng.uniform(-velocity_bound, velocity_bound, size=env.d_x - d_pos)
        x0 = np.concatenate([pos, vel])
        condition = Condition(id=trial, x0_mean=x0,
                              x0_cov=np.zeros((env.d_x, env.d_x)), x_goal=goal)
        path = None
        try:
            traj = rollout(env, policy, condition, rng, explore=False, noise=True)
            mse = final_state_mse(traj, goal)
            if out_dir:
                path = os.path.join(out_dir, f"trial_{trial:03d}.csv")
                save_trajectories([traj], path)
        except SimulationDiverged:
            mse = float("inf")
        records.append({
            "initial_state": [float(v) for v in x0],
            "final_mse": float(mse),
            "success": bool(mse < threshold),
            "trajectory_path": path,
        })
    kind = policy_kind or type(policy).__name__
    return RobustnessReport(policy_kind=kind, threshold=threshold, trials=records)


@dataclass
class ComparisonResult:
    gmr_report: RobustnessReport
    baseline_report: RobustnessReport
    summary: dict


def _generate_shared_data(config, env, conditions):
    """Policy-independent data phase for the paired comparison.

    The C-step trust region references the previous local policy, so the
    stream of exploration trajectories and supervision datasets is identical
    for every policy later trained on it.
    """
    horizon = env.horizon
    root = np.random.SeedSequence(config.seed)
    _, sample_stream, cstep_stream = root.spawn(3)
    rng_sample = np.random.default_rng(sample_stream)
    rng_cstep = np.random.default_rng(cstep_stream)

    local_policies = [
        LocalPolicy.zero(horizon, env.d_x, env.d_u, config.exploration_std)
        for _ in conditions
    ]
    duals = [config.lambda_init] * len(conditions)
    sample_store = [[] for _ in conditions]
    all_trajectories = []
    per_iteration_datasets = []

    for _ in range(config.iterations):
        datasets = []
        for ci, condition in enumerate(conditions):
            block = [
                rollout(env, local_policies[ci], condition, rng_sample,
                        explore=True, noise=True)
                for _ in range(config.samples_per_condition)
            ]
            all_trajectories.extend(block)
            sample_store[ci].append(block)
            if config.dyn_fit_window > 0:
                sample_store[ci] = sample_store[ci][-config.dyn_fit_window:]
            pooled = [t for b in sample_store[ci] for t in b]
            dyn = LinearGaussianDynamics(
                regularization=config.dynamics_regularization
            ).fit(pooled)
            cost_spec = CostSpec(x_goal=condition.x_goal,
                                 w_x=config.w_x, w_u=config.w_u)
            new_policy, dataset, dual, _ = c_step(
                dyn,
                cost_spec,
                local_policies[ci],
                config.epsilon,
                x0_mean=condition.x0_mean,
                x0_cov=condition.x0_cov,
                lambda_init=duals[ci],
                rng=rng_cstep,
                samples_per_step=config.dataset_samples_per_step,
            )
            local_policies[ci] = new_policy
            duals[ci] = dual.lam
            datasets.append(dataset)
        per_iteration_datasets.append(datasets)

    return per_iteration_datasets, all_trajectories, local_policies


def compare_policies(config, out_dir=None):
    """Train a reflex policy and a baseline on identical data, then run the
    robustness protocol on both with identical evaluation seeds."""
    out_dir = out_dir or config.out_dir
    env = config.make_env()
    conditions = config.make_conditions()
    goal = conditions[0].x_goal

    datasets, trajectories, _ = _generate_shared_data(config, env, conditions)
    data_hash = _hash_trajectories(trajectories)

    root = np.random.SeedSequence(config.seed)
    gmr_stream, baseline_stream = root.spawn(2)

    gmr_params = dict(alpha=config.alpha, beta=config.beta, seed=config.seed)
    gmr_params.update(config.policy_params)
    gmr = GmrPolicy(d_x=env.d_x, d_u=env.d_u, **gmr_params)
    gmr.initialize(rng=np.random.default_rng(gmr_stream))

    baseline_params = dict(beta=config.beta, seed=config.seed)
    baseline_params.update(config.baseline_params)
    baseline = BaselinePolicy(d_x=env.d_x, d_u=env.d_u, **baseline_params)
    baseline.initialize(rng=np.random.default_rng(baseline_stream))

    gmr_hash = data_hash
    baseline_hash = data_hash
    for iteration_datasets in datasets:
        gmr.fit(iteration_datasets)
    for iteration_datasets in datasets:
        baseline.fit(iteration_datasets)

    rob = dict(DEFAULT_ROBUSTNESS)
    rob.update(config.robustness)
    eval_seed = config.seed + 1
    common = dict(
        trials=rob["trials"],
        seed=eval_seed,
        threshold=config.success_threshold,
        position_low=rob["position_low"],
        position_high=rob["position_high"],
        velocity_bound=rob["velocity_bound"],
    )
    gmr_dir = os.path.join(out_dir, "robustness_gmr") if out_dir else None
    base_dir = os.path.join(out_dir, "robustness_baseline") if out_dir else None
    gmr_report = evaluate_robustness(gmr, env, goal, out_dir=gmr_dir,
                                     policy_kind="gmr", **common)
    baseline_report = evaluate_robustness(baseline, env, goal, out_dir=base_dir,
                                          policy_kind="baseline", **common)

    if gmr_hash != baseline_hash:
        raise RuntimeError("paired comparison consumed different exploration data")

    summary = {
        "training_data_sha256": data_hash,
        "shared_training_data": gmr_hash == baseline_hash,
        "eval_seed": eval_seed,
        "threshold": config.success_threshold,
        "n_trials": rob["trials"],
        "gmr_success": gmr_report.success_count,
        "baseline_success": baseline_report.success_count,
        "gmr_success_at_0.1": gmr_report.success_count_at(0.1),
        "baseline_success_at_0.1": baseline_report.success_count_at(0.1),
        "gmr_success_at_0.01": gmr_report.success_count_at(0.01),
        "baseline_success_at_0.01": baseline_report.success_count_at(0.01),
    }

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        config.save(os.path.join(out_dir, "config.json"))
        gmr_report.save(os.path.join(out_dir, "report_gmr.json"))
        baseline_report.save(os.path.join(out_dir, "report_baseline.json"))
        with open(os.path.join(out_dir, "summary.json"), "w") as handle:
            json.dump(summary, handle, indent=2, sort_keys=True)
        save_policy(gmr, os.path.join(out_dir, "checkpoints", "gmr"))
        save_policy(baseline, os.path.join(out_dir, "checkpoints", "baseline"))

    return ComparisonResult(gmr_report=gmr_report, baseline_report=baseline_report,
                            summary=summary)


def export_learning_curve(metrics, path):
    """Flat CSV of the learning curve, one row per (iteration, metric)."""
    _write_metrics_csv(metrics, path)


def export_report_trajectories(report, path):
    """Flat CSV of evaluation trajectories: trial, step, x, y.

    x and y are the first two state components of each logged trajectory.
    Trials whose rollout diverged (no trajectory file) are skipped.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["trial", "step", "x", "y"])
        for trial_idx, trial in enumerate(report.trials):
            traj_path = trial.get("trajectory_path")
            if not traj_path or not os.path.exists(traj_path):
                continue
            for traj in load_trajectories(traj_path):
                for step in range(traj.states.shape[0]):
                    writer.writerow([
                        trial_idx, step,
                        repr(float(traj.states[step, 0])),
                        repr(float(traj.states[step, 1])),
                    ])


def load_run_metrics(run_dir):
    """Read back metrics.csv from a run directory into per-iteration dicts."""
    path = os.path.join(run_dir, "metrics.csv")
    rows = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        for record in reader:
            iteration = int(record["iteration"])
            rows.setdefault(iteration, {"iteration": iteration})
            rows[iteration][record["metric"]] = float(record["value"])
    return [rows[k] for k in sorted(rows)]
