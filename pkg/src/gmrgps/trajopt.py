"""KL-constrained LQR trajectory optimization.

The C-step pipeline: expand the tracking cost to a per-timestep quadratic,
run the LQR backward pass to get motor-reflex parameters (C1), propagate
state marginals forward through the fitted dynamics to build the training
dataset (C2), and adjust the dual variable until the trajectory KL against
the reference policy fits the trust region (C3).

Conventions: the combined state-action vector is [x; u] with x first, and
a reflex at timestep t is the linear-Gaussian controller
u ~ N(K @ x + k, Sigma).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import check_finite, symmetrize

LAMBDA_CAP = 1e16
LAMBDA_UP = 10.0
LAMBDA_DOWN = 5.0
KL_TOLERANCE = 1.1  # accept measured KL up to this factor times epsilon
QUU_REG_INIT = 1e-8
QUU_REG_MAX = 1e10


@dataclass
class MotorReflex:
    """One-timestep linear-Gaussian controller u ~ N(K x + k, Sigma)."""

    K: np.ndarray
    k: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        self.Sigma = np.asarray(self.Sigma, dtype=np.float64)
        d_u = self.k.shape[0]
        if self.K.shape[0] != d_u or self.Sigma.shape != (d_u, d_u):
            raise ValueError("reflex parameter shapes are inconsistent")
        check_finite(self.K, "K")
        check_finite(self.k, "k")
        check_finite(self.Sigma, "Sigma")

    @property
    def d_u(self):
        return self.k.shape[0]

    @property
    def d_x(self):
        return self.K.shape[1]

    def mean_action(self, x):
        return self.K @ x + self.k

    def sample_action(self, x, rng):
        return rng.multivariate_normal(self.mean_action(x), self.Sigma, method="cholesky")

    def as_vector(self):
        """Flatten to [K; k; Sigma] with Sigma counted as a full matrix."""
        return np.concatenate([self.K.ravel(), self.k, self.Sigma.ravel()])


@dataclass
class LocalPolicy:
    """Time-indexed reflex sequence with optional forward-pass state marginals."""

    reflexes: list
    state_means: np.ndarray | None = None
    state_covs: np.ndarray | None = None

    @property
    def horizon(self):
        return len(self.reflexes)

    @property
    def d_x(self):
        return self.reflexes[0].d_x

    @property
    def d_u(self):
        return self.reflexes[0].d_u

    def mean_action(self, t, x):
        return self.reflexes[t].mean_action(x)

    def sample_action(self, t, x, rng):
        return self.reflexes[t].sample_action(x, rng)

    @classmethod
    def zero(cls, horizon, d_x, d_u, action_std=1.0):
        """Do-nothing policy with isotropic exploration noise."""
        sigma = (action_std ** 2) * np.eye(d_u)
        reflexes = [
            MotorReflex(np.zeros((d_u, d_x)), np.zeros(d_u), sigma.copy())
            for _ in range(horizon)
        ]
        return cls(reflexes=reflexes)


@dataclass
class CostSpec:
    """Built-in tracking cost 0.5*w_x*||x - x_goal||^2 + 0.5*w_u*||u||^2."""

    x_goal: np.ndarray
    w_x: float = 1.0
    w_u: float = 1.0

    def __post_init__(self):
        self.x_goal = np.asarray(self.x_goal, dtype=np.float64)
        if self.w_u <= 0.0:
            raise ValueError("w_u must be positive, otherwise l_uu is indefinite")
        if self.w_x < 0.0:
            raise ValueError("w_x must be nonnegative")


@dataclass
class QuadraticCost:
    """Per-timestep quadratic cost 0.5 [x;u]' l_xuxu [x;u] + [x;u]' l_xu + const.

    Arrays have T+1 entries; the terminal entry has zero action blocks.
    """

    l_xuxu: np.ndarray
    l_xu: np.ndarray
    l_const: np.ndarray
    d_x: int
    d_u: int

    @property
    def horizon(self):
        return self.l_const.shape[0] - 1

    def value(self, t, x, u=None):
        xu = np.concatenate([x, np.zeros(self.d_u) if u is None else u])
        return float(
            0.5 * xu @ self.l_xuxu[t] @ xu + xu @ self.l_xu[t] + self.l_const[t]
        )


def expand_cost(spec, horizon, d_x, d_u):
    """Exact quadratic expansion of the built-in tracking cost over a horizon."""
    if spec.x_goal.shape[0] != d_x:
        raise ValueError("x_goal dimension does not match d_x")
    p = d_x + d_u
    step = np.zeros((p, p))
    step[:d_x, :d_x] = spec.w_x * np.eye(d_x)
    step[d_x:, d_x:] = spec.w_u * np.eye(d_u)
    lin = np.concatenate([-spec.w_x * spec.x_goal, np.zeros(d_u)])
    const = 0.5 * spec.w_x * float(spec.x_goal @ spec.x_goal)

    l_xuxu = np.tile(step, (horizon + 1, 1, 1))
    l_xu = np.tile(lin, (horizon + 1, 1))
    l_const = np.full(horizon + 1, const)
    # terminal step has no action
    l_xuxu[horizon, d_x:, :] = 0.0
    l_xuxu[horizon, :, d_x:] = 0.0
    l_xu[horizon, d_x:] = 0.0
    return QuadraticCost(l_xuxu=l_xuxu, l_xu=l_xu, l_const=l_const, d_x=d_x, d_u=d_u)


@dataclass
class DualState:
    """Per-timestep KL multipliers plus the step bound they enforce."""

    lam: np.ndarray
    epsilon: float
    violation: float | None = None

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if np.any(self.lam < 0.0):
            raise ValueError("multipliers must be nonnegative")
        if not self.epsilon > 0.0:
            raise ValueError("epsilon must be positive")


@dataclass
class ReflexDataset:
    """Supervision records (x, reflex, u_mean, Sigma_prev) stacked as arrays."""

    states: np.ndarray          # (n, d_x)
    K: np.ndarray               # (n, d_u, d_x)
    k: np.ndarray               # (n, d_u)
    Sigma: np.ndarray           # (n, d_u, d_u) reflex covariance
    u_mean: np.ndarray          # (n, d_u) reflex mean action at the record state
    Sigma_prev: np.ndarray      # (n, d_u, d_u) reference-policy covariance

    def __post_init__(self):
        n = self.states.shape[0]
        for name in ("K", "k", "Sigma", "u_mean", "Sigma_prev"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"dataset field {name} has inconsistent length")

    def __len__(self):
        return self.states.shape[0]

    @property
    def d_x(self):
        return self.states.shape[1]

    @property
    def d_u(self):
        return self.u_mean.shape[1]

    def reflex(self, i):
        return MotorReflex(self.K[i], self.k[i], self.Sigma[i])

    def subset(self, indices):
        return ReflexDataset(
            states=self.states[indices],
            K=self.K[indices],
            k=self.k[indices],
            Sigma=self.Sigma[indices],
            u_mean=self.u_mean[indices],
            Sigma_prev=self.Sigma_prev[indices],
        )

    @classmethod
    def concatenate(cls, datasets):
        datasets = [d for d in datasets if len(d) > 0]
        if not datasets:
            raise ValueError("cannot concatenate empty dataset list")
        return cls(
            states=np.concatenate([d.states for d in datasets]),
            K=np.concatenate([d.K for d in datasets]),
            k=np.concatenate([d.k for d in datasets]),
            Sigma=np.concatenate([d.Sigma for d in datasets]),
            u_mean=np.concatenate([d.u_mean for d in datasets]),
            Sigma_prev=np.concatenate([d.Sigma_prev for d in datasets]),
        )


@dataclass
class QVInfo:
    """Q and V expansions produced by the backward pass (diagnostics, tests)."""

    Q_xuxu: np.ndarray   # (T, p, p)
    Q_xu: np.ndarray     # (T, p)
    V_xx: np.ndarray     # (T+1, d_x, d_x)
    V_x: np.ndarray      # (T+1, d_x)
    v_const: np.ndarray  # (T+1,)

    def value(self, t, x):
        return float(0.5 * x @ self.V_xx[t] @ x + x @ self.V_x[t] + self.v_const[t])


def _chol_solve_psd(a, b):
    """Solve a @ x = b for symmetric positive-definite a via Cholesky."""
    chol = np.linalg.cholesky(a)
    y = np.linalg.solve(chol, b)
    return np.linalg.solve(chol.T, y)


def _regularized_cholesky(quu, t):
    """Cholesky of quu, escalating a diagonal shift until it succeeds."""
    try:
        return np.linalg.cholesky(quu), quu
    except np.linalg.LinAlgError:
        pass
    mu = QUU_REG_INIT
    eye = np.eye(quu.shape[0])
    while mu <= QUU_REG_MAX:
        try:
            shifted = quu + mu * eye
            return np.linalg.cholesky(shifted), shifted
        except np.linalg.LinAlgError:
            mu *= 10.0
    raise RuntimeError(
        f"Q_uu at t={t} is indefinite even with diagonal shift {QUU_REG_MAX:g}; "
        "the cost and dynamics are inconsistent"
    )


def _ref_log_density_expansion(reflex):
    """Quadratic expansion of -log pi_ref(u|x) for a linear-Gaussian reference.

    Returns (M, v, c) so that -log pi(u|x) = 0.5 [x;u]' M [x;u] + [x;u]' v + c.
    """
    prec = np.linalg.inv(reflex.Sigma)
    prec = symmetrize(prec)
    k_bar = reflex.k
    kt_p = reflex.K.T @ prec
    d_x = reflex.d_x
    d_u = reflex.d_u
    p = d_x + d_u
    m = np.zeros((p, p))
    m[:d_x, :d_x] = kt_p @ reflex.K
    m[:d_x, d_x:] = -kt_p
    m[d_x:, :d_x] = -kt_p.T
    m[d_x:, d_x:] = prec
    v = np.concatenate([kt_p @ k_bar, -prec @ k_bar])
    sign, logdet = np.linalg.slogdet(reflex.Sigma)
    c = 0.5 * float(k_bar @ prec @ k_bar) + 0.5 * (d_u * np.log(2.0 * np.pi) + logdet)
    return m, v, c


def lqr_backward(dyn, cost, ref_policy=None, dual=None):
    """LQR backward pass (C1): reflex parameters K, k, Sigma per timestep.

    With any positive multiplier the per-step cost is the Lagrangian
    l/lam + (-log pi_ref), which folds the KL penalty against the reference
    controller into a plain quadratic before the standard Q/V recursion.
    Gains follow K = -Quu^-1 Qux, k = -Quu^-1 Qu, and the reflex covariance
    is set to Quu^-1.

    Returns (reflexes, QVInfo). The Q expansions in QVInfo are in original
    cost units (before any KL folding); V tracks the deterministic
    mean-rollout cost-to-go, exact when all multipliers are zero.
    """
    horizon = dyn.horizon_
    d_x = dyn.d_x_
    d_u = dyn.d_u_
    p = d_x + d_u
    if cost.horizon != horizon:
        raise ValueError("cost horizon does not match dynamics horizon")
    lam = np.zeros(horizon) if dual is None else dual.lam
    if lam.shape[0] != horizon:
        raise ValueError("dual multipliers must have one entry per timestep")
    if np.any(lam > 0.0) and ref_policy is None:
        raise ValueError("a reference policy is required when multipliers are positive")

    v_xx = np.zeros((horizon + 1, d_x, d_x))
    v_x = np.zeros((horizon + 1, d_x))
    v_c = np.zeros(horizon + 1)
    q_xuxu = np.zeros((horizon, p, p))
    q_xu = np.zeros((horizon, p))
    v_xx[horizon] = cost.l_xuxu[horizon, :d_x, :d_x]
    v_x[horizon] = cost.l_xu[horizon, :d_x]
    v_c[horizon] = cost.l_const[horizon]

    reflexes = [None] * horizon
    for t in range(horizon - 1, -1, -1):
        f = dyn.f_xu_[t]
        fc = dyn.f_c_[t]
        qtt = cost.l_xuxu[t] + f.T @ v_xx[t + 1] @ f
        qtt = symmetrize(qtt)
        qt = cost.l_xu[t] + f.T @ (v_x[t + 1] + v_xx[t + 1] @ fc)
        qc = (
            cost.l_const[t]
            + v_c[t + 1]
            + float(v_x[t + 1] @ fc)
            + 0.5 * float(fc @ v_xx[t + 1] @ fc)
        )
        q_xuxu[t] = qtt
        q_xu[t] = qt

        if lam[t] > 0.0:
            m_kl, v_kl, c_kl = _ref_log_density_expansion(ref_policy.reflexes[t])
            a_tt = qtt / lam[t] + m_kl
            a_t = qt / lam[t] + v_kl
            a_c = qc / lam[t] + c_kl
            scale = lam[t]
        else:
            a_tt, a_t, a_c = qtt, qt, qc
            scale = 1.0

        a_uu = symmetrize(a_tt[d_x:, d_x:])
        chol, a_uu = _regularized_cholesky(a_uu, t)
        a_ux = a_tt[d_x:, :d_x]
        a_u = a_t[d_x:]
        gain = -np.linalg.solve(chol.T, np.linalg.solve(chol, a_ux))
        offset = -np.linalg.solve(chol.T, np.linalg.solve(chol, a_u))
        inv_chol = np.linalg.solve(chol, np.eye(d_u))
        sigma = symmetrize(inv_chol.T @ inv_chol)
        reflexes[t] = MotorReflex(K=gain, k=offset, Sigma=sigma)

        a_xx = a_tt[:d_x, :d_x]
        a_xu = a_tt[:d_x, d_x:]
        a_x = a_t[:d_x]
        v_xx[t] = scale * symmetrize(a_xx + a_xu @ gain)
        v_x[t] = scale * (a_x + a_xu @ offset)
        v_c[t] = scale * (a_c - 0.5 * float(offset @ a_uu @ offset))

    info = QVInfo(Q_xuxu=q_xuxu, Q_xu=q_xu, V_xx=v_xx, V_x=v_x, v_const=v_c)
    return reflexes, info


def lqr_forward(dyn, reflexes, x0_mean, x0_cov, rng=None, samples_per_step=0):
    """LQR forward pass (C2): Gaussian state marginals plus the S-step dataset.

    Every timestep contributes its marginal-mean record; with
    ``samples_per_step > 0`` that many extra states are drawn from the
    marginal and paired with the same reflex (requires ``rng``).
    """
    horizon = dyn.horizon_
    d_x = dyn.d_x_
    d_u = dyn.d_u_
    if len(reflexes) != horizon:
        raise ValueError("reflex count does not match dynamics horizon")
    if samples_per_step > 0 and rng is None:
        raise ValueError("samples_per_step > 0 requires an rng")

    means = np.zeros((horizon + 1, d_x))
    covs = np.zeros((horizon + 1, d_x, d_x))
    means[0] = np.asarray(x0_mean, dtype=np.float64)
    covs[0] = np.asarray(x0_cov, dtype=np.float64)

    n_records = horizon * (1 + samples_per_step)
    ds_states = np.zeros((n_records, d_x))
    ds_K = np.zeros((n_records, d_u, d_x))
    ds_k = np.zeros((n_records, d_u))
    ds_Sigma = np.zeros((n_records, d_u, d_u))
    ds_u = np.zeros((n_records, d_u))

    row = 0
    for t in range(horizon):
        reflex = reflexes[t]
        mu, s = means[t], covs[t]

        block = [means[t]]
        if samples_per_step > 0:
            jitter = s + 1e-12 * np.eye(d_x)
            draws = rng.multivariate_normal(mu, jitter, size=samples_per_step,
                                            method="cholesky")
            block.extend(draws)
        for state in block:
            ds_states[row] = state
            ds_K[row] = reflex.K
            ds_k[row] = reflex.k
            ds_Sigma[row] = reflex.Sigma
            ds_u[row] = reflex.mean_action(state)
            row += 1

        # joint (x, u) Gaussian under the reflex, then push through dynamics
        ks = reflex.K @ s
        joint_cov = np.block(
            [[s, ks.T], [ks, ks @ reflex.K.T + reflex.Sigma]]
        )
        joint_mean = np.concatenate([mu, reflex.mean_action(mu)])
        f = dyn.f_xu_[t]
        means[t + 1] = f @ joint_mean + dyn.f_c_[t]
        covs[t + 1] = symmetrize(f @ joint_cov @ f.T + dyn.F_[t])

    policy = LocalPolicy(reflexes=list(reflexes), state_means=means, state_covs=covs)
    dataset = ReflexDataset(
        states=ds_states, K=ds_K, k=ds_k, Sigma=ds_Sigma, u_mean=ds_u,
        Sigma_prev=ds_Sigma.copy(),
    )
    return policy, dataset


def expected_cost(cost, policy):
    """E[J(tau)] of a local policy under its own forward-pass marginals."""
    if policy.state_means is None:
        raise ValueError("policy has no state marginals; run lqr_forward first")
    horizon = policy.horizon
    d_x = policy.d_x
    total = 0.0
    for t in range(horizon):
        reflex = policy.reflexes[t]
        mu, s = policy.state_means[t], policy.state_covs[t]
        ks = reflex.K @ s
        joint_cov = np.block([[s, ks.T], [ks, ks @ reflex.K.T + reflex.Sigma]])
        joint_mean = np.concatenate([mu, reflex.mean_action(mu)])
        total += (
            0.5 * float(joint_mean @ cost.l_xuxu[t] @ joint_mean)
            + 0.5 * float(np.trace(cost.l_xuxu[t] @ joint_cov))
            + float(joint_mean @ cost.l_xu[t])
            + float(cost.l_const[t])
        )
    mu_t = policy.state_means[horizon]
    s_t = policy.state_covs[horizon]
    lxx = cost.l_xuxu[horizon, :d_x, :d_x]
    total += (
        0.5 * float(mu_t @ lxx @ mu_t)
        + 0.5 * float(np.trace(lxx @ s_t))
        + float(mu_t @ cost.l_xu[horizon, :d_x])
        + float(cost.l_const[horizon])
    )
    return total


def trajectory_kl(policy, ref_policy):
    """Trajectory KL: sum over t of E over the policy's state marginal of
    KL(policy(u|x) || ref(u|x)), both conditionals linear-Gaussian.
    """
    if policy.state_means is None:
        raise ValueError("policy has no state marginals; run lqr_forward first")
    if policy.horizon != ref_policy.horizon:
        raise ValueError("policies disagree on horizon")
    d_u = policy.d_u
    total = 0.0
    for t in range(policy.horizon):
        new = policy.reflexes[t]
        ref = ref_policy.reflexes[t]
        mu, s = policy.state_means[t], policy.state_covs[t]
        try:
            prec_ref = np.linalg.inv(ref.Sigma)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"reference covariance at t={t} is singular") from exc
        sign_new, logdet_new = np.linalg.slogdet(new.Sigma)
        sign_ref, logdet_ref = np.linalg.slogdet(ref.Sigma)
        if sign_new <= 0 or sign_ref <= 0:
            raise ValueError(f"covariance at t={t} is not positive definite")
        k_diff = new.K - ref.K
        off_diff = new.k - ref.k
        mean_gap = k_diff @ mu + off_diff
        step = 0.5 * (
            logdet_ref
            - logdet_new
            - d_u
            + float(np.trace(prec_ref @ new.Sigma))
            + float(mean_gap @ prec_ref @ mean_gap)
            + float(np.trace(k_diff.T @ prec_ref @ k_diff @ s))
        )
        total += max(step, 0.0)
    return total


def adjust_dual(dual, measured_kl):
    """C3 multiplier update: multiply up when the KL bound is violated,
    divide down when the step is overly conservative (below half the bound).
    """
    lam = dual.lam.copy()
    if measured_kl > dual.epsilon:
        lam = np.minimum(lam * LAMBDA_UP, LAMBDA_CAP)
    elif measured_kl < 0.5 * dual.epsilon:
        lam = lam / LAMBDA_DOWN
    return DualState(lam=lam, epsilon=dual.epsilon,
                     violation=measured_kl - dual.epsilon)


def c_step(
    dyn,
    cost_spec,
    ref_policy,
    epsilon,
    x0_mean,
    x0_cov,
    lambda_init=0.01,
    rng=None,
    samples_per_step=0,
    max_adjustments=60,
):
    """Full C-step: backward/forward passes inside the dual-adjustment loop.

    Accepts the first iterate whose trajectory KL against the reference is
    at most ``KL_TOLERANCE * epsilon``. An infinite ``epsilon`` disables the
    constraint and reduces to a single unconstrained LQR solve.

    Returns ``(policy, dataset, dual, info)`` where info carries the
    measured KL, the expected cost and the number of dual adjustments.
    """
    horizon = dyn.horizon_
    cost = expand_cost(cost_spec, horizon, dyn.d_x_, dyn.d_u_)

    if np.isinf(epsilon):
        reflexes, _ = lqr_backward(dyn, cost, ref_policy=None, dual=None)
        policy, dataset = lqr_forward(
            dyn, reflexes, x0_mean, x0_cov, rng=rng, samples_per_step=samples_per_step
        )
        measured = trajectory_kl(policy, ref_policy) if ref_policy is not None else np.nan
        dual = DualState(lam=np.zeros(horizon), epsilon=np.inf, violation=None)
        info = {
            "kl": measured,
            "expected_cost": expected_cost(cost, policy),
            "adjustments": 0,
        }
        return policy, dataset, dual, info

    if np.isscalar(lambda_init):
        lam0 = np.full(horizon, float(lambda_init))
    else:
        lam0 = np.asarray(lambda_init, dtype=np.float64)
    dual = DualState(lam=lam0, epsilon=float(epsilon))

    adjustments = 0
    while True:
        reflexes, _ = lqr_backward(dyn, cost, ref_policy=ref_policy, dual=dual)
        policy, _ = lqr_forward(dyn, reflexes, x0_mean, x0_cov)
        measured = trajectory_kl(policy, ref_policy)
        if measured <= KL_TOLERANCE * dual.epsilon:
            break
        if np.max(dual.lam) >= LAMBDA_CAP:
            raise RuntimeError(
                f"KL constraint unsatisfiable: measured {measured:.4g} > "
                f"{KL_TOLERANCE:.2f} * epsilon ({dual.epsilon:.4g}) with "
                f"multipliers at the cap {LAMBDA_CAP:g}"
            )
        if adjustments >= max_adjustments:
            raise RuntimeError(
                f"dual adjustment did not converge in {max_adjustments} steps "
                f"(last KL {measured:.4g}, epsilon {dual.epsilon:.4g})"
            )
        dual = adjust_dual(dual, measured)
        adjustments += 1

    # final accepted pass, now with dataset sampling
    policy, dataset = lqr_forward(
        dyn, reflexes, x0_mean, x0_cov, rng=rng, samples_per_step=samples_per_step
    )
    dual = adjust_dual(dual, measured)  # persists a relaxation for the next call
    info = {
        "kl": measured,
        "expected_cost": expected_cost(cost, policy),
        "adjustments": adjustments,
    }
    return policy, dataset, dual, info
