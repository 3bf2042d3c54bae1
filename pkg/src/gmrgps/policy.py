"""Generative motor reflex policy and the baseline state-action policy.

The GMR policy compresses the state with a variational autoencoder and
translates the latent code into parameters of a one-timestep linear-Gaussian
controller (gain matrix, offset, covariance). Training minimizes four terms:
state reconstruction, latent KL against a unit Gaussian, the controller KL
against the local-policy supervision, and an L2 penalty on all weights.

The baseline policy is a plain state-to-action network trained by
precision-weighted regression onto the same supervision actions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import nn
from .trajopt import LocalPolicy, MotorReflex, ReflexDataset
from .validation import as_float_vector, check_finite, symmetrize

SIGMA_EPS = 1e-6          # diagonal lift on the emitted reflex covariance
LOGVAR_MAX = 15.0


def reflex_param_count(d_x, d_u):
    """Size of the flattened reflex [K; k; Sigma] with Sigma a full matrix."""
    return d_u * d_x + d_u + d_u * d_u


def packed_reflex_dim(d_x, d_u):
    """Translator output size: K, k and a lower-triangular covariance factor."""
    return d_u * d_x + d_u + d_u * (d_u + 1) // 2


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_hidden_tuple(hidden):
    if hidden is None:
        return ()
    if np.isscalar(hidden):
        return (int(hidden),)
    return tuple(int(h) for h in hidden)


def _mlp_dims(d_in, hidden, d_out):
    dims = (d_in,) + _as_hidden_tuple(hidden) + (d_out,)
    activations = ("leaky_relu",) * (len(dims) - 2) + ("identity",)
    return dims, activations


@dataclass
class GmrLossBreakdown:
    """Loss terms averaged over the dataset; `l2` is the raw squared norm."""

    recon: float
    latent_kl: float
    reflex_kl: float
    l2: float
    alpha: float
    beta: float

    @property
    def total(self):
        return self.recon + self.alpha * self.latent_kl + self.reflex_kl + self.beta * self.l2


def reflex_kl_loss(reflex, ref_u_mean, sigma_prev, x):
    """Controller KL against a reference action, offset eliminated.

    Computes L_cov + L_mean with L_cov = tr(P Sigma) - log|Sigma| and
    L_mean = du' P du, du = (K x + k) - u_ref, P = inv(sigma_prev). The
    offset difference never appears explicitly: it is absorbed into the
    action residual, so the reference is described by its action at x and
    its covariance alone.
    """
    sigma_prev = np.asarray(sigma_prev, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(sigma_prev)
    except np.linalg.LinAlgError as exc:
        raise ValueError("reference covariance is singular or indefinite") from exc
    prec = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(chol.shape[0])))
    prec = symmetrize(prec)
    sign, logdet = np.linalg.slogdet(reflex.Sigma)
    if sign <= 0:
        raise ValueError("reflex covariance is not positive definite")
    cov_term = float(np.trace(prec @ reflex.Sigma)) - logdet
    residual = reflex.mean_action(np.asarray(x, dtype=np.float64)) - np.asarray(
        ref_u_mean, dtype=np.float64
    )
    mean_term = float(residual @ prec @ residual)
    return cov_term + mean_term


class _TranslatorHead:
    """Index plumbing between the flat translator output and (K, k, L)."""

    def __init__(self, d_x, d_u):
        self.d_x = d_x
        self.d_u = d_u
        self.n_gain = d_u * d_x
        self.rows, self.cols = np.tril_indices(d_u)
        self.diag_pos = np.flatnonzero(self.rows == self.cols)
        self.out_dim = packed_reflex_dim(d_x, d_u)

    def unpack(self, psi):
        """psi (n, P) -> K (n,du,dx), k (n,du), Sigma (n,du,du), tri_raw."""
        n = psi.shape[0]
        d_x, d_u = self.d_x, self.d_u
        gain = psi[:, : self.n_gain].reshape(n, d_u, d_x)
        offset = psi[:, self.n_gain : self.n_gain + d_u]
        tri_raw = psi[:, self.n_gain + d_u :]
        factor = np.zeros((n, d_u, d_u))
        factor[:, self.rows, self.cols] = tri_raw
        factor[:, self.rows[self.diag_pos], self.cols[self.diag_pos]] = _softplus(
            tri_raw[:, self.diag_pos]
        )
        sigma = factor @ np.swapaxes(factor, 1, 2) + SIGMA_EPS * np.eye(d_u)
        return gain, offset, sigma, factor, tri_raw

    def pack_grad(self, d_gain, d_offset, d_sigma, factor, tri_raw):
        """Map (dK, dk, dSigma) back to the flat translator output gradient."""
        n = d_gain.shape[0]
        d_factor = 2.0 * (d_sigma @ factor)
        d_tri = d_factor[:, self.rows, self.cols]
        d_tri[:, self.diag_pos] *= _sigmoid(tri_raw[:, self.diag_pos])
        return np.concatenate(
            [d_gain.reshape(n, -1), d_offset, d_tri], axis=1
        )


class GmrPolicy(BaseEstimator):
    """State-compressing reflex-generating policy.

    Encoder maps the state to latent mean and log-variance, the decoder
    reconstructs the state from the latent code, and the translator maps the
    latent code to reflex parameters. In ``test`` mode the latent code is the
    posterior mean and the action is the reflex mean; ``train`` mode samples
    both.

    All constructor arguments are hyperparameters in the sklearn sense;
    `fit` consumes one or more ReflexDataset and continues training on
    repeated calls unless ``warm_start`` is disabled.
    """

    def __init__(
        self,
        d_x,
        d_u,
        latent_dim=8,
        encoder_hidden=64,
        decoder_hidden=64,
        translator_hidden=128,
        alpha=1e-2,
        beta=2e-4,
        learning_rate=1e-3,
        epochs=400,
        batch_size=20,
        sigma_floor=1e-4,
        mode="test",
        warm_start=True,
        seed=0,
    ):
        self.d_x = d_x
        self.d_u = d_u
        self.latent_dim = latent_dim
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.translator_hidden = translator_hidden
        self.alpha = alpha
        self.beta = beta
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.sigma_floor = sigma_floor
        self.mode = mode
        self.warm_start = warm_start
        self.seed = seed

    # -- construction ------------------------------------------------------

    def initialize(self, rng=None):
        """Build the three networks; called implicitly by the first fit()."""
        if rng is None:
            rng = np.random.default_rng(self.seed)
        self._rng = rng
        self._head = _TranslatorHead(self.d_x, self.d_u)
        enc_dims, enc_act = _mlp_dims(
            self.d_x, self.encoder_hidden, 2 * self.latent_dim
        )
        dec_dims, dec_act = _mlp_dims(self.latent_dim, self.decoder_hidden, self.d_x)
        tr_dims, tr_act = _mlp_dims(
            self.latent_dim, self.translator_hidden, self._head.out_dim
        )
        self.encoder_ = nn.Network(enc_dims, enc_act, rng=rng)
        self.decoder_ = nn.Network(dec_dims, dec_act, rng=rng)
        self.translator_ = nn.Network(tr_dims, tr_act, rng=rng)
        self.adam_encoder_ = nn.Adam(self.encoder_, learning_rate=self.learning_rate)
        self.adam_decoder_ = nn.Adam(self.decoder_, learning_rate=self.learning_rate)
        self.adam_translator_ = nn.Adam(
            self.translator_, learning_rate=self.learning_rate
        )
        self.loss_history_ = []
        return self

    def _check_ready(self):
        if not hasattr(self, "encoder_"):
            raise NotFittedError(
                "policy networks are not initialized; call fit() or initialize()"
            )

    @property
    def logvar_min(self):
        return 2.0 * np.log(self.sigma_floor)

    def networks(self):
        self._check_ready()
        return {
            "encoder": self.encoder_,
            "decoder": self.decoder_,
            "translator": self.translator_,
        }

    def squared_parameter_norm(self):
        return sum(net.squared_parameter_norm() for net in self.networks().values())

    # -- forward paths -----------------------------------------------------

    def encode(self, states):
        """Latent mean and clipped log-variance for a state batch (n, d_x)."""
        self._check_ready()
        out = self.encoder_.forward(states)
        single = out.ndim == 1
        out2 = out[None, :] if single else out
        mu = out2[:, : self.latent_dim]
        raw_lv = out2[:, self.latent_dim :]
        lv = np.clip(raw_lv, self.logvar_min, LOGVAR_MAX)
        if single:
            return mu[0], lv[0]
        return mu, lv

    def _translate_batch(self, z):
        psi = self.translator_.forward(z)
        return self._head.unpack(psi)

    def predict_reflexes(self, states):
        """Reflex parameters at each state, latent set to its mean.

        Returns stacked arrays (K, k, Sigma) of shapes (n, d_u, d_x),
        (n, d_u), (n, d_u, d_u).
        """
        self._check_ready()
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        mu, _ = self.encode(states)
        gain, offset, sigma, _, _ = self._translate_batch(mu)
        return gain, offset, sigma

    def predict_reflex(self, x):
        """MotorReflex at a single state."""
        x = as_float_vector(x, self.d_x, "x")
        gain, offset, sigma = self.predict_reflexes(x[None, :])
        return MotorReflex(K=gain[0], k=offset[0], Sigma=symmetrize(sigma[0]))

    def predict(self, states):
        """Deterministic mean actions: u = K(x) x + k(x) with z = mu_z."""
        states = np.asarray(states, dtype=np.float64)
        single = states.ndim == 1
        batch = states[None, :] if single else states
        gain, offset, _ = self.predict_reflexes(batch)
        actions = np.einsum("nij,nj->ni", gain, batch) + offset
        return actions[0] if single else actions

    def generate(self, x, rng=None):
        """Full policy pass at one state: returns (z, x_recon, reflex, u).

        Honors ``mode``: in train mode the latent code and the action are
        sampled (requires rng), in test mode both are deterministic.
        """
        self._check_ready()
        x = as_float_vector(x, self.d_x, "x")
        mu, lv = self.encode(x)
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(lv)):
            raise FloatingPointError("encoder produced a non-finite output")
        if self.mode == "train":
            if rng is None:
                raise ValueError("train mode requires an rng to sample the latent code")
            z = mu + np.exp(0.5 * lv) * rng.standard_normal(self.latent_dim)
        else:
            z = mu
        x_recon = self.decoder_.forward(z)
        if not np.all(np.isfinite(x_recon)):
            raise FloatingPointError("decoder produced a non-finite output")
        gain, offset, sigma, _, _ = self._translate_batch(z[None, :])
        if not (
            np.all(np.isfinite(gain)) and np.all(np.isfinite(offset))
            and np.all(np.isfinite(sigma))
        ):
            raise FloatingPointError("translator produced a non-finite output")
        reflex = MotorReflex(K=gain[0], k=offset[0], Sigma=symmetrize(sigma[0]))
        if self.mode == "train":
            u = reflex.sample_action(x, rng)
        else:
            u = reflex.mean_action(x)
        return z, x_recon, reflex, u

    def sample_action(self, x, rng):
        """Stochastic action draw (latent and controller noise)."""
        previous = self.mode
        self.mode = "train"
        try:
            _, _, _, u = self.generate(x, rng=rng)
        finally:
            self.mode = previous
        return u

    def induced_local_policy(self, states):
        """Time-indexed linear-Gaussian reference induced by the reflexes
        generated along a state sequence (one reflex per timestep)."""
        gain, offset, sigma = self.predict_reflexes(np.asarray(states))
        reflexes = [
            MotorReflex(K=gain[t], k=offset[t], Sigma=symmetrize(sigma[t]))
            for t in range(gain.shape[0])
        ]
        return LocalPolicy(reflexes=reflexes)

    # -- training ----------------------------------------------------------

    def fit(self, datasets):
        """S-step: mini-batch training on pooled reflex datasets.

        Repeated calls continue from the current weights (warm start), which
        is how the outer loop trains one policy across iterations.
        """
        dataset = _pool(datasets)
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        if dataset.d_x != self.d_x or dataset.d_u != self.d_u:
            raise ValueError("dataset dimensions do not match the policy")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not hasattr(self, "encoder_") or not self.warm_start:
            self.initialize()
        rng = self._rng
        n = len(dataset)
        for _ in range(self.epochs):
            order = rng.permutation(n)
            epoch_terms = np.zeros(4)
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                batch = dataset.subset(idx)
                breakdown, tapes = gmr_loss(
                    self, batch, alpha=self.alpha, beta=self.beta, rng=rng
                )
                self.adam_encoder_.step(self.encoder_, tapes["encoder"])
                self.adam_decoder_.step(self.decoder_, tapes["decoder"])
                self.adam_translator_.step(self.translator_, tapes["translator"])
                epoch_terms += len(idx) * np.array(
                    [breakdown.recon, breakdown.latent_kl,
                     breakdown.reflex_kl, breakdown.l2]
                )
            epoch_terms /= n
            self.loss_history_.append(
                GmrLossBreakdown(
                    recon=epoch_terms[0],
                    latent_kl=epoch_terms[1],
                    reflex_kl=epoch_terms[2],
                    l2=epoch_terms[3],
                    alpha=self.alpha,
                    beta=self.beta,
                )
            )
        return self


def _pool(datasets):
    if isinstance(datasets, ReflexDataset):
        return datasets
    return ReflexDataset.concatenate(list(datasets))


def _batch_precisions(sigma_prev):
    try:
        chol = np.linalg.cholesky(sigma_prev)
    except np.linalg.LinAlgError as exc:
        raise ValueError("a reference covariance in the dataset is singular") from exc
    eye = np.broadcast_to(np.eye(sigma_prev.shape[-1]), sigma_prev.shape)
    inv_chol = np.linalg.solve(chol, eye.copy())
    return symmetrize(np.swapaxes(inv_chol, 1, 2) @ inv_chol)


def gmr_loss(policy, dataset, alpha=None, beta=None, rng=None):
    """Loss and gradients of the reflex-policy objective over a dataset.

    Returns ``(breakdown, tapes)`` with one GradientTape per network. The
    latent code is reparameterized (mu + sigma * eta) so the encoder receives
    gradient from every downstream term.
    """
    policy._check_ready()
    if len(dataset) == 0:
        raise ValueError("cannot evaluate the loss on an empty dataset")
    alpha = policy.alpha if alpha is None else alpha
    beta = policy.beta if beta is None else beta
    if rng is None:
        rng = np.random.default_rng(0)

    states = dataset.states
    n = states.shape[0]
    scale = 1.0 / n
    latent = policy.latent_dim

    enc_out = policy.encoder_.forward(states)
    mu = enc_out[:, :latent]
    raw_lv = enc_out[:, latent:]
    lv = np.clip(raw_lv, policy.logvar_min, LOGVAR_MAX)
    in_band = (raw_lv > policy.logvar_min) & (raw_lv < LOGVAR_MAX)
    sigma_z = np.exp(0.5 * lv)
    eta = rng.standard_normal((n, latent))
    z = mu + sigma_z * eta

    x_recon = policy.decoder_.forward(z)
    psi = policy.translator_.forward(z)
    head = policy._head
    gain, offset, sigma, factor, tri_raw = head.unpack(psi)

    precision = _batch_precisions(dataset.Sigma_prev)
    residual = np.einsum("nij,nj->ni", gain, states) + offset - dataset.u_mean
    weighted = np.einsum("nij,nj->ni", precision, residual)
    mean_term = np.einsum("ni,ni->n", residual, weighted)
    sign, logdet = np.linalg.slogdet(sigma)
    if np.any(sign <= 0):
        raise FloatingPointError("an emitted reflex covariance lost positive definiteness")
    cov_term = np.einsum("nij,nji->n", precision, sigma) - logdet
    recon = np.sum((states - x_recon) ** 2, axis=1)
    latent_kl = 0.5 * np.sum(mu**2 + np.exp(lv) - lv - 1.0, axis=1)
    l2 = policy.squared_parameter_norm()

    breakdown = GmrLossBreakdown(
        recon=float(np.mean(recon)),
        latent_kl=float(np.mean(latent_kl)),
        reflex_kl=float(np.mean(cov_term + mean_term)),
        l2=l2,
        alpha=alpha,
        beta=beta,
    )
    if not np.isfinite(breakdown.total):
        raise FloatingPointError("policy loss is non-finite")

    # backward: decoder branch
    d_recon = scale * 2.0 * (x_recon - states)
    tape_dec, dz_dec = policy.decoder_.backward(d_recon)

    # backward: translator branch
    d_residual = scale * 2.0 * weighted
    d_gain = np.einsum("ni,nj->nij", d_residual, states)
    d_offset = d_residual
    sigma_inv = symmetrize(np.linalg.inv(sigma))
    d_sigma = scale * (precision - sigma_inv)
    d_psi = head.pack_grad(d_gain, d_offset, d_sigma, factor, tri_raw)
    tape_tr, dz_tr = policy.translator_.backward(d_psi)

    # backward: reparameterization into the encoder
    dz = dz_dec + dz_tr
    d_mu = dz + scale * alpha * mu
    d_lv = dz * eta * 0.5 * sigma_z + scale * alpha * 0.5 * (np.exp(lv) - 1.0)
    d_lv = d_lv * in_band
    tape_enc, _ = policy.encoder_.backward(np.concatenate([d_mu, d_lv], axis=1))

    for net, tape in (
        (policy.encoder_, tape_enc),
        (policy.decoder_, tape_dec),
        (policy.translator_, tape_tr),
    ):
        for w, dw in zip(net.weights, tape.d_weights):
            dw += 2.0 * beta * w
        for b, db in zip(net.biases, tape.d_biases):
            db += 2.0 * beta * b

    tapes = {"encoder": tape_enc, "decoder": tape_dec, "translator": tape_tr}
    return breakdown, tapes


class BaselinePolicy(BaseEstimator):
    """Plain state-to-action network with a fixed diagonal exploration
    covariance, trained by precision-weighted regression onto the
    supervision actions."""

    def __init__(
        self,
        d_x,
        d_u,
        hidden=(64, 64),
        exploration_var=1e-2,
        beta=2e-4,
        learning_rate=1e-3,
        epochs=400,
        batch_size=20,
        warm_start=True,
        seed=0,
    ):
        self.d_x = d_x
        self.d_u = d_u
        self.hidden = hidden
        self.exploration_var = exploration_var
        self.beta = beta
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.warm_start = warm_start
        self.seed = seed

    def initialize(self, rng=None):
        if rng is None:
            rng = np.random.default_rng(self.seed)
        self._rng = rng
        dims, activations = _mlp_dims(self.d_x, self.hidden, self.d_u)
        self.net_ = nn.Network(dims, activations, rng=rng)
        self.adam_ = nn.Adam(self.net_, learning_rate=self.learning_rate)
        self.loss_history_ = []
        return self

    def _check_ready(self):
        if not hasattr(self, "net_"):
            raise NotFittedError(
                "policy network is not initialized; call fit() or initialize()"
            )

    @property
    def exploration_cov(self):
        return self.exploration_var * np.eye(self.d_u)

    def predict(self, states):
        self._check_ready()
        return self.net_.forward(np.asarray(states, dtype=np.float64))

    def sample_action(self, x, rng):
        mean = self.predict(x)
        return mean + np.sqrt(self.exploration_var) * rng.standard_normal(self.d_u)

    def jacobian(self, x):
        """d(action mean)/d(state) at one state, row per action component."""
        self._check_ready()
        x = as_float_vector(x, self.d_x, "x")
        self.net_.forward(x)
        rows = []
        for j in range(self.d_u):
            basis = np.zeros(self.d_u)
            basis[j] = 1.0
            _, input_grad = self.net_.backward(basis)
            rows.append(input_grad)
        return np.stack(rows)

    def induced_local_policy(self, states):
        """Per-timestep linearization (Jacobian gain, matching offset,
        exploration covariance) along a state sequence."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        reflexes = []
        for x in states:
            gain = self.jacobian(x)
            offset = self.predict(x) - gain @ x
            reflexes.append(MotorReflex(K=gain, k=offset, Sigma=self.exploration_cov))
        return LocalPolicy(reflexes=reflexes)

    def fit(self, datasets):
        """Precision-weighted regression of action means onto the dataset."""
        dataset = _pool(datasets)
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        if dataset.d_x != self.d_x or dataset.d_u != self.d_u:
            raise ValueError("dataset dimensions do not match the policy")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not hasattr(self, "net_") or not self.warm_start:
            self.initialize()
        rng = self._rng
        n = len(dataset)
        for _ in range(self.epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                batch = dataset.subset(idx)
                loss, tape = baseline_loss(self, batch, beta=self.beta)
                self.adam_.step(self.net_, tape)
                epoch_loss += loss * len(idx)
            self.loss_history_.append(epoch_loss / n)
        return self


def baseline_loss(policy, dataset, beta=None):
    """Precision-weighted action regression loss and its gradient tape."""
    policy._check_ready()
    if len(dataset) == 0:
        raise ValueError("cannot evaluate the loss on an empty dataset")
    beta = policy.beta if beta is None else beta
    states = dataset.states
    n = states.shape[0]
    predictions = policy.net_.forward(states)
    precision = _batch_precisions(dataset.Sigma_prev)
    residual = predictions - dataset.u_mean
    weighted = np.einsum("nij,nj->ni", precision, residual)
    loss = float(np.mean(np.einsum("ni,ni->n", residual, weighted)))
    loss += beta * policy.net_.squared_parameter_norm()
    tape, _ = policy.net_.backward((2.0 / n) * weighted)
    for w, dw in zip(policy.net_.weights, tape.d_weights):
        dw += 2.0 * beta * w
    for b, db in zip(policy.net_.biases, tape.d_biases):
        db += 2.0 * beta * b
    return loss, tape


# -- checkpointing ----------------------------------------------------------

def save_policy(policy, directory):
    """Write a policy checkpoint: a manifest plus one .npz per network."""
    os.makedirs(directory, exist_ok=True)
    if isinstance(policy, GmrPolicy):
        manifest = {
            "kind": "gmr",
            "d_x": policy.d_x,
            "d_u": policy.d_u,
            "latent_dim": policy.latent_dim,
            "alpha": policy.alpha,
            "beta": policy.beta,
            "mode": policy.mode,
            "sigma_floor": policy.sigma_floor,
            "encoder_hidden": list(_as_hidden_tuple(policy.encoder_hidden)),
            "decoder_hidden": list(_as_hidden_tuple(policy.decoder_hidden)),
            "translator_hidden": list(_as_hidden_tuple(policy.translator_hidden)),
        }
        for name, net in policy.networks().items():
            nn.save_network(net, os.path.join(directory, f"{name}.npz"))
    elif isinstance(policy, BaselinePolicy):
        policy._check_ready()
        manifest = {
            "kind": "baseline",
            "d_x": policy.d_x,
            "d_u": policy.d_u,
            "beta": policy.beta,
            "exploration_var": policy.exploration_var,
            "hidden": list(_as_hidden_tuple(policy.hidden)),
        }
        nn.save_network(policy.net_, os.path.join(directory, "net.npz"))
    else:
        raise TypeError(f"cannot checkpoint policy of type {type(policy).__name__}")
    with open(os.path.join(directory, "manifest.json"), "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)


def load_policy(directory):
    with open(os.path.join(directory, "manifest.json")) as handle:
        manifest = json.load(handle)
    if manifest["kind"] == "gmr":
        policy = GmrPolicy(
            d_x=manifest["d_x"],
            d_u=manifest["d_u"],
            latent_dim=manifest["latent_dim"],
            encoder_hidden=tuple(manifest["encoder_hidden"]),
            decoder_hidden=tuple(manifest["decoder_hidden"]),
            translator_hidden=tuple(manifest["translator_hidden"]),
            alpha=manifest["alpha"],
            beta=manifest["beta"],
            sigma_floor=manifest["sigma_floor"],
            mode=manifest["mode"],
        )
        policy.initialize()
        policy.encoder_ = nn.load_network(os.path.join(directory, "encoder.npz"))
        policy.decoder_ = nn.load_network(os.path.join(directory, "decoder.npz"))
        policy.translator_ = nn.load_network(os.path.join(directory, "translator.npz"))
        return policy
    if manifest["kind"] == "baseline":
        policy = BaselinePolicy(
            d_x=manifest["d_x"],
            d_u=manifest["d_u"],
            hidden=tuple(manifest["hidden"]),
            exploration_var=manifest["exploration_var"],
            beta=manifest["beta"],
        )
        policy.initialize()
        policy.net_ = nn.load_network(os.path.join(directory, "net.npz"))
        return policy
    raise ValueError(f"unknown policy kind {manifest['kind']!r}")
