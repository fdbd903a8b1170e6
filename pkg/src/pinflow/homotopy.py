"""Physics core of the flow: feature construction, the master-PDE residual,
per-step losses and the one-dimensional analytic solution.

The governing balance for a deterministic homotopy flow is

    -div f - f . grad log p_lam  =  log h - E[log h],

with p_lam the unnormalized potential g * h^lam.  The residual is the
difference of the two sides evaluated per particle, with the expectation
estimated by the batch mean over the current ensemble (optionally overridden
by an externally computed value for quadrature checks).

The divergence of the network field differentiates through every
state-dependent feature (log h and both scores), so the feature tangents
carry the Hessian columns of the potential and the likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import densities, neuralflow
from .densities import DiagGaussian, GaussianMixture, eval_bundle, gauss_eval, gmm_eval, tdoa_eval
from .neuralflow import FlowNetwork

__all__ = [
    "feature_width",
    "build_features",
    "residual",
    "step_loss",
    "mass_conservation_check",
    "oracle_flow_1d",
    "Oracle1DField",
    "StepParts",
    "TaskStack",
]


def feature_width(d: int, n_z: int, mode: str = "full") -> int:
    if mode == "full":
        return 3 * d + n_z + 2
    if mode == "no_gradients":
        return d + n_z + 2
    raise ValueError(f"unknown feature mode {mode!r}")


# ---------------------------------------------------------------------------
# per-step evaluation parts
# ---------------------------------------------------------------------------


@dataclass
class StepParts:
    """Density evaluations shared by features, tangents and the residual.

    Arrays carry matching leading dims: (N,) per task or (B, N) batched.
    Hessians are None when only forward features are needed.
    """

    x: np.ndarray
    lam: float
    z: np.ndarray        # broadcastable to leading dims + (n_z,)
    logh: np.ndarray
    s_p: np.ndarray      # score of the potential: s_g + lam * s_h
    s_h: np.ndarray
    H_p: np.ndarray = None
    H_h: np.ndarray = None


def step_parts(task, x, lam, need_hess=True) -> StepParts:
    """Evaluate prior and likelihood bundles for one task at pseudo-time lam."""
    x = np.asarray(x)
    _, s_g, H_g = eval_bundle(task.prior, x, need_hess)
    logh, s_h, H_h = eval_bundle(task.likelihood, x, need_hess)
    H_p = H_g + lam * H_h if need_hess else None
    return StepParts(
        x=x, lam=float(lam), z=np.asarray(task.z, dtype=x.dtype),
        logh=logh, s_p=s_g + lam * s_h, s_h=s_h, H_p=H_p, H_h=H_h,
    )


def assemble_features(parts: StepParts, mode: str = "full") -> np.ndarray:
    """Feature rows ordered as [x, lam, z, log h, grad log p_lam, grad log h]."""
    x = parts.x
    d = x.shape[-1]
    lead = parts.logh.shape
    z = np.broadcast_to(parts.z, lead + (parts.z.shape[-1],))
    n_z = z.shape[-1]
    width = feature_width(d, n_z, mode)
    C = np.empty(lead + (width,), dtype=x.dtype)
    C[..., :d] = x
    C[..., d] = parts.lam
    C[..., d + 1 : d + 1 + n_z] = z
    C[..., d + 1 + n_z] = parts.logh
    if mode == "full":
        C[..., d + 2 + n_z : 2 * d + 2 + n_z] = parts.s_p
        C[..., 2 * d + 2 + n_z :] = parts.s_h
    return C


def assemble_tangents(parts: StepParts, mode: str = "full") -> np.ndarray:
    """d/dx_j of the feature map, one tangent row per state coordinate j."""
    if parts.H_h is None and mode == "full":
        raise ValueError("tangents in full mode need Hessian parts")
    x = parts.x
    d = x.shape[-1]
    lead = parts.logh.shape
    n_z = parts.z.shape[-1]
    width = feature_width(d, n_z, mode)
    T = np.zeros(lead + (d, width), dtype=x.dtype)
    idx = np.arange(d)
    T[..., idx, idx] = 1.0
    T[..., :, d + 1 + n_z] = parts.s_h
    if mode == "full":
        T[..., :, d + 2 + n_z : 2 * d + 2 + n_z] = parts.H_p
        T[..., :, 2 * d + 2 + n_z :] = parts.H_h
    return T


def build_features(task, ensemble, lam, mode: str = "full") -> np.ndarray:
    """Network input rows for an ensemble; width 3d + n_z + 2 in full mode."""
    parts = step_parts(task, ensemble, lam, need_hess=(mode == "full"))
    return assemble_features(parts, mode)


# ---------------------------------------------------------------------------
# residual and losses
# ---------------------------------------------------------------------------


def _net_flow_terms(net, parts, mode, weights=None, biases=None, want_tape=False):
    """Velocity, divergence (and optionally the autodiff tape) on flat rows."""
    C = assemble_features(parts, mode)
    T = assemble_tangents(parts, mode)
    lead = parts.logh.shape
    d = parts.x.shape[-1]
    Cf = C.reshape(-1, C.shape[-1])
    Tf = T.reshape(-1, d, T.shape[-1])
    tape = neuralflow.forward_tape(net, Cf, Tf, weights=weights, biases=biases)
    f = tape.out.reshape(lead + (d,))
    jvp = tape.jvp  # (rows, d, d): tangent j -> output component i
    div = np.einsum("rjj->r", jvp).reshape(lead)
    if want_tape:
        return f, div, tape
    return f, div


def _driving_term(logh, driving_mean=None):
    if driving_mean is None:
        return logh - logh.mean(axis=-1, keepdims=True)
    return logh - driving_mean


def residual(task, field, ensemble, lam, driving_mean=None):
    """Per-particle master-PDE residual R for a network or analytic field.

    driving_mean overrides the batch-mean estimate of E[log h] (used by
    quadrature-based oracle checks); default is the self-normalized batch
    mean, which centers the driving term exactly.
    """
    ensemble = np.asarray(ensemble)
    is_net = isinstance(field, FlowNetwork)
    parts = step_parts(task, ensemble, lam, need_hess=is_net and field.feature_mode == "full")
    if not np.all(np.isfinite(parts.logh)):
        bad = int(np.flatnonzero(~np.isfinite(np.atleast_1d(parts.logh)))[0])
        raise FloatingPointError(f"non-finite log-likelihood at particle {bad}")
    if is_net:
        f, div = _net_flow_terms(field, parts, field.feature_mode)
    else:
        f, div = field.velocity_and_divergence(ensemble, lam)
    R = _driving_term(parts.logh, driving_mean) + div + np.sum(f * parts.s_p, axis=-1)
    if not np.all(np.isfinite(R)):
        bad = int(np.flatnonzero(~np.isfinite(np.atleast_1d(R)))[0])
        raise FloatingPointError(f"non-finite residual at particle {bad}")
    return R


def step_loss(task, field, ensemble, lam) -> float:
    """Mean squared residual over the ensemble at one pseudo-time."""
    R = residual(task, field, ensemble, lam)
    return float(np.mean(R * R))


def mass_conservation_check(task, field, ensemble, lam) -> float:
    """Monte Carlo estimate of the global conservation integral.

    Particle mean of driving plus transport terms; the driving part centers
    to exactly zero, so this reduces to the mean residual and tends to zero
    for a field that satisfies the master PDE.
    """
    return float(np.mean(residual(task, field, ensemble, lam)))


# ---------------------------------------------------------------------------
# batched training path
# ---------------------------------------------------------------------------


@dataclass
class TaskStack:
    """Stacked parameters of homogeneous tasks for vectorized evaluation.

    Trainable families have a diagonal-Gaussian prior and either a mixture
    or a range-difference likelihood; arrays are shaped for broadcasting
    against particle blocks (B, N, d).
    """

    prior_mean: np.ndarray   # (T, 1, d)
    prior_var: np.ndarray    # (T, 1, d)
    z: np.ndarray            # (T, n_z)
    kind: str                # "gmm" | "tdoa"
    lik_logw: np.ndarray = None    # (T, 1, K)
    lik_means: np.ndarray = None   # (T, 1, K, d)
    lik_vars: np.ndarray = None    # (T, 1, K, d)
    sensor_a: np.ndarray = None    # (2,)
    sensor_b: np.ndarray = None
    sigma: np.ndarray = None       # (T, 1)
    meas: np.ndarray = None        # (T, 1)
    task_ids: tuple = ()

    @property
    def dim(self) -> int:
        return self.prior_mean.shape[-1]

    @property
    def n_z(self) -> int:
        return self.z.shape[-1]

    @classmethod
    def from_tasks(cls, tasks, dtype=np.float64):
        priors = [t.prior for t in tasks]
        if not all(isinstance(p, DiagGaussian) for p in priors):
            raise TypeError("batched training requires diagonal-Gaussian priors")
        mean = np.stack([p.mean for p in priors]).astype(dtype)[:, None, :]
        var = np.stack([p.variances for p in priors]).astype(dtype)[:, None, :]
        z = np.stack([np.asarray(t.z, dtype=dtype) for t in tasks])
        ids = tuple(t.id for t in tasks)
        first = tasks[0].likelihood
        if isinstance(first, GaussianMixture):
            with np.errstate(divide="ignore"):
                logw = np.stack([np.log(t.likelihood.weights) for t in tasks]).astype(dtype)
            means = np.stack([t.likelihood.component_means for t in tasks]).astype(dtype)
            varis = np.stack([t.likelihood.component_variances for t in tasks]).astype(dtype)
            return cls(
                prior_mean=mean, prior_var=var, z=z, kind="gmm",
                lik_logw=logw[:, None, :], lik_means=means[:, None, :, :],
                lik_vars=varis[:, None, :, :], task_ids=ids,
            )
        sa = first.sensor_a
        sb = first.sensor_b
        sigma = np.array([t.likelihood.noise_std for t in tasks], dtype=dtype)[:, None]
        meas = np.array([t.likelihood.measurement for t in tasks], dtype=dtype)[:, None]
        return cls(
            prior_mean=mean, prior_var=var, z=z, kind="tdoa",
            sensor_a=sa.astype(dtype), sensor_b=sb.astype(dtype),
            sigma=sigma, meas=meas, task_ids=ids,
        )

    def select(self, idx):
        sub = {"prior_mean": self.prior_mean[idx], "prior_var": self.prior_var[idx],
               "z": self.z[idx], "kind": self.kind,
               "task_ids": tuple(self.task_ids[i] for i in idx)}
        if self.kind == "gmm":
            sub.update(lik_logw=self.lik_logw[idx], lik_means=self.lik_means[idx],
                       lik_vars=self.lik_vars[idx])
        else:
            sub.update(sensor_a=self.sensor_a, sensor_b=self.sensor_b,
                       sigma=self.sigma[idx], meas=self.meas[idx])
        return TaskStack(**sub)


def stacked_step_parts(stack: TaskStack, x, lam, need_hess=True) -> StepParts:
    """StepParts over a (B, N, d) particle block for a TaskStack."""
    _, s_g, H_g = gauss_eval(x, stack.prior_mean, stack.prior_var, need_hess)
    if stack.kind == "gmm":
        logh, s_h, H_h = gmm_eval(x, stack.lik_logw, stack.lik_means, stack.lik_vars, need_hess)
    else:
        logh, s_h, H_h = tdoa_eval(
            x, stack.sensor_a, stack.sensor_b, stack.sigma, stack.meas, need_hess
        )
    H_p = H_g + lam * H_h if need_hess else None
    return StepParts(
        x=x, lam=float(lam), z=stack.z[:, None, :],
        logh=logh, s_p=s_g + lam * s_h, s_h=s_h, H_p=H_p, H_h=H_h,
    )


def batched_step_loss_and_grads(net, parts: StepParts, mode, weights=None, biases=None):
    """Loss (mean over tasks and particles of R^2), parameter grads, velocity.

    The gradient flows through the velocity, the divergence (via the JVP
    cotangents) and nothing else: driving term and potential score are
    network-independent, and particle states are detached between steps.
    """
    f, div, tape = _net_flow_terms(net, parts, mode, weights, biases, want_tape=True)
    logh = parts.logh
    if not np.all(np.isfinite(logh)):
        flat_bad = int(np.flatnonzero(~np.isfinite(logh))[0])
        raise FloatingPointError(f"non-finite log-likelihood at flat particle index {flat_bad}")
    R = _driving_term(logh) + div + np.sum(f * parts.s_p, axis=-1)
    if not np.all(np.isfinite(R)):
        flat_bad = int(np.flatnonzero(~np.isfinite(R))[0])
        raise FloatingPointError(f"non-finite residual at flat particle index {flat_bad}")
    n_rows = R.size
    loss = float(np.sum(R.astype(np.float64) ** 2)) / n_rows
    dR = (2.0 / n_rows) * R
    d = parts.x.shape[-1]
    d_out = (dR[..., None] * parts.s_p).reshape(-1, d)
    d_jvp = np.zeros((n_rows, d, d), dtype=d_out.dtype)
    idx = np.arange(d)
    d_jvp[:, idx, idx] = dR.reshape(-1, 1)
    grads = neuralflow.backprop(net, tape, d_out, d_jvp, weights=weights)
    return loss, grads, f


# ---------------------------------------------------------------------------
# one-dimensional analytic flow
# ---------------------------------------------------------------------------


def _as_1d_gaussian(model):
    if isinstance(model, GaussianMixture) and len(model.components) == 1:
        model = model.components[0]
    if not isinstance(model, DiagGaussian) or model.dim != 1:
        raise TypeError("the analytic flow needs 1-D Gaussian prior and likelihood")
    return float(model.mean[0]), float(model.variances[0])


def _intermediate_1d(prior, likelihood, lam):
    mu_g, v_g = _as_1d_gaussian(prior)
    mu_h, v_h = _as_1d_gaussian(likelihood)
    tau_g, tau_h = 1.0 / v_g, 1.0 / v_h
    tau = tau_g + lam * tau_h
    mu = (tau_g * mu_g + lam * tau_h * mu_h) / tau
    return mu, tau, mu_h, tau_h


def oracle_flow_1d(prior, likelihood, x, lam):
    """Unique 1-D flow velocity -(1/p_lam) dF_lam/dlam for Gaussian models.

    The intermediate density stays Gaussian with precision tau_g + lam tau_h;
    differentiating its cdf in lam gives
        f(x) = mu' + (x - mu) v'/(2 v).
    """
    mu, tau, mu_h, tau_h = _intermediate_1d(prior, likelihood, lam)
    x = np.asarray(x, dtype=np.float64)
    return tau_h * (mu_h - mu) / tau - (x - mu) * tau_h / (2.0 * tau)


class Oracle1DField:
    """Analytic 1-D velocity field exposing the interface residual() expects."""

    def __init__(self, prior, likelihood):
        _as_1d_gaussian(prior)
        _as_1d_gaussian(likelihood)
        self.prior = prior
        self.likelihood = likelihood

    def velocity(self, x, lam):
        x = np.asarray(x, dtype=np.float64)
        return oracle_flow_1d(self.prior, self.likelihood, x[..., 0], lam)[..., None]

    def velocity_and_divergence(self, x, lam):
        f = self.velocity(x, lam)
        _, tau, _, tau_h = _intermediate_1d(self.prior, self.likelihood, lam)
        div = np.full(f.shape[:-1], -tau_h / (2.0 * tau))
        return f, div

    def expected_log_h(self, lam):
        """Exact E_{p_lam}[log h]; log h is quadratic, so this is closed form."""
        mu, tau, mu_h, tau_h = _intermediate_1d(self.prior, self.likelihood, lam)
        v = 1.0 / tau
        return -0.5 * tau_h * (v + (mu - mu_h) ** 2) - 0.5 * np.log(2.0 * np.pi / tau_h)
