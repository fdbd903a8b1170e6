"""Reference samplers: SVGD and an annealed Langevin-proposal MCMC chain.

SVGD follows the kernelized update
    phi(x_i) = mean_j [ k(x_j, x_i) s(x_j) + grad_{x_j} k(x_j, x_i) ]
with an RBF kernel, the m^2/log N median-heuristic bandwidth recomputed
every iteration, and an Adagrad-style per-coordinate step.

The annealed chain tempers p_beta ~ h^beta g over a linear beta schedule
and runs a few MALA iterations per stage; every particle is an independent
chain, vectorized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._rng import derive_rng
from .densities import SENSOR_EXCLUSION_RADIUS, TdoaLikelihood, eval_bundle

__all__ = [
    "SvgdConfig",
    "AnnealConfig",
    "AcceptanceWarning",
    "svgd",
    "annealed_mcmc",
    "run_mala",
]


class AcceptanceWarning(UserWarning):
    """A tempering stage mixed poorly (acceptance below the configured floor)."""


@dataclass
class SvgdConfig:
    n_particles: int = 1500
    iterations: int = 500
    learning_rate: float = 0.2
    bandwidth_floor: float = 1e-8
    adagrad_eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class AnnealConfig:
    n_particles: int = 1500
    beta_steps: int = 10
    inner_iterations: int = 5
    step_size: float = 0.1
    acceptance_warn_below: float = 0.01


def _posterior_score(task, x):
    _, sg, _ = eval_bundle(task.prior, x)
    _, sh, _ = eval_bundle(task.likelihood, x)
    return sg + sh


def median_bandwidth(x, floor=1e-8) -> float:
    """m^2 / log N with m the median pairwise distance (natural log)."""
    n = x.shape[0]
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    iu = np.triu_indices(n, k=1)
    m = float(np.median(np.sqrt(d2[iu])))
    return max(m * m / np.log(n), floor)


def svgd_direction(x, scores, bandwidth):
    """Kernel-averaged score plus repulsion, one row per particle."""
    n = x.shape[0]
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    K = np.exp(-d2 / bandwidth)
    # sum_j grad_{x_j} k(x_j, x_i) = (2/h) (x_i sum_j K_ij - sum_j K_ij x_j)
    repulse = (2.0 / bandwidth) * (x * K.sum(axis=1, keepdims=True) - K @ x)
    return (K @ scores + repulse) / n


def svgd(task, config: SvgdConfig, seed) -> np.ndarray:
    """Evolve prior samples toward the posterior; returns the final (N, d) set."""
    from .densities import sample

    x = sample(task.prior, config.n_particles, seed)
    accum = np.zeros_like(x)
    for _ in range(config.iterations):
        scores = _posterior_score(task, x)
        if x.shape[0] == 1:
            phi = scores  # kernel term is k(x,x) s(x) = s(x); repulsion vanishes
        else:
            h = median_bandwidth(x, config.bandwidth_floor)
            phi = svgd_direction(x, scores, h)
        accum += phi * phi
        x = x + config.learning_rate * phi / (np.sqrt(accum) + config.adagrad_eps)
    return x


# ---------------------------------------------------------------------------
# annealed MALA
# ---------------------------------------------------------------------------


def _masked_tempered_eval(task, x, beta):
    """(log p_beta, score) with TDOA sensor-proximal rows marked invalid."""
    invalid = None
    safe_x = x
    if isinstance(task.likelihood, TdoaLikelihood):
        da = np.linalg.norm(x - task.likelihood.sensor_a, axis=-1)
        db = np.linalg.norm(x - task.likelihood.sensor_b, axis=-1)
        invalid = (da < SENSOR_EXCLUSION_RADIUS) | (db < SENSOR_EXCLUSION_RADIUS)
        if np.any(invalid):
            safe_x = x.copy()
            safe_x[invalid] = task.likelihood.sensor_a + np.array([1.0, 1.0])
    lg, sg, _ = eval_bundle(task.prior, safe_x)
    lh, sh, _ = eval_bundle(task.likelihood, safe_x)
    logp = lg + beta * lh
    score = sg + beta * sh
    if invalid is not None and np.any(invalid):
        logp = np.where(invalid, -np.inf, logp)
    return logp, score


def run_mala(x, logp_and_score, step_size, iterations, rng):
    """Vectorized MALA chains; returns (states, mean acceptance rate).

    Proposal x' = x + (s^2/2) grad log p(x) + s xi with the asymmetric
    Metropolis correction.
    """
    s = step_size
    half = 0.5 * s * s
    logp, score = logp_and_score(x)
    accepted = 0
    total = 0
    for _ in range(iterations):
        noise = rng.standard_normal(x.shape)
        prop = x + half * score + s * noise
        logp_p, score_p = logp_and_score(prop)
        fwd = prop - x - half * score
        back = x - prop - half * score_p
        log_q_fwd = -np.sum(fwd * fwd, axis=-1) / (2.0 * s * s)
        log_q_back = -np.sum(back * back, axis=-1) / (2.0 * s * s)
        with np.errstate(invalid="ignore"):
            log_alpha = logp_p - logp + log_q_back - log_q_fwd
        u = rng.random(x.shape[0])
        accept = np.log(u) < np.nan_to_num(log_alpha, nan=-np.inf)
        x = np.where(accept[:, None], prop, x)
        logp = np.where(accept, logp_p, logp)
        score = np.where(accept[:, None], score_p, score)
        accepted += int(accept.sum())
        total += accept.size
    return x, accepted / max(total, 1)


def annealed_mcmc(task, config: AnnealConfig, seed) -> np.ndarray:
    """Anneal prior samples through p_beta ~ h^beta g to the posterior."""
    from .densities import sample

    x = sample(task.prior, config.n_particles, seed)
    rng = derive_rng(seed, "anneal")
    betas = np.linspace(0.0, 1.0, config.beta_steps + 1)[1:]
    for stage, beta in enumerate(betas):
        x, rate = run_mala(
            x,
            lambda pts: _masked_tempered_eval(task, pts, beta),
            config.step_size,
            config.inner_iterations,
            rng,
        )
        if rate < config.acceptance_warn_below:
            warnings.warn(
                f"beta stage {stage} ({beta:.2f}) acceptance {rate:.4f}; "
                "step size likely mismatched",
                AcceptanceWarning,
                stacklevel=2,
            )
    return x
