"""Inference-time ensemble transport: Euler integration of the learned ODE.

The adaptive rule bounds every particle's per-step displacement by delta_L,
so the pseudo-time step is delta_L / max_i ||f_i||, clamped to land exactly
on lambda = 1 at the end.  NFE counts velocity-field evaluations (one per
step, vectorized over the ensemble).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import densities, homotopy
from .densities import SENSOR_EXCLUSION_RADIUS, TdoaLikelihood
from .neuralflow import FlowNetwork, forward

__all__ = [
    "TransportConfig",
    "TransportResult",
    "transport",
    "transport_fixed",
    "write_ensemble_csv",
]

ZERO_VELOCITY_EPS = 1e-12


@dataclass
class TransportConfig:
    delta_L: float = 0.5
    n_particles: int = 1500
    max_nfe: int = 10000

    def __post_init__(self):
        if self.delta_L <= 0.0:
            raise ValueError("delta_L must be positive")
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")


@dataclass
class TransportResult:
    ensemble: np.ndarray
    nfe: int
    schedule: np.ndarray
    wall_ms: float
    trace: np.ndarray = None  # (steps + 1, N, d) when recorded


def _velocity(task, net: FlowNetwork, x, lam):
    C = homotopy.build_features(task, x, lam, mode=net.feature_mode)
    f = forward(net, C)
    if not np.all(np.isfinite(f)):
        bad = int(np.flatnonzero(~np.isfinite(f).all(axis=-1))[0])
        raise FloatingPointError(f"non-finite velocity at particle {bad} (lambda={lam:.6f})")
    return f


def _clamp_sensor_proximity(x, previous, task):
    """Push particles that stepped inside a sensor's exclusion radius back out."""
    if not isinstance(task.likelihood, TdoaLikelihood):
        return x
    for sensor in (task.likelihood.sensor_a, task.likelihood.sensor_b):
        delta = x - sensor
        dist = np.linalg.norm(delta, axis=-1)
        close = dist < SENSOR_EXCLUSION_RADIUS
        if np.any(close):
            fallback = previous[close] - sensor
            fb_norm = np.linalg.norm(fallback, axis=-1, keepdims=True)
            unit = np.where(
                dist[close, None] > 0.0,
                delta[close] / np.maximum(dist[close, None], 1e-300),
                fallback / np.maximum(fb_norm, 1e-300),
            )
            x[close] = sensor + SENSOR_EXCLUSION_RADIUS * unit
    return x


def _integrate(task, net, x, next_dlam, max_nfe, record_trace):
    """Shared Euler loop; next_dlam(lam, f) proposes the step size."""
    t0 = time.perf_counter()
    lam = 0.0
    schedule = [0.0]
    trace = [x.copy()] if record_trace else None
    nfe = 0
    while lam < 1.0:
        if nfe >= max_nfe:
            raise RuntimeError(
                f"transport exceeded max_nfe={max_nfe} at lambda={lam:.6f} (stiff field)"
            )
        f = _velocity(task, net, x, lam)
        nfe += 1
        dlam, terminal = next_dlam(lam, f)
        prev = x
        x = x + f * dlam
        x = _clamp_sensor_proximity(x, prev, task)
        lam = 1.0 if terminal else lam + dlam
        schedule.append(lam)
        if record_trace:
            trace.append(x.copy())
    wall_ms = (time.perf_counter() - t0) * 1e3
    return TransportResult(
        ensemble=x, nfe=nfe, schedule=np.asarray(schedule), wall_ms=wall_ms,
        trace=np.asarray(trace) if record_trace else None,
    )


def _initial_ensemble(task, n, seed, initial):
    if initial is not None:
        return np.array(initial, dtype=np.float64)
    return densities.sample(task.prior, n, seed)


def transport(task, net: FlowNetwork, config: TransportConfig, seed, record_trace=False, initial=None) -> TransportResult:
    """Adaptive transport: dlam = delta_L / max_i ||f_i||, terminal step clamped."""
    x = _initial_ensemble(task, config.n_particles, seed, initial)

    def next_dlam(lam, f):
        vmax = float(np.max(np.linalg.norm(f, axis=-1)))
        if vmax < ZERO_VELOCITY_EPS:
            return 1.0 - lam, True
        dlam = config.delta_L / vmax
        if lam + dlam >= 1.0:
            return 1.0 - lam, True
        return dlam, False

    return _integrate(task, net, x, next_dlam, config.max_nfe, record_trace)


def transport_fixed(task, net: FlowNetwork, delta_lambda, n_particles=None, seed=0, record_trace=False, initial=None) -> TransportResult:
    """Fixed-grid transport mirroring the training discretization (L = 1/dlam steps)."""
    steps = round(1.0 / delta_lambda)
    if abs(steps * delta_lambda - 1.0) > 1e-9 or steps < 1:
        raise ValueError("1/delta_lambda must be an integer")
    n = n_particles if n_particles is not None else 1000
    x = _initial_ensemble(task, n, seed, initial)
    remaining = [steps]

    def next_dlam(lam, f):
        remaining[0] -= 1
        if remaining[0] == 0:
            return 1.0 - lam, True
        return delta_lambda, False

    return _integrate(task, net, x, next_dlam, steps + 1, record_trace)


def write_ensemble_csv(path, ensemble) -> None:
    """One particle per row, columns x0..x{d-1}, full-precision decimals."""
    ensemble = np.asarray(ensemble)
    d = ensemble.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(f"x{k}" for k in range(d)) + "\n")
        for row in ensemble:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
