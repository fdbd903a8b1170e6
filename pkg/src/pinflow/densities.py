"""Analytic probability models: priors, likelihoods and the homotopy potential.

Every model exposes the unnormalized log-density, its gradient (score) and
Hessian-vector products, evaluated in closed form.  The homotopy potential
log g(x) + lambda * log h(x) is kept unnormalized throughout: the flow
equations only ever need the potential, never the normalizer.

Shapes: a state is a length-d vector; batched evaluation accepts arrays of
shape (..., d) and returns matching leading dimensions.  All math is f64
unless the caller passes f32 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import derive_rng

__all__ = [
    "DiagGaussian",
    "GaussianMixture",
    "TdoaLikelihood",
    "HomotopyPotential",
    "GridSpec",
    "CoverageWarning",
    "log_density",
    "score",
    "dual_eval",
    "sample",
    "conjugate_posterior",
    "mixture_product_posterior",
    "grid_posterior_sample",
    "range_difference",
]

LOG_2PI = float(np.log(2.0 * np.pi))

# evaluation closer than this to a TDOA sensor is treated as singular
SENSOR_EXCLUSION_RADIUS = 1e-6


class CoverageWarning(UserWarning):
    """The sampling grid misses a non-negligible share of posterior mass."""


# ---------------------------------------------------------------------------
# model types
# ---------------------------------------------------------------------------


@dataclass
class DiagGaussian:
    """Gaussian with diagonal covariance, given as per-axis variances."""

    mean: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.variances = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if self.mean.ndim != 1 or self.mean.shape != self.variances.shape:
            raise ValueError("mean and variances must be 1-D arrays of equal length")
        if not np.all(self.variances > 0.0):
            raise ValueError("all variances must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class GaussianMixture:
    """Finite mixture of diagonal Gaussians sharing one state dimension."""

    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.components = tuple(self.components)
        if len(self.components) != self.weights.shape[0]:
            raise ValueError("one weight per component required")
        if np.any(self.weights < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError("all components must share one dimension")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def component_means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def component_variances(self) -> np.ndarray:
        return np.stack([c.variances for c in self.components])


@dataclass
class TdoaLikelihood:
    """Gaussian likelihood of a range-difference measurement from two sensors."""

    sensor_a: np.ndarray
    sensor_b: np.ndarray
    noise_std: float
    measurement: float

    def __post_init__(self):
        self.sensor_a = np.asarray(self.sensor_a, dtype=np.float64).reshape(2)
        self.sensor_b = np.asarray(self.sensor_b, dtype=np.float64).reshape(2)
        self.noise_std = float(self.noise_std)
        self.measurement = float(self.measurement)
        if self.noise_std <= 0.0:
            raise ValueError("noise_std must be positive")
        if np.array_equal(self.sensor_a, self.sensor_b):
            raise ValueError("sensors must be at distinct positions")

    @property
    def dim(self) -> int:
        return 2


@dataclass
class HomotopyPotential:
    """Unnormalized log-density log g(x) + lambda * log h(x)."""

    prior: object
    likelihood: object
    lam: float = field(default=0.0)

    def __post_init__(self):
        self.lam = float(self.lam)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return self.prior.dim


# ---------------------------------------------------------------------------
# vectorized closed-form kernels (shared by public ops and the batched trainer)
# ---------------------------------------------------------------------------


def gauss_eval(x, mean, var, need_hess=False):
    """log N(x; mean, diag(var)) with score and optional full Hessian."""
    diff = x - mean
    inv = 1.0 / var
    logp = -0.5 * np.sum(diff * diff * inv + np.log(2.0 * np.pi * var), axis=-1)
    sc = -diff * inv
    if not need_hess:
        return logp, sc, None
    d = x.shape[-1]
    hess = np.zeros(x.shape + (d,), dtype=x.dtype)
    idx = np.arange(d)
    hess[..., idx, idx] = -np.broadcast_to(inv, x.shape)
    return logp, sc, hess


def gmm_eval(x, log_w, means, var, need_hess=False):
    """Mixture log-density, score and optional Hessian.

    means/var carry a component axis one slot before the state axis, i.e.
    x is (..., d) while means/var broadcast against (..., K, d) and log_w
    against (..., K).
    """
    xe = x[..., None, :]
    diff = xe - means
    inv = 1.0 / var
    comp = log_w - 0.5 * np.sum(diff * diff * inv + np.log(2.0 * np.pi * var), axis=-1)
    m = np.max(comp, axis=-1, keepdims=True)
    logp = np.squeeze(m, -1) + np.log(np.sum(np.exp(comp - m), axis=-1))
    resp = np.exp(comp - logp[..., None])
    sk = -diff * inv
    sc = np.sum(resp[..., None] * sk, axis=-2)
    if not need_hess:
        return logp, sc, None
    # Hessian of log p: sum_k r_k (H_k + s_k s_k^T) - s s^T with H_k diagonal
    d = x.shape[-1]
    hess = np.einsum("...k,...ki,...kj->...ij", resp, sk, sk)
    hess -= sc[..., :, None] * sc[..., None, :]
    dsum = np.sum(resp[..., None] * np.broadcast_to(inv, diff.shape), axis=-2)
    idx = np.arange(d)
    hess[..., idx, idx] -= dsum
    return logp, sc, hess


def range_difference(x, sensor_a, sensor_b):
    """Raw measurement map: distance to sensor A minus distance to sensor B."""
    da = np.linalg.norm(x - sensor_a, axis=-1)
    db = np.linalg.norm(x - sensor_b, axis=-1)
    return da - db


def tdoa_eval(x, sensor_a, sensor_b, noise_std, measurement, need_hess=False):
    """Range-difference Gaussian likelihood: log-density, score, Hessian."""
    ra = x - sensor_a
    rb = x - sensor_b
    da = np.linalg.norm(ra, axis=-1)
    db = np.linalg.norm(rb, axis=-1)
    if np.any(da < SENSOR_EXCLUSION_RADIUS) or np.any(db < SENSOR_EXCLUSION_RADIUS):
        raise ValueError("state within exclusion radius of a sensor: score is singular")
    ua = ra / da[..., None]
    ub = rb / db[..., None]
    var = np.asarray(noise_std, dtype=np.float64) ** 2
    resid = measurement - (da - db)
    logp = -0.5 * resid * resid / var - 0.5 * np.log(2.0 * np.pi * var)
    dm = ua - ub
    sc = (resid / var)[..., None] * dm
    if not need_hess:
        return logp, sc, None
    d = x.shape[-1]
    eye = np.eye(d, dtype=x.dtype)
    proj_a = (eye - ua[..., :, None] * ua[..., None, :]) / da[..., None, None]
    proj_b = (eye - ub[..., :, None] * ub[..., None, :]) / db[..., None, None]
    hess = -np.asarray(1.0 / var)[..., None, None] * dm[..., :, None] * dm[..., None, :]
    hess += (resid / var)[..., None, None] * (proj_a - proj_b)
    return logp, sc, hess


def eval_bundle(model, x, need_hess=False):
    """Dispatch to the closed-form kernel for any model type.

    Returns (log_density, score, hessian-or-None) with x of shape (..., d).
    """
    x = np.asarray(x)
    if x.shape[-1] != model.dim:
        raise ValueError(f"state dimension {x.shape[-1]} does not match model dimension {model.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state input")
    if isinstance(model, DiagGaussian):
        return gauss_eval(x, model.mean, model.variances, need_hess)
    if isinstance(model, GaussianMixture):
        with np.errstate(divide="ignore"):
            log_w = np.log(model.weights)
        return gmm_eval(x, log_w, model.component_means, model.component_variances, need_hess)
    if isinstance(model, TdoaLikelihood):
        return tdoa_eval(x, model.sensor_a, model.sensor_b, model.noise_std, model.measurement, need_hess)
    if isinstance(model, HomotopyPotential):
        lg, sg, hg = eval_bundle(model.prior, x, need_hess)
        lh, sh, hh = eval_bundle(model.likelihood, x, need_hess)
        lam = model.lam
        hess = hg + lam * hh if need_hess else None
        return lg + lam * lh, sg + lam * sh, hess
    raise TypeError(f"unsupported model type {type(model)!r}")


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def log_density(model, x):
    """Log-density at x; unnormalized for HomotopyPotential."""
    logp, _, _ = eval_bundle(model, x)
    return logp


def score(model, x):
    """Gradient of the log-density with respect to the state."""
    _, sc, _ = eval_bundle(model, x)
    return sc


def dual_eval(model, x, direction):
    """Log-density together with the score's directional derivative H @ v."""
    direction = np.asarray(direction, dtype=np.float64)
    logp, _, hess = eval_bundle(model, x, need_hess=True)
    hvp = np.einsum("...ij,...j->...i", hess, np.broadcast_to(direction, np.shape(x)))
    return logp, hvp


def sample(model, n, seed):
    """Draw n i.i.d. states from a prior-capable model; (n, d) array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = derive_rng(seed, "sample")
    return _sample_with_rng(model, n, rng)


def _sample_with_rng(model, n, rng):
    if isinstance(model, DiagGaussian):
        return model.mean + np.sqrt(model.variances) * rng.standard_normal((n, model.dim))
    if isinstance(model, GaussianMixture):
        comp = rng.choice(len(model.components), size=n, p=model.weights)
        noise = rng.standard_normal((n, model.dim))
        means = model.component_means[comp]
        stds = np.sqrt(model.component_variances[comp])
        return means + stds * noise
    raise TypeError(f"cannot sample from likelihood-only model {type(model).__name__}")


def mixture_product_posterior(prior, likelihood):
    """Posterior mixture for (Gaussian or mixture) prior x mixture likelihood.

    Each prior-component/likelihood-component pair multiplies into a Gaussian
    with summed precisions; pair weights pick up the marginal evidence
    N(mu_g; mu_h, S_g + S_h) and are renormalized.
    """
    if isinstance(prior, DiagGaussian):
        prior = GaussianMixture(weights=np.array([1.0]), components=(prior,))
    if prior.dim != likelihood.dim:
        raise ValueError("prior and likelihood dimensions differ")
    comps = []
    log_wts = []
    for wg, g in zip(prior.weights, prior.components):
        for wh, h in zip(likelihood.weights, likelihood.components):
            if wg == 0.0 or wh == 0.0:
                continue
            prec = 1.0 / g.variances + 1.0 / h.variances
            var = 1.0 / prec
            mean = var * (g.mean / g.variances + h.mean / h.variances)
            ev_var = g.variances + h.variances
            log_ev = -0.5 * np.sum((g.mean - h.mean) ** 2 / ev_var + np.log(2.0 * np.pi * ev_var))
            log_wts.append(np.log(wg) + np.log(wh) + log_ev)
            comps.append(DiagGaussian(mean=mean, variances=var))
    log_wts = np.asarray(log_wts)
    log_wts -= np.max(log_wts)
    wts = np.exp(log_wts)
    wts /= wts.sum()
    return GaussianMixture(weights=wts, components=tuple(comps))


def conjugate_posterior(prior: DiagGaussian, likelihood: GaussianMixture) -> GaussianMixture:
    """Analytic posterior for a diagonal-Gaussian prior and mixture likelihood."""
    if not isinstance(prior, DiagGaussian):
        raise TypeError("conjugate_posterior needs a DiagGaussian prior")
    if isinstance(likelihood, DiagGaussian):
        likelihood = GaussianMixture(weights=np.array([1.0]), components=(likelihood,))
    return mixture_product_posterior(prior, likelihood)


@dataclass
class GridSpec:
    """Regular sampling grid: cells x cells spanning mean +/- span_sigmas per axis."""

    cells: int = 512
    span_sigmas: float = 6.0


def _grid_axes(prior: DiagGaussian, spec: GridSpec):
    stds = np.sqrt(prior.variances)
    lo = prior.mean - spec.span_sigmas * stds
    hi = prior.mean + spec.span_sigmas * stds
    return lo, hi


def _grid_log_mass(prior, likelihood, lo, hi, cells):
    """Unnormalized posterior on cell centers -> (log values, cell widths)."""
    edges = [np.linspace(lo[k], hi[k], cells + 1) for k in range(2)]
    centers = [0.5 * (e[:-1] + e[1:]) for e in edges]
    xx, yy = np.meshgrid(centers[0], centers[1], indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=-1)
    lg, _, _ = eval_bundle(prior, pts)
    lh, _, _ = eval_bundle(likelihood, pts)
    widths = np.array([(hi[k] - lo[k]) / cells for k in range(2)])
    return lg + lh, pts, widths


def grid_posterior_sample(prior: DiagGaussian, likelihood: TdoaLikelihood, grid_spec, n, seed):
    """Sample the discretized 2-D posterior: categorical over cells plus jitter.

    Warns through CoverageWarning when a 2x-refined grid finds more than a
    1e-3 relative share of extra unnormalized mass (inadequate resolution).
    """
    import warnings

    if prior.dim != 2:
        raise ValueError("grid sampling is for 2-D states only")
    spec = grid_spec if grid_spec is not None else GridSpec()
    lo, hi = _grid_axes(prior, spec)

    logw, pts, widths = _grid_log_mass(prior, likelihood, lo, hi, spec.cells)
    top = float(np.max(logw))
    w = np.exp(logw - top)
    mass = float(w.sum()) * float(widths.prod())

    logw_ref, _, widths_ref = _grid_log_mass(prior, likelihood, lo, hi, 2 * spec.cells)
    mass_ref = float(np.exp(logw_ref - top).sum()) * float(widths_ref.prod())
    if mass_ref > 0 and mass < (1.0 - 1e-3) * mass_ref:
        warnings.warn(
            f"grid captures {mass / mass_ref:.6f} of the refined-grid mass; "
            "increase cells or span_sigmas",
            CoverageWarning,
            stacklevel=2,
        )

    probs = w / w.sum()
    rng = derive_rng(seed, "grid_sample")
    idx = rng.choice(probs.shape[0], size=n, p=probs)
    jitter = (rng.random((n, 2)) - 0.5) * widths
    return pts[idx] + jitter
