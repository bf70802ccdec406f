"""Isotropic Gaussian mixtures: densities, scores, and their derivatives.

The mixture family here is deliberately narrow (shared isotropic component
variance) because it is closed under Gaussian noising and its score has
closed-form first, second, and third spatial derivatives, all of which the
training losses and grid checks consume. The smoothing-kernel score estimator
reuses the same softmax core with means set to a data batch.

Shapes follow the convention x: (B, d), K mixture components.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from . import duals as fm
from .errors import DegenerateEvaluationError, ShapeMismatchError

# All log kernels below this are treated as a hard underflow: exp() is exactly
# zero in float64 and the posterior weights would be 0/0.
LOG_UNDERFLOW = -700.0


@dataclasses.dataclass(frozen=True)
class GaussianMixture:
    """Equal-covariance isotropic Gaussian mixture.

    Attributes:
        weights: (K,) positive weights summing to 1.
        means: (K, d) component means.
        component_variance: shared isotropic variance (> 0).
    """

    weights: np.ndarray
    means: np.ndarray
    component_variance: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        if w.ndim != 1:
            raise ShapeMismatchError("weights must be one-dimensional")
        if mu.ndim != 2:
            raise ShapeMismatchError("means must have shape (K, d)")
        if mu.shape[0] != w.shape[0]:
            raise ShapeMismatchError(
                f"got {w.shape[0]} weights for {mu.shape[0]} component means"
            )
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if not float(self.component_variance) > 0:
            raise ValueError("component variance must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "component_variance", float(self.component_variance))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


def equilateral_triangle_mixture() -> GaussianMixture:
    """Three equally weighted modes on an equilateral triangle (2-D fixture)."""
    means = np.array([[0.0, 2.3], [-1.99, -1.15], [1.99, -1.15]])
    return GaussianMixture(np.full(3, 1.0 / 3.0), means, 0.625)


def _check_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeMismatchError(f"points must have shape (B, {dim}), got {x.shape}")
    return x


def _stats(gmm: GaussianMixture, x: np.ndarray):
    """Posterior responsibilities and log density pieces at each point.

    Returns:
        omega: (B, K) posterior component responsibilities.
        log_density: (B,) log mixture density.
        m: (B, d) posterior mean of the component center.
    """
    x = _check_points(x, gmm.dim)
    nu2 = gmm.component_variance
    diffs = x[:, None, :] - gmm.means[None, :, :]  # (B, K, d)
    sq = np.einsum("bkd,bkd->bk", diffs, diffs)
    log_kernel = -0.5 * sq / nu2  # (B, K)
    if log_kernel.size and np.max(log_kernel) < LOG_UNDERFLOW:
        raise DegenerateEvaluationError(
            "all mixture kernels underflow (max log kernel "
            f"{np.max(log_kernel):.1f} < {LOG_UNDERFLOW})"
        )
    logw = np.log(gmm.weights)[None, :] + log_kernel
    shift = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - shift)
    z = w.sum(axis=1)
    omega = w / z[:, None]
    d = gmm.dim
    log_density = shift[:, 0] + np.log(z) - 0.5 * d * math.log(2 * math.pi * nu2)
    m = omega @ gmm.means
    return omega, log_density, m


def mixture_log_density(gmm: GaussianMixture, x) -> np.ndarray:
    """Log density of the mixture at (B, d) points."""
    _, logp, _ = _stats(gmm, x)
    return logp


def mixture_density(gmm: GaussianMixture, x) -> np.ndarray:
    """Density of the mixture at (B, d) points."""
    return np.exp(mixture_log_density(gmm, x))


def mixture_score(gmm: GaussianMixture, x) -> np.ndarray:
    """Score (gradient of log density) at (B, d) points: (m(x) - x) / nu^2."""
    x = _check_points(x, gmm.dim)
    _, _, m = _stats(gmm, x)
    return (m - x) / gmm.component_variance


def _posterior_mean_cov(gmm: GaussianMixture, x):
    """Posterior mean m and centered second moment C = Cov_omega(mu)."""
    x = _check_points(x, gmm.dim)
    omega, _, m = _stats(gmm, x)
    mu = gmm.means
    second = np.einsum("bk,ki,kj->bij", omega, mu, mu)
    cov = second - np.einsum("bi,bj->bij", m, m)
    return omega, m, cov


def mixture_score_jacobian(gmm: GaussianMixture, x) -> np.ndarray:
    """Jacobian of the score: (C(x)/nu^2 - I)/nu^2, shape (B, d, d)."""
    nu2 = gmm.component_variance
    _, _, cov = _posterior_mean_cov(gmm, x)
    eye = np.eye(gmm.dim)
    return (cov / nu2 - eye[None, :, :]) / nu2


def mixture_score_divergence(gmm: GaussianMixture, x) -> np.ndarray:
    """Divergence (Laplacian of log density) at (B, d) points."""
    nu2 = gmm.component_variance
    _, _, cov = _posterior_mean_cov(gmm, x)
    tr = np.trace(cov, axis1=1, axis2=2)
    return (tr / nu2 - gmm.dim) / nu2


def mixture_score_divergence_gradient(gmm: GaussianMixture, x) -> np.ndarray:
    """Gradient of the score divergence (third log-density derivatives).

    grad tr C = [sum_k omega_k ||mu_k||^2 (mu_k - m) - 2 C m] / nu^2,
    and div s = (tr C / nu^2 - d)/nu^2, so the result is that bracket / nu^6.
    """
    nu2 = gmm.component_variance
    omega, m, cov = _posterior_mean_cov(gmm, x)
    mu = gmm.means
    mu_sq = np.einsum("kd,kd->k", mu, mu)  # (K,)
    first = np.einsum("bk,k,kd->bd", omega, mu_sq, mu) - (omega @ mu_sq)[:, None] * m
    second = np.einsum("bij,bj->bi", cov, m)
    return (first - 2.0 * second) / nu2**3


def mixture_log_density_components(gmm: GaussianMixture):
    """Dual-friendly scalar function of a coordinate list (for AD checks)."""
    logw = np.log(gmm.weights)
    nu2 = gmm.component_variance
    d = gmm.dim
    norm = 0.5 * d * math.log(2 * math.pi * nu2)

    def fn(coords):
        terms = []
        for k in range(gmm.n_components):
            sq = None
            for j in range(d):
                delta = coords[j] - gmm.means[k, j]
                contrib = delta * delta
                sq = contrib if sq is None else sq + contrib
            terms.append(logw[k] - 0.5 * sq / nu2)
        return fm.logsumexp(terms) - norm

    return fn


def sample_mixture(gmm: GaussianMixture, n: int, rng: np.random.Generator,
                   return_components: bool = False):
    """Draw n samples; components then Gaussian offsets, in that fixed order."""
    if n < 0:
        raise ValueError("sample count must be nonnegative")
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    noise = rng.standard_normal((n, gmm.dim))
    x = gmm.means[comp] + math.sqrt(gmm.component_variance) * noise
    if return_components:
        return x, comp
    return x


def noised_mixture(gmm: GaussianMixture, sigma: float) -> GaussianMixture:
    """Mixture convolved with N(0, sigma^2 I): same means, inflated variance."""
    if sigma < 0:
        raise ValueError("noise level must be nonnegative")
    return GaussianMixture(gmm.weights, gmm.means, gmm.component_variance + sigma**2)


def mixture_to_dict(gmm: GaussianMixture) -> dict:
    return {
        "weights": gmm.weights.tolist(),
        "means": gmm.means.tolist(),
        "component_variance": gmm.component_variance,
    }


def mixture_from_dict(payload: dict) -> GaussianMixture:
    return GaussianMixture(
        np.asarray(payload["weights"], dtype=float),
        np.asarray(payload["means"], dtype=float),
        float(payload["component_variance"]),
    )


def save_mixture(gmm: GaussianMixture, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mixture_to_dict(gmm), fh, indent=1)


def load_mixture(path) -> GaussianMixture:
    with open(path, "r", encoding="utf-8") as fh:
        return mixture_from_dict(json.load(fh))
