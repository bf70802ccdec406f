"""Training objectives built on the divergence-weighted residual.

The central quantity is the residual r(x) = div u(x) + u(x)·score(x) of a
field u against a reference score. The flux objective couples u at the chain
start to the spatial gradient of r at the chain endpoint; because that
endpoint factor enters as a constant (no parameter dependence is tracked
through it), linear-in-parameter families get exact gradients from a single
cotangent contraction and no reverse-mode engine is needed.

Also here: the plain score-matching loss, Hutchinson-probed divergences,
variance-reduced endpoint combinations, noise-annealed aggregation with a
learnable per-bucket normalizer, the velocity-residual variant with its
flow-matching reference velocity, and the Sinkhorn-based mixing proxy.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from . import duals as fm
from .densities import GaussianMixture
from .errors import (CapabilityError, ConfigError, DegenerateEvaluationError,
                     DegenerateHorizonError, ShapeMismatchError)
from .fields.base import DifferenceField, ScoreField, VectorField
from .kde import batch_mixture
from .simulate import (HorizonSampler, sample_horizon, simulate_horizon,
                       transition_weights)

__all__ = [
    "LossReport", "NoiseNormalizer", "SinkhornResult",
    "stein_residual", "fisher_loss", "endpoint_gradient",
    "variance_reduced_endpoint", "flux_loss", "noise_annealed_flux_loss",
    "v_flux_loss", "flow_matching_marginal_velocity",
    "sinkhorn_divergence", "mixing_proxy_loss", "append_report_csv",
]


# -- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class LossReport:
    """One evaluated objective: value, spread, and where it was measured."""

    value: float
    std_error: float  # sample SD of the terms / sqrt(B); 0 when B = 1
    sample_count: int
    horizon: float  # the sampled t; NaN for objectives without a horizon
    per_sample_terms: np.ndarray | None = None  # (B,) when retained

    @classmethod
    def from_terms(cls, terms, horizon: float,
                   keep_terms: bool = True) -> "LossReport":
        terms = np.asarray(terms, dtype=float).ravel()
        b = terms.size
        se = float(terms.std(ddof=1) / math.sqrt(b)) if b > 1 else 0.0
        return cls(float(terms.mean()), se, b, float(horizon),
                   terms if keep_terms else None)


def append_report_csv(path, step: int, report: LossReport, *,
                      sigma: float | None = None,
                      grad_norm: float = math.nan) -> None:
    """Append one training-log row; writes the header on first use.

    The sigma column records the noise level, or the literal string "data"
    for runs on un-noised data (sigma=None).
    """
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(
                ["step", "sigma", "horizon", "loss", "std_error", "grad_norm"])
        writer.writerow([step,
                         "data" if sigma is None else repr(float(sigma)),
                         repr(report.horizon), repr(report.value),
                         repr(report.std_error), repr(float(grad_norm))])


# -- residual and its endpoint gradient ---------------------------------------


def _score_values(score_at, x) -> np.ndarray:
    if hasattr(score_at, "evaluate"):
        return score_at.evaluate(x)
    return np.asarray(score_at(x), dtype=float)


def _score_jacobian(score_at, x) -> np.ndarray:
    if hasattr(score_at, "jacobian"):
        return score_at.jacobian(x)
    raise CapabilityError(
        "score evaluator must expose a jacobian for endpoint gradients")


def _rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0


def stein_residual(u: VectorField, score_at, x, rng=None, *,
                   exact_divergence: bool = False) -> np.ndarray:
    """Residual r = div u + u·score at each point of x (B, d) -> (B,).

    With a generator (and exact_divergence left False) the divergence term
    is replaced by the single-probe estimate eps^T (du/dx) eps with a
    Rademacher probe eps; the estimate is exact for identity and
    antisymmetric Jacobians. Without a generator the analytic divergence
    is used.
    """
    x = np.asarray(x, dtype=float)
    u_val = u.evaluate(x)
    dot = (u_val * _score_values(score_at, x)).sum(axis=1)
    if rng is not None and not exact_divergence:
        eps = _rademacher(rng, x.shape)
        jac = u.jacobian(x)  # (B, d, d)
        div = np.einsum("bi,bij,bj->b", eps, jac, eps)
    else:
        div = u.divergence(x)
    return div + dot


def fisher_loss(f: VectorField, score_at, samples,
                keep_terms: bool = True) -> LossReport:
    """Mean squared deviation of f from the score over the samples."""
    x = np.asarray(samples, dtype=float)
    diff = f.evaluate(x) - _score_values(score_at, x)
    return LossReport.from_terms((diff**2).sum(axis=1), horizon=math.nan,
                                 keep_terms=keep_terms)


def _probed_quadratic_gradient(u: VectorField, x, eps) -> np.ndarray:
    """Spatial gradient of x -> eps^T (du/dx)(x) eps with eps held fixed.

    Needs nested duals through the field's component form; fields without
    one raise CapabilityError.
    """
    components = u._components
    coords, d = fm._coords(x)
    grads = []
    for k in range(d):
        outer = fm.seed(coords, k)
        probed = [fm.Dual(cj, eps[:, j]) for j, cj in enumerate(outer)]
        outs = components(probed)
        quad = None
        for i in range(d):
            term = fm._tangent(outs[i]) * eps[:, i]
            quad = term if quad is None else quad + term
        grads.append(fm._tangent(quad))
    return np.stack(grads, axis=-1)


def endpoint_gradient(u: VectorField, score_at, x, rng=None) -> np.ndarray:
    """Spatial gradient of the residual, (B, d) points -> (B, d).

    grad r = grad(div u) + (du/dx)^T score + (dscore/dx)^T u. With a
    generator the divergence part is the Rademacher-probed form and the
    probe is held fixed while differentiating (needs nested duals through
    the field's components).
    """
    x = np.asarray(x, dtype=float)
    u_val = u.evaluate(x)
    s_val = _score_values(score_at, x)
    cross = (np.einsum("bij,bi->bj", u.jacobian(x), s_val)
             + np.einsum("bij,bi->bj", _score_jacobian(score_at, x), u_val))
    if rng is not None:
        eps = _rademacher(rng, x.shape)
        div_part = _probed_quadratic_gradient(u, x, eps)
    else:
        div_part = u.divergence_gradient(x)
    return div_part + cross


def variance_reduced_endpoint(batch, u: VectorField, score_at, i: int,
                              rng=None) -> np.ndarray:
    """Row-i weighted combination of endpoint gradients across the batch."""
    grads = endpoint_gradient(u, score_at, batch.xt, rng)  # (B, d)
    return batch.weights[i] @ grads


# -- flux objective ------------------------------------------------------------


def _flux_core(u: VectorField, score_field: VectorField, x0, bandwidth: float,
               q: HorizonSampler, rng: np.random.Generator, steps: int,
               use_vr: bool, keep_terms: bool):
    """Shared body: one horizon draw, one simulated batch, loss + gradient.

    RNG order: horizon, then the chain noise (steps blocks of (B, d)).
    """
    b = x0.shape[0]
    t, q_t = sample_horizon(q, rng)
    if use_vr:
        xt = simulate_horizon(x0, score_field.evaluate, t, bandwidth, rng,
                              steps=steps)
        try:
            w = transition_weights(x0, xt, t, bandwidth, score_field.evaluate)
        except DegenerateHorizonError:
            w = np.eye(b)  # point-mass kernel: each chain keeps its own end
        grads = endpoint_gradient(u, score_field, xt)
        endpoints = w @ grads
    else:
        xt, jac = simulate_horizon(x0, score_field.evaluate, t, bandwidth,
                                   rng, steps=steps,
                                   score_jacobian=score_field.jacobian)
        grads = endpoint_gradient(u, score_field, xt)
        endpoints = np.einsum("bij,bi->bj", jac, grads)
    terms = -(u.evaluate(x0) * endpoints).sum(axis=1) / q_t
    report = LossReport.from_terms(terms, horizon=t, keep_terms=keep_terms)
    cotangents = -endpoints / (b * q_t)  # endpoint factor enters as constant
    try:
        grad = u.param_grad_dot(x0, cotangents)
    except CapabilityError:
        grad = None
    return report, grad


def flux_loss(f: VectorField, data, bandwidth: float, q: HorizonSampler,
              rng: np.random.Generator, *, steps: int = 4,
              use_vr: bool = True, use_exact_score: bool = False,
              exact_mixture: GaussianMixture | None = None,
              keep_terms: bool = True):
    """Flux objective on one minibatch: (LossReport, parameter gradient).

    The reference score is the Gaussian-kernel estimate built from the
    minibatch itself at the given bandwidth, or the exact mixture score
    when use_exact_score is set. The same score drives the chains. With
    use_vr the endpoint gradients are cross-combined with the transition
    weights (falling back to identity weights at degenerate horizons);
    without it each chain uses its own endpoint through the accumulated
    chain Jacobian. The gradient is None for parameterless fields.
    """
    x0 = np.asarray(data, dtype=float)
    if x0.ndim != 2:
        raise ShapeMismatchError("data must have shape (B, d)")
    if use_exact_score:
        if exact_mixture is None:
            raise ConfigError("use_exact_score needs exact_mixture")
        score_field = ScoreField(exact_mixture)
    else:
        score_field = ScoreField(batch_mixture(x0, bandwidth))
    u = DifferenceField(f, score_field)
    return _flux_core(u, score_field, x0, bandwidth, q, rng, steps, use_vr,
                      keep_terms)


# -- noise-annealed aggregation ------------------------------------------------


@dataclass(frozen=True)
class NoiseNormalizer:
    """Learnable per-bucket log scale s(sigma), piecewise constant in log
    sigma. Mutating log_scales in place is the supported update path."""

    bucket_edges: np.ndarray  # (K+1,) increasing log-sigma edges
    log_scales: np.ndarray  # (K,)

    def __post_init__(self):
        object.__setattr__(self, "bucket_edges",
                           np.asarray(self.bucket_edges, dtype=float))
        object.__setattr__(self, "log_scales",
                           np.asarray(self.log_scales, dtype=float))
        if self.bucket_edges.ndim != 1 or self.log_scales.ndim != 1:
            raise ConfigError("edges and scales must be 1-D")
        if self.bucket_edges.size != self.log_scales.size + 1:
            raise ConfigError("need exactly one more edge than bucket")
        if not np.all(np.diff(self.bucket_edges) > 0):
            raise ConfigError("bucket edges must be strictly increasing")

    @classmethod
    def uniform(cls, sigma_min: float, sigma_max: float,
                n_buckets: int = 16, initial: float = 0.0):
        if not 0 < sigma_min < sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        edges = np.linspace(math.log(sigma_min), math.log(sigma_max),
                            n_buckets + 1)
        return cls(edges, np.full(n_buckets, float(initial)))

    @property
    def n_buckets(self) -> int:
        return self.log_scales.size

    def bucket_index(self, sigma: float) -> int:
        ls = math.log(sigma)
        edges = self.bucket_edges
        if ls < edges[0] or ls > edges[-1]:
            raise ConfigError(
                f"sigma {sigma:g} outside the normalizer range "
                f"[{math.exp(edges[0]):g}, {math.exp(edges[-1]):g}]")
        return min(int(np.searchsorted(edges, ls, side="right")) - 1,
                   self.n_buckets - 1)

    def log_scale(self, sigma: float) -> float:
        return float(self.log_scales[self.bucket_index(sigma)])

    def gradient(self, sigma: float, raw_loss: float) -> np.ndarray:
        """d/ds of |loss| e^(-s) + s for sigma's bucket, zero elsewhere.

        The magnitude guards the early-training regime where minibatch
        losses go negative; for positive losses this is 1 - loss/exp(s).
        """
        g = np.zeros(self.n_buckets)
        k = self.bucket_index(sigma)
        g[k] = 1.0 - abs(raw_loss) * math.exp(-self.log_scales[k])
        return g


def noise_annealed_flux_loss(field_for, data, sigma_dist,
                             normalizer: NoiseNormalizer, horizon_for,
                             rng: np.random.Generator, *, steps: int = 4,
                             use_vr: bool = True, keep_terms: bool = True):
    """One annealed draw: (LossReport, field grad, normalizer grad, sigma).

    Draws sigma from sigma_dist(rng), noises the data with it, and runs the
    flux objective at bandwidth sigma under the horizon sampler
    horizon_for(sigma); the per-sample terms are loss*e^(-s) + s in
    sigma's bucket. field_for(sigma) supplies the sigma-conditioned field.
    RNG order: sigma draw (if the sampler consumes the stream), one (B, d)
    noise block, then the flux draw.
    """
    sigma = float(sigma_dist(rng))
    s = normalizer.log_scale(sigma)  # raises ConfigError outside the range
    x0 = np.asarray(data, dtype=float) + sigma * rng.standard_normal(
        np.asarray(data).shape)
    report, grad = flux_loss(field_for(sigma), x0, sigma, horizon_for(sigma),
                             rng, steps=steps, use_vr=use_vr, keep_terms=True)
    scale = math.exp(-s)
    terms = report.per_sample_terms * scale + s
    out = LossReport.from_terms(terms, horizon=report.horizon,
                                keep_terms=keep_terms)
    field_grad = None if grad is None else grad * scale
    return out, field_grad, normalizer.gradient(sigma, report.value), sigma


# -- velocity-residual variant --------------------------------------------------


class FlowMatchingVelocity(VectorField):
    """Marginal interpolation velocity toward a finite endpoint cloud.

    At interpolation time a the conditional path to endpoint x1 is the
    Gaussian N(a x1, (1-a)^2 I); the marginal velocity is the posterior-
    weighted average of the straight-line rates (x1 - x)/(1 - a). With a
    single endpoint the weight is identically one.
    """

    def __init__(self, endpoints, a: float):
        endpoints = np.asarray(endpoints, dtype=float)
        if endpoints.ndim != 2:
            raise ShapeMismatchError("endpoints must have shape (n, d)")
        if not 0.0 <= a < 1.0:
            raise ConfigError("interpolation time must lie in [0, 1)")
        self.endpoints = endpoints
        self.a = float(a)
        self.dim = endpoints.shape[1]

    def _components(self, coords):
        a, gap = self.a, 1.0 - self.a
        logits = []
        for x1 in self.endpoints:
            sq = None
            for j, cj in enumerate(coords):
                d2 = (cj - a * x1[j]) ** 2
                sq = d2 if sq is None else sq + d2
            logits.append(sq * (-0.5 / gap**2))
        lse = fm.logsumexp(logits)
        weights = [fm.exp(t - lse) for t in logits]
        out = []
        for j, cj in enumerate(coords):
            vj = None
            for w, x1 in zip(weights, self.endpoints):
                term = w * ((x1[j] - cj) / gap)
                vj = term if vj is None else vj + term
            out.append(vj)
        return out

    def evaluate(self, x):
        x = self._check(x)
        coords = [x[:, j] for j in range(self.dim)]
        return np.stack(self._components(coords), axis=-1)


def flow_matching_marginal_velocity(endpoints, a: float) -> FlowMatchingVelocity:
    """Reference velocity for the interpolation marginal at time a."""
    return FlowMatchingVelocity(endpoints, a)


def v_flux_loss(f: VectorField, v, data, marginal: GaussianMixture,
                q: HorizonSampler, rng: np.random.Generator, *,
                steps: int = 4, use_vr: bool = True,
                bandwidth: float | None = None, keep_terms: bool = True):
    """Flux objective for the residual u = f - v against a reference
    velocity, with chains driven by the marginal's exact score.

    bandwidth defaults to the marginal's component standard deviation,
    where the exponential integrator is exact per component. Passing
    v = the marginal's own score field reproduces flux_loss with the
    exact-score option bit for bit.
    """
    x0 = np.asarray(data, dtype=float)
    if x0.ndim != 2:
        raise ShapeMismatchError("data must have shape (B, d)")
    if bandwidth is None:
        bandwidth = math.sqrt(marginal.component_variance)
    score_field = ScoreField(marginal)
    u = DifferenceField(f, v)
    return _flux_core(u, score_field, x0, bandwidth, q, rng, steps, use_vr,
                      keep_terms)


# -- Sinkhorn divergence and the mixing proxy -----------------------------------


@dataclass(frozen=True)
class SinkhornResult:
    value: float
    converged: bool  # worst marginal violation across sub-problems < 1e-4


_MARGINAL_TOL = 1e-4


def _entropic_cost(a, b, epsilon: float, iterations: int):
    """Plan cost <P, C> after fixed log-domain sweeps, plus the worst
    marginal violation of the resulting plan."""
    n, m = a.shape[0], b.shape[0]
    log_mu = np.full(n, -math.log(n))
    log_nu = np.full(m, -math.log(m))
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)  # (n, m)
    f = np.zeros(n)
    g = np.zeros(m)
    for _ in range(iterations):
        f = -epsilon * np_logsumexp((log_nu + g / epsilon)[None, :]
                                    - cost / epsilon, axis=1)
        g = -epsilon * np_logsumexp((log_mu + f / epsilon)[:, None]
                                    - cost / epsilon, axis=0)
    log_plan = (log_mu[:, None] + log_nu[None, :]
                + (f[:, None] + g[None, :] - cost) / epsilon)
    plan = np.exp(log_plan)
    violation = max(np.abs(plan.sum(axis=1) - np.exp(log_mu)).max(),
                    np.abs(plan.sum(axis=0) - np.exp(log_nu)).max())
    return float((plan * cost).sum()), float(violation)


def sinkhorn_divergence(a, b, epsilon: float = 0.05,
                        iterations: int = 50) -> SinkhornResult:
    """Debiased entropic transport cost between two point clouds.

    The cross term is averaged over both argument orders so the result is
    symmetric bitwise even at finite iteration counts, and identical
    clouds give exactly zero. Non-convergence is reported through the
    flag, never raised.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError("clouds must be (n, d) and (m, d)")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    ab, e1 = _entropic_cost(a, b, epsilon, iterations)
    ba, e2 = _entropic_cost(b, a, epsilon, iterations)
    aa, e3 = _entropic_cost(a, a, epsilon, iterations)
    bb, e4 = _entropic_cost(b, b, epsilon, iterations)
    value = 0.5 * (ab + ba) - 0.5 * aa - 0.5 * bb
    return SinkhornResult(value, max(e1, e2, e3, e4) < _MARGINAL_TOL)


def mixing_proxy_loss(field_for, minibatch, sigma: float,
                      mix_normalizer: NoiseNormalizer,
                      rng: np.random.Generator, *, epsilon: float = 0.05,
                      iterations: int = 50) -> LossReport:
    """Relative transport cost of one Langevin repair step, normalized.

    The batch is split in half; the second half is noised at sigma, kicked
    once with step h = 0.2 sigma^2 under field_for(sigma), and the ratio
    SD(kicked, reference)/SD(noised, reference) enters as
    ratio*e^(-s) + s with the denominator treated as a constant.
    RNG order: one (B/2, d) noising block, then one kick block.
    """
    batch = np.asarray(minibatch, dtype=float)
    if batch.ndim != 2:
        raise ShapeMismatchError("minibatch must have shape (B, d)")
    b = batch.shape[0]
    if b < 4 or b % 2:
        raise ShapeMismatchError("mixing proxy needs an even batch of >= 4")
    reference, tail = batch[:b // 2], batch[b // 2:]
    x_noise = tail + sigma * rng.standard_normal(tail.shape)
    h = 0.2 * sigma**2
    kick = field_for(sigma).evaluate(x_noise)
    x_mix = (x_noise + h * kick
             + math.sqrt(2.0 * h) * rng.standard_normal(tail.shape))
    numerator = sinkhorn_divergence(x_mix, reference, epsilon, iterations)
    denominator = sinkhorn_divergence(x_noise, reference, epsilon, iterations)
    if not denominator.value > 0:
        raise DegenerateEvaluationError(
            "noised half coincides with the reference half")
    s = mix_normalizer.log_scale(sigma)
    value = (numerator.value / denominator.value) * math.exp(-s) + s
    return LossReport(float(value), 0.0, b, math.nan, None)
