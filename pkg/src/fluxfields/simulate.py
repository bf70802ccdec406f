"""Chain simulation: exponentially integrated Langevin steps, horizon
sampling, transition weights, and the predictor-corrector / ULA samplers.

The driving chain targets the (estimated) density through its score and is
discretized so that a Gaussian target is simulated exactly at any step size:

    mu = x + sigma^2 * score(x)
    x' = mu + e^(-h) (x - mu) + sigma * sqrt(1 - e^(-2h)) * xi
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateHorizonError, ShapeMismatchError

DEGENERATE_VARIANCE = 1e-12


@dataclass(frozen=True)
class SimulationBatch:
    """One simulated minibatch: start points, endpoints, shared horizon,
    and the row-stochastic endpoint-assignment weights."""

    x0: np.ndarray  # (B, d)
    xt: np.ndarray  # (B, d)
    horizon: float
    weights: np.ndarray  # (B, B), rows sum to 1

    def __post_init__(self):
        if self.x0.shape != self.xt.shape:
            raise ShapeMismatchError("x0 and xt must share a shape")
        b = self.x0.shape[0]
        if self.weights.shape != (b, b):
            raise ShapeMismatchError("weights must be (B, B)")


def ou_langevin_step(x, score, step_size: float, bandwidth: float,
                     rng: np.random.Generator) -> np.ndarray:
    """One exponentially integrated Langevin update (exact for a Gaussian
    target with variance bandwidth^2)."""
    x = np.asarray(x, dtype=float)
    if step_size < 0:
        raise ValueError("step size must be nonnegative")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    if step_size == 0:  # exact identity, not mu + (x - mu) roundoff
        return x.copy()
    mu = x + bandwidth**2 * score(x)
    decay = math.exp(-step_size)
    noise_std = bandwidth * math.sqrt(-math.expm1(-2.0 * step_size))
    return mu + decay * (x - mu) + noise_std * rng.standard_normal(x.shape)


def simulate_horizon(x0, score, t: float, bandwidth: float,
                     rng: np.random.Generator, steps: int = 4,
                     score_jacobian=None):
    """Run the chain for total time t in `steps` equal substeps.

    When score_jacobian is given, also accumulates the pathwise chain
    Jacobian d x_t / d x_0 through the deterministic part of each update:
    per substep A = e^(-h) I + (1 - e^(-h)) (I + sigma^2 J_score(x)),
    evaluated at the pre-step state. Returns (xt, jac) in that case.
    """
    x = np.asarray(x0, dtype=float).copy()
    if x.ndim != 2:
        raise ShapeMismatchError("x0 must have shape (B, d)")
    if steps < 1:
        raise ValueError("steps must be positive")
    if t < 0:
        raise ValueError("horizon must be nonnegative")
    track = score_jacobian is not None
    b, d = x.shape
    jac = np.broadcast_to(np.eye(d), (b, d, d)).copy() if track else None
    if t == 0.0:
        return (x, jac) if track else x
    h = float(t) / steps
    decay = math.exp(-h)
    for _ in range(steps):
        if track:
            step_mat = decay * np.eye(d) + (1.0 - decay) * (
                np.eye(d) + bandwidth**2 * score_jacobian(x))
            jac = np.einsum("bij,bjk->bik", step_mat, jac)
        x = ou_langevin_step(x, score, h, bandwidth, rng)
    return (x, jac) if track else x


def transition_weights(x0, xt, t: float, bandwidth: float, score) -> np.ndarray:
    """Row-stochastic endpoint weights under the one-shot Gaussian
    approximation of the chain transition kernel."""
    x0 = np.asarray(x0, dtype=float)
    xt = np.asarray(xt, dtype=float)
    if x0.shape != xt.shape:
        raise ShapeMismatchError("x0 and xt must share a shape")
    variance = bandwidth**2 * (-math.expm1(-2.0 * t)) if t > 0 else 0.0
    if variance < DEGENERATE_VARIANCE:
        raise DegenerateHorizonError(
            f"transition variance {variance:.3e} below {DEGENERATE_VARIANCE:.0e}; "
            "weights are degenerate at this horizon")
    drift = bandwidth**2 * (-math.expm1(-t))
    mean = x0 + drift * score(x0)  # (B, d) predicted endpoint means
    sq = ((xt[None, :, :] - mean[:, None, :]) ** 2).sum(-1)  # (B_i, B_j)
    logits = -sq / (2.0 * variance)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


# -- horizon sampling ---------------------------------------------------------


@dataclass(frozen=True)
class HorizonSampler:
    """Distribution over simulation horizons on [0, cap]."""

    kind: str  # "uniform" | "exponential"
    horizon_cap: float
    rate: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "exponential"):
            raise ValueError(f"unknown horizon sampler kind {self.kind!r}")
        if not self.horizon_cap > 0:
            raise ValueError("horizon cap must be positive")
        if self.kind == "exponential" and not self.rate > 0:
            raise ValueError("rate must be positive")

    @staticmethod
    def default_cap(bandwidth: float) -> float:
        # four relaxation times of the bandwidth-sigma^2 chain
        return 4.0 * bandwidth**2

    def density(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        inside = (t >= 0) & (t <= self.horizon_cap)
        if self.kind == "uniform":
            return np.where(inside, 1.0 / self.horizon_cap, 0.0)
        lam = self.rate
        with np.errstate(over="ignore"):
            mass = -math.expm1(-lam * self.horizon_cap)
            return np.where(inside, lam * np.exp(-lam * t) / mass, 0.0)

    def sample(self, rng: np.random.Generator) -> float:
        u = rng.uniform()
        if self.kind == "uniform":
            return float(u * self.horizon_cap)
        lam = self.rate
        mass = -math.expm1(-lam * self.horizon_cap)
        return float(-math.log1p(-u * mass) / lam)


def sample_horizon(q: HorizonSampler, rng: np.random.Generator):
    """Draw a horizon and return it with its density value (for the 1/q(t)
    importance factor)."""
    t = q.sample(rng)
    return t, float(q.density(t))


def fit_horizon_rate(q: HorizonSampler, realized_losses,
                     learning_rate: float = 0.1) -> HorizonSampler:
    """One gradient step fitting the exponential rate to realized loss
    magnitudes (treated as constants) collected at past horizons.

    Minimizes the magnitude-weighted cross-entropy -mean(m * log q_lam(t))
    in log(lambda), which keeps the rate positive.
    """
    if q.kind != "exponential":
        raise ValueError("rate fitting applies to the exponential sampler")
    pairs = [(float(t), abs(float(m))) for t, m in realized_losses]
    if not pairs:
        return q
    t = np.array([p[0] for p in pairs])
    m = np.array([p[1] for p in pairs])
    lam = q.rate
    cap = q.horizon_cap
    # d/dlam of -log q_lam(t) = -(1/lam - t - T/(e^(lam T) - 1))
    tail = cap / math.expm1(lam * cap)
    dloss_dlam = -float(np.mean(m * (1.0 / lam - t - tail)))
    log_lam = math.log(lam) - learning_rate * dloss_dlam * lam
    return HorizonSampler("exponential", cap, rate=math.exp(log_lam))


# -- samplers -----------------------------------------------------------------


def pc_sample(field, sigma_grid, n_samples: int, dim: int,
              rng: np.random.Generator, snr: float = 0.16) -> np.ndarray:
    """Predictor-corrector sampling across a decreasing noise grid.

    field(x, sigma) -> (B, d) evaluates the per-noise-level vector field.
    Predictor: x += (sigma_k^2 - sigma_{k+1}^2) f(x, sigma_k) plus matched
    noise (noise-free on the last step). Corrector (skipped after the last
    predictor): eps = 2 (snr ||z'|| / ||f||)^2 with fresh z', where both
    norms are batch means of per-chain norms. Per-chain norms are unusable
    here: a chain that has already converged near a stationary point of f
    gets ||f|| ~ 0 and an unbounded step that ejects it.
    """
    sigma_grid = np.asarray(sigma_grid, dtype=float)
    if sigma_grid.ndim != 1 or sigma_grid.size < 2:
        raise ValueError("sigma grid needs at least two levels")
    if np.any(np.diff(sigma_grid) >= 0):
        raise ValueError("sigma grid must be strictly decreasing")
    if not snr > 0:
        raise ValueError("snr must be positive")
    x = sigma_grid[0] * rng.standard_normal((n_samples, dim))
    last = sigma_grid.size - 2
    for k in range(sigma_grid.size - 1):
        delta = sigma_grid[k] ** 2 - sigma_grid[k + 1] ** 2
        if k < last:
            z = rng.standard_normal(x.shape)
            x = x + delta * field(x, sigma_grid[k]) + math.sqrt(delta) * z
        else:
            x = x + delta * field(x, sigma_grid[k])
        if k < last:
            zp = rng.standard_normal(x.shape)
            f = field(x, sigma_grid[k + 1])
            f_norm = float(np.linalg.norm(f, axis=1).mean())
            if f_norm == 0.0:  # identically zero field: no corrector
                continue
            z_norm = float(np.linalg.norm(zp, axis=1).mean())
            eps = 2.0 * (snr * z_norm / f_norm) ** 2
            x = x + eps * f + math.sqrt(2.0 * eps) * zp
    return x


def ula_sample(field, x0, step_size: float, n_steps: int,
               rng: np.random.Generator) -> np.ndarray:
    """Unadjusted Langevin iteration x += eta f(x) + sqrt(2 eta) xi."""
    if not step_size > 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x0, dtype=float).copy()
    if x.ndim != 2:
        raise ShapeMismatchError("x0 must have shape (B, d)")
    scale = math.sqrt(2.0 * step_size)
    for _ in range(n_steps):
        x = x + step_size * field(x) + scale * rng.standard_normal(x.shape)
    return x
