"""First-order training for generative vector fields.

The gradient path follows the endpoint stop-rule: the chain endpoint factors
are plain numbers and only the field evaluation at the batch points is
differentiated. On top of that sit a bias-corrected Adam step, an EMA shadow
of the parameters, the generic minibatch loop (flux or noise-annealed
objective, optional regularizers, horizon-rate refitting, checkpoints), and
the kinetic-field fitting recipe.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .densities import GaussianMixture, sample_mixture
from .errors import (
    CapabilityError,
    ConfigError,
    IntegrationBlowUpError,
    ShapeMismatchError,
)
from .fields.io import load_field, save_field
from .fields.kinetic import KineticField
from .loss import (
    LossReport,
    NoiseNormalizer,
    append_report_csv,
    flux_loss,
    mixing_proxy_loss,
    noise_annealed_flux_loss,
)
from .rng import generator_state, restore_generator
from .simulate import HorizonSampler, fit_horizon_rate

__all__ = [
    "OptimizerState",
    "EmaTracker",
    "LossSpec",
    "Schedule",
    "TrainResult",
    "parameter_gradient",
    "adam_step",
    "train_field",
    "fit_kinetic_field",
]

_MIXING_FD_STEP = 1e-4


@dataclass(frozen=True)
class OptimizerState:
    """Adam accumulator: flat moment vectors plus the step counter."""

    first_moment: np.ndarray   # (P,)
    second_moment: np.ndarray  # (P,)
    step_count: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8

    def __post_init__(self):
        m = np.asarray(self.first_moment, dtype=float)
        v = np.asarray(self.second_moment, dtype=float)
        if m.ndim != 1 or v.shape != m.shape:
            raise ShapeMismatchError("moment vectors must be flat and equal-length")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        object.__setattr__(self, "first_moment", m)
        object.__setattr__(self, "second_moment", v)

    @classmethod
    def fresh(cls, n_params: int, learning_rate: float) -> "OptimizerState":
        zeros = np.zeros(int(n_params))
        return cls(zeros, zeros.copy(), 0, float(learning_rate))


def adam_step(state: OptimizerState, params, gradient):
    """One bias-corrected Adam update; returns (new params, new state)."""
    params = np.asarray(params, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if params.shape != state.first_moment.shape or gradient.shape != params.shape:
        raise ShapeMismatchError(
            f"params/gradient of length {params.shape} do not match optimizer "
            f"state of length {state.first_moment.shape}")
    k = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * gradient ** 2
    m_hat = m / (1.0 - state.beta1 ** k)
    v_hat = v / (1.0 - state.beta2 ** k)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat)
                                                         + state.epsilon_hat)
    new_state = OptimizerState(m, v, k, state.learning_rate,
                               state.beta1, state.beta2, state.epsilon_hat)
    return new_params, new_state


@dataclass(frozen=True)
class EmaTracker:
    """Exponential moving average of the parameter vector.

    update() mutates the shadow in place; shadow starts at the initial
    parameters.
    """

    decay: float
    shadow: np.ndarray  # (P,)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError("decay must lie in [0, 1)")
        object.__setattr__(self, "shadow",
                           np.asarray(self.shadow, dtype=float).copy())

    @classmethod
    def start(cls, params, decay: float = 0.99) -> "EmaTracker":
        return cls(decay, np.asarray(params, dtype=float))

    def update(self, params) -> None:
        params = np.asarray(params, dtype=float)
        if params.shape != self.shadow.shape:
            raise ShapeMismatchError("shadow length does not match parameters")
        self.shadow[:] = self.decay * self.shadow + (1.0 - self.decay) * params


def parameter_gradient(field, x0, endpoints, horizon_density: float) -> np.ndarray:
    """Gradient of the minibatch flux objective with frozen endpoint factors.

    grad = -(1/B) sum_i (d field(x0_i)/d theta)^T endpoint_i / q(t); the
    endpoint vectors enter as constants, so the gradient is linear in them.
    """
    x0 = np.asarray(x0, dtype=float)
    endpoints = np.asarray(endpoints, dtype=float)
    if x0.ndim != 2 or endpoints.shape != x0.shape:
        raise ShapeMismatchError("x0 and endpoints must both be (B, d)")
    if not horizon_density > 0:
        raise ConfigError("horizon density must be positive")
    b = x0.shape[0]
    return field.param_grad_dot(x0, -endpoints / (b * horizon_density))


@dataclass(frozen=True)
class LossSpec:
    """What objective the training loop evaluates each step."""

    kind: str = "flux"            # "flux" | "noise_annealed"
    bandwidth: float = 0.5        # chain noise scale; KDE bandwidth in kde mode
    score_mode: str = "kde"       # "kde" | "exact" (exact needs a mixture target)
    use_vr: bool = True
    chain_steps: int = 4
    lambda_l2: float = 0.0
    lambda_mixing: float = 0.0
    mixing_sigma: float | None = None      # defaults to bandwidth
    sigma_dist: object = None              # annealed: rng -> sigma
    normalizer: NoiseNormalizer | None = None
    normalizer_lr: float = 0.1

    def __post_init__(self):
        if self.kind not in ("flux", "noise_annealed"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.score_mode not in ("kde", "exact"):
            raise ConfigError(f"unknown score mode {self.score_mode!r}")
        if self.kind == "flux" and not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        if self.kind == "noise_annealed":
            if self.sigma_dist is None or self.normalizer is None:
                raise ConfigError(
                    "noise_annealed needs sigma_dist and a normalizer")
            if self.score_mode != "kde":
                raise ConfigError("noise_annealed always estimates the score "
                                  "from the noised minibatch")
        if self.lambda_l2 < 0 or self.lambda_mixing < 0:
            raise ConfigError("regularizer weights must be nonnegative")


@dataclass(frozen=True)
class Schedule:
    """Loop bookkeeping: step/batch counts, optimizer and logging knobs."""

    n_steps: int
    batch_size: int
    learning_rate: float = 1e-3
    ema_decay: float = 0.99
    grad_clip: float = 10.0
    horizon: HorizonSampler | None = None  # default: exponential, cap 4*bw^2
    refit_interval: int = 10
    refit_window: int = 100
    log_path: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_interval: int = 50

    def __post_init__(self):
        if self.n_steps < 1 or self.batch_size < 1:
            raise ConfigError("n_steps and batch_size must be at least 1")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ConfigError("learning_rate and grad_clip must be positive")
        if self.refit_interval < 1 or self.refit_window < 1:
            raise ConfigError("refit settings must be at least 1")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be at least 1")


@dataclass(frozen=True)
class TrainResult:
    """Final field plus the optimizer/EMA state and the per-step losses."""

    field: object
    ema_params: np.ndarray
    optimizer: OptimizerState
    horizon: HorizonSampler
    losses: np.ndarray

    def ema_field(self):
        return self.field.set_params(self.ema_params)


def _draw_minibatch(target, batch_size: int, rng: np.random.Generator):
    if isinstance(target, GaussianMixture):
        return sample_mixture(target, batch_size, rng)
    data = np.asarray(target, dtype=float)
    if data.ndim != 2:
        raise ShapeMismatchError("dataset target must be an (N, d) matrix")
    if batch_size >= data.shape[0]:
        return data
    idx = rng.integers(0, data.shape[0], size=batch_size)
    return data[idx]


def _mixing_term(fld, theta, x0, spec: LossSpec, norm: NoiseNormalizer,
                 rng: np.random.Generator):
    """Mixing penalty value and a central-difference parameter gradient.

    The Sinkhorn solve is not dual-friendly, so the gradient comes from
    re-evaluating the term at shifted parameters with the *same* noise
    draws (the generator is rewound for every evaluation).
    """
    sigma = spec.mixing_sigma if spec.mixing_sigma is not None else spec.bandwidth
    snap = generator_state(rng)

    def term_at(vec):
        frozen = restore_generator(snap)
        rep = mixing_proxy_loss(lambda _s: fld.set_params(vec), x0, sigma,
                                norm, frozen)
        return rep.value

    grad = np.zeros_like(theta)
    for j in range(theta.size):
        shift = np.zeros_like(theta)
        shift[j] = _MIXING_FD_STEP
        grad[j] = (term_at(theta + shift)
                   - term_at(theta - shift)) / (2.0 * _MIXING_FD_STEP)
    value = term_at(theta)
    # advance the caller's stream exactly one mixing evaluation
    mixing_proxy_loss(lambda _s: fld.set_params(theta), x0, sigma, norm, rng)
    return value, grad


def _checkpoint_paths(directory: str):
    return (os.path.join(directory, "field.txt"),
            os.path.join(directory, "state.json"))


def _save_checkpoint(directory, step, fld, opt, ema, q, losses, realized,
                     rng, norm):
    os.makedirs(directory, exist_ok=True)
    field_path, state_path = _checkpoint_paths(directory)
    save_field(fld, field_path)
    payload = {
        "step": int(step),
        "rng": generator_state(rng),
        "optimizer": {
            "first_moment": opt.first_moment.tolist(),
            "second_moment": opt.second_moment.tolist(),
            "step_count": int(opt.step_count),
            "learning_rate": float(opt.learning_rate),
        },
        "ema": {"decay": float(ema.decay), "shadow": ema.shadow.tolist()},
        "horizon": {"kind": q.kind, "cap": float(q.horizon_cap),
                    "rate": float(q.rate)},
        "losses": [float(x) for x in losses],
        "realized": [[float(t), float(v)] for t, v in realized],
        "normalizer_log_scales":
            None if norm is None else [float(s) for s in norm.log_scales],
    }
    with open(state_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def _load_checkpoint(directory):
    field_path, state_path = _checkpoint_paths(directory)
    fld = load_field(field_path)
    with open(state_path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return fld, payload


def train_field(fld, target, loss_spec: LossSpec, schedule: Schedule,
                rng: np.random.Generator, *, resume: bool = False) -> TrainResult:
    """Minibatch flux training with Adam, EMA and optional regularizers.

    target is either a GaussianMixture (fresh samples per step; required for
    score_mode="exact") or an (N, d) dataset (minibatches drawn with
    replacement; the full set when batch_size >= N). With resume=True the
    loop restarts from schedule.checkpoint_dir, including the generator
    state, and runs until n_steps.
    """
    if loss_spec.score_mode == "exact" and not isinstance(target, GaussianMixture):
        raise ConfigError("score_mode='exact' needs a GaussianMixture target")
    norm = loss_spec.normalizer
    start_step = 0
    if resume:
        if schedule.checkpoint_dir is None:
            raise ConfigError("resume requires schedule.checkpoint_dir")
        fld, payload = _load_checkpoint(schedule.checkpoint_dir)
        start_step = payload["step"]
        rng = restore_generator(payload["rng"])
        opt_raw = payload["optimizer"]
        opt = OptimizerState(np.array(opt_raw["first_moment"]),
                             np.array(opt_raw["second_moment"]),
                             opt_raw["step_count"], opt_raw["learning_rate"])
        ema = EmaTracker(payload["ema"]["decay"],
                         np.array(payload["ema"]["shadow"]))
        hz = payload["horizon"]
        q = HorizonSampler(hz["kind"], hz["cap"], rate=hz["rate"])
        losses = [float(x) for x in payload["losses"]]
        realized = [(float(t), float(v)) for t, v in payload["realized"]]
        if norm is not None and payload["normalizer_log_scales"] is not None:
            norm.log_scales[:] = payload["normalizer_log_scales"]
    else:
        theta0 = fld.get_params()
        opt = OptimizerState.fresh(theta0.size, schedule.learning_rate)
        ema = EmaTracker.start(theta0, schedule.ema_decay)
        q = schedule.horizon
        if q is None:
            q = HorizonSampler("exponential",
                               4.0 * loss_spec.bandwidth ** 2, rate=1.0)
        losses = []
        realized = []

    theta = fld.get_params().copy()

    for step in range(start_step + 1, schedule.n_steps + 1):
        x0 = _draw_minibatch(target, schedule.batch_size, rng)
        sigma_logged = None
        if loss_spec.kind == "flux":
            report, grad = flux_loss(
                fld, x0, loss_spec.bandwidth, q, rng,
                steps=loss_spec.chain_steps, use_vr=loss_spec.use_vr,
                use_exact_score=loss_spec.score_mode == "exact",
                exact_mixture=target if loss_spec.score_mode == "exact" else None,
                keep_terms=False)
        else:
            report, grad, norm_grad, sigma_logged = noise_annealed_flux_loss(
                lambda _s: fld, x0, loss_spec.sigma_dist, norm,
                lambda s: HorizonSampler("exponential", 4.0 * s * s, rate=1.0),
                rng, steps=loss_spec.chain_steps, use_vr=loss_spec.use_vr,
                keep_terms=False)
        if grad is None:
            raise CapabilityError(
                "training requires a field with parameter derivatives")

        value = report.value
        b = x0.shape[0]
        if loss_spec.lambda_l2 > 0.0:
            fx = fld.evaluate(x0)
            value += loss_spec.lambda_l2 * float(np.mean(np.sum(fx ** 2, axis=1)))
            grad = grad + loss_spec.lambda_l2 * fld.param_grad_dot(
                x0, 2.0 * fx / b)
        if loss_spec.lambda_mixing > 0.0:
            if norm is None:
                sig = (loss_spec.mixing_sigma if loss_spec.mixing_sigma
                       is not None else loss_spec.bandwidth)
                norm = NoiseNormalizer.uniform(0.5 * sig, 2.0 * sig, 1)
            mix_value, mix_grad = _mixing_term(fld, theta, x0, loss_spec,
                                               norm, rng)
            value += loss_spec.lambda_mixing * mix_value
            grad = grad + loss_spec.lambda_mixing * mix_grad

        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise IntegrationBlowUpError(
                f"non-finite loss at step {step} "
                f"(sigma={sigma_logged if sigma_logged is not None else loss_spec.bandwidth}, "
                f"t={report.horizon})")

        grad_norm = float(np.linalg.norm(grad))
        if grad_norm > schedule.grad_clip:
            grad = grad * (schedule.grad_clip / grad_norm)
        theta, opt = adam_step(opt, theta, grad)
        fld = fld.set_params(theta)
        ema.update(theta)
        if loss_spec.kind == "noise_annealed":
            norm.log_scales[:] = (norm.log_scales
                                  - loss_spec.normalizer_lr * norm_grad)

        losses.append(value)
        realized.append((report.horizon, value))
        realized = realized[-schedule.refit_window:]
        if (loss_spec.kind == "flux" and q.kind == "exponential"
                and step % schedule.refit_interval == 0):
            q = fit_horizon_rate(q, realized)

        if schedule.log_path is not None:
            logged = LossReport(value, report.std_error, report.sample_count,
                                report.horizon, None)
            append_report_csv(schedule.log_path, step, logged,
                              sigma=sigma_logged, grad_norm=grad_norm)
        if schedule.checkpoint_dir is not None and (
                step % schedule.checkpoint_interval == 0
                or step == schedule.n_steps):
            _save_checkpoint(schedule.checkpoint_dir, step, fld, opt, ema, q,
                             losses, realized, rng, norm)

    return TrainResult(fld, ema.shadow.copy(), opt, q, np.array(losses))


def fit_kinetic_field(fld, snapshot, rng: np.random.Generator, *,
                      n_iters: int = 100, learning_rate: float = 1e-3,
                      noise_variance: float = 1e-3, use_vr: bool = True,
                      log_path=None, checkpoint_dir=None) -> KineticField:
    """Fit splicing kinetics to a cell snapshot by flux training.

    Defaults follow the reference recipe: 100 Adam iterations at lr 1e-3,
    chain noise sigma^2 = 1e-3, uniform horizons on [0, 4 sigma^2], KDE
    score from the batch. Batches are the full snapshot up to 4096 cells.
    """
    snapshot = np.asarray(snapshot, dtype=float)
    if snapshot.ndim != 2 or snapshot.shape[1] % 2:
        raise ShapeMismatchError("snapshot must be (N, 2 * n_genes)")
    if fld is None:
        fld = KineticField(snapshot.shape[1] // 2)
    if 2 * fld.n_genes != snapshot.shape[1]:
        raise ShapeMismatchError(
            f"snapshot dimension {snapshot.shape[1]} does not match a "
            f"{fld.n_genes}-gene field")
    sigma = math.sqrt(noise_variance)
    spec = LossSpec(kind="flux", bandwidth=sigma, use_vr=use_vr)
    schedule = Schedule(
        n_steps=n_iters, batch_size=min(snapshot.shape[0], 4096),
        learning_rate=learning_rate,
        horizon=HorizonSampler("uniform", 4.0 * noise_variance),
        log_path=log_path, checkpoint_dir=checkpoint_dir)
    return train_field(fld, snapshot, spec, schedule, rng).field
