"""Per-gene transcription kinetics as a trainable vector field.

State layout: x = (u_1..u_G, s_1..s_G) for G genes (unspliced then spliced).
Per gene, with rates kept positive through softplus reparameterization:

    du/dt = softplus(a u + b s + c) - beta u
    ds/dt = beta u - gamma s,   beta = softplus(beta_raw), gamma = softplus(gamma_raw)

Parameters are flat per gene: (a, b, c, beta_raw, gamma_raw), 5 G total.
Spatial derivatives are closed-form (2x2 in-gene blocks); parameter
derivatives go through forward-mode duals since the family is not linear in
its parameters.
"""

from __future__ import annotations

import numpy as np

from .. import duals as fm
from ..errors import IntegrationBlowUpError, ShapeMismatchError
from .base import VectorField


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


class KineticField(VectorField):
    """Trainable splicing-kinetics field over G genes (dim = 2 G)."""

    PARAMS_PER_GENE = 5

    def __init__(self, n_genes: int, params=None):
        if n_genes < 1:
            raise ValueError("need at least one gene")
        self.n_genes = int(n_genes)
        self.dim = 2 * self.n_genes
        if params is None:
            params = self.default_params(self.n_genes)
        params = np.asarray(params, dtype=float)
        if params.shape != (self.PARAMS_PER_GENE * self.n_genes,):
            raise ShapeMismatchError(
                f"params must have shape ({self.PARAMS_PER_GENE * self.n_genes},)"
            )
        self.params = params

    @staticmethod
    def default_params(n_genes: int) -> np.ndarray:
        """a = b = c = 0 (transcription softplus(0) = ln 2), unit rates."""
        per_gene = np.array([0.0, 0.0, 0.0, _inv_softplus(1.0), _inv_softplus(1.0)])
        return np.tile(per_gene, n_genes)

    def _per_gene(self, params=None):
        p = self.params if params is None else params
        return p.reshape(self.n_genes, self.PARAMS_PER_GENE)

    def _split(self, x):
        g = self.n_genes
        return x[:, :g], x[:, g:]

    def evaluate(self, x):
        x = self._check(x)
        u, s = self._split(x)
        pg = self._per_gene()
        a, b, c = pg[:, 0], pg[:, 1], pg[:, 2]
        beta = _softplus(pg[:, 3])
        gamma = _softplus(pg[:, 4])
        z = u * a[None, :] + s * b[None, :] + c[None, :]
        alpha = _softplus(z)
        du = alpha - beta[None, :] * u
        ds = beta[None, :] * u - gamma[None, :] * s
        return np.concatenate([du, ds], axis=1)

    def jacobian(self, x):
        x = self._check(x)
        u, s = self._split(x)
        g = self.n_genes
        pg = self._per_gene()
        a, b = pg[:, 0], pg[:, 1]
        beta = _softplus(pg[:, 3])
        gamma = _softplus(pg[:, 4])
        z = u * a[None, :] + s * b[None, :] + pg[:, 2][None, :]
        sig = _sigmoid(z)
        jac = np.zeros((x.shape[0], self.dim, self.dim))
        idx = np.arange(g)
        jac[:, idx, idx] = sig * a[None, :] - beta[None, :]
        jac[:, idx, g + idx] = sig * b[None, :]
        jac[:, g + idx, idx] = beta[None, :]
        jac[:, g + idx, g + idx] = -gamma[None, :]
        return jac

    def divergence(self, x):
        x = self._check(x)
        u, s = self._split(x)
        pg = self._per_gene()
        a, b = pg[:, 0], pg[:, 1]
        beta = _softplus(pg[:, 3])
        gamma = _softplus(pg[:, 4])
        z = u * a[None, :] + s * b[None, :] + pg[:, 2][None, :]
        sig = _sigmoid(z)
        return np.sum(sig * a[None, :] - beta[None, :] - gamma[None, :], axis=1)

    def divergence_gradient(self, x):
        x = self._check(x)
        u, s = self._split(x)
        pg = self._per_gene()
        a, b = pg[:, 0], pg[:, 1]
        z = u * a[None, :] + s * b[None, :] + pg[:, 2][None, :]
        sig = _sigmoid(z)
        dsig = sig * (1.0 - sig)
        grad_u = dsig * (a * a)[None, :]
        grad_s = dsig * (a * b)[None, :]
        return np.concatenate([grad_u, grad_s], axis=1)

    @property
    def n_params(self):
        return self.params.size

    def get_params(self):
        return self.params.copy()

    def set_params(self, flat):
        return KineticField(self.n_genes, flat)

    def _eval_with_params(self, theta, x):
        """Dual-friendly evaluation; theta may be a Dual over the flat params."""
        g = self.n_genes
        outs_u = []
        outs_s = []
        for gene in range(g):
            base = self.PARAMS_PER_GENE * gene
            a = theta[base + 0]
            b = theta[base + 1]
            c = theta[base + 2]
            beta = fm.softplus(theta[base + 3])
            gamma = fm.softplus(theta[base + 4])
            u = x[:, gene]
            s = x[:, g + gene]
            alpha = fm.softplus(a * u + b * s + c)
            outs_u.append(alpha - beta * u)
            outs_s.append(beta * u - gamma * s)
        return outs_u + outs_s

    def checkpoint_meta(self):
        return {"n_genes": self.n_genes}

    @classmethod
    def from_checkpoint(cls, meta, params):
        return cls(int(meta["n_genes"]), params)


def _inv_softplus(y: float) -> float:
    # inverse of log(1 + e^x); y > 0
    return float(np.log(np.expm1(y)))


def integrate_kinetic(field: KineticField, x0, duration: float, n_steps: int,
                      return_trajectory: bool = False):
    """Fixed-step RK4 integration of the kinetic ODE.

    Args:
        field: the vector field (any VectorField works, kinetics in practice).
        x0: (B, d) initial states.
        duration: total integration time (>= 0).
        n_steps: number of RK4 steps (> 0).
        return_trajectory: when True, return (n_steps + 1, B, d) states at
            every step instead of just the final state.

    Raises:
        IntegrationBlowUpError: if any state stops being finite.
    """
    x = np.asarray(x0, dtype=float).copy()
    if x.ndim != 2:
        raise ShapeMismatchError("x0 must have shape (B, d)")
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    h = float(duration) / n_steps
    traj = [x.copy()] if return_trajectory else None
    # overflow is detected by the finiteness check, not by numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_steps):
            k1 = field.evaluate(x)
            k2 = field.evaluate(x + 0.5 * h * k1)
            k3 = field.evaluate(x + 0.5 * h * k2)
            k4 = field.evaluate(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise IntegrationBlowUpError("kinetic trajectory left finite range")
            if return_trajectory:
                traj.append(x.copy())
    if return_trajectory:
        return np.stack(traj, axis=0)
    return x
