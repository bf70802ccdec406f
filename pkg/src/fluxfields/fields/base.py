"""Vector field interface and generic building blocks.

A VectorField exposes values plus the spatial-derivative surface the losses
and metrics need (Jacobian, divergence, gradient of divergence) and, for
trainable families, a flat parameter vector with copy-on-write updates.
Derivative defaults fall back to forward-mode duals through `_components`;
families with closed forms override them.
"""

from __future__ import annotations

import numpy as np

from .. import duals as fm
from ..densities import (
    GaussianMixture,
    mixture_score,
    mixture_score_divergence,
    mixture_score_divergence_gradient,
    mixture_score_jacobian,
)
from ..errors import CapabilityError, ShapeMismatchError


class VectorField:
    """Interface for d-dimensional vector fields on R^d."""

    dim: int

    # -- evaluation and spatial derivatives ----------------------------------

    def evaluate(self, x) -> np.ndarray:
        """Field values at (B, d) points; returns (B, d)."""
        raise NotImplementedError

    def _components(self, coords):
        """Dual-friendly componentwise evaluation (list of d coordinate
        arrays to list of d outputs); used by the derivative fallbacks."""
        raise CapabilityError(f"{type(self).__name__} has no dual components")

    def jacobian(self, x) -> np.ndarray:
        """Jacobian at (B, d) points; returns (B, d, d)."""
        _, jac = fm.value_and_jacobian(self._components, self._check(x))
        return jac

    def divergence(self, x) -> np.ndarray:
        """Divergence at (B, d) points; returns (B,)."""
        return fm.divergence(self._components, self._check(x))

    def divergence_gradient(self, x) -> np.ndarray:
        """Gradient of the divergence at (B, d) points; returns (B, d)."""
        return fm.divergence_gradient(self._components, self._check(x))

    # -- parameters -----------------------------------------------------------

    @property
    def n_params(self) -> int:
        raise CapabilityError(f"{type(self).__name__} has no parameters")

    def get_params(self) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no parameters")

    def set_params(self, flat) -> "VectorField":
        """Return a new field with the given flat parameter vector.

        Copy-on-write: the receiver is never mutated.
        """
        raise CapabilityError(f"{type(self).__name__} has no parameters")

    def param_grad_dot(self, x, cotangents) -> np.ndarray:
        """sum_b (d evaluate(x_b) / d params)^T cotangents_b, shape (P,).

        Default: forward-mode duals over each parameter via
        `_eval_with_params`; linear families override with closed forms.
        """
        x = self._check(x)
        cot = np.asarray(cotangents, dtype=float)
        if cot.shape != x.shape:
            raise ShapeMismatchError("cotangents must match point batch shape")
        theta = self.get_params()
        grad = np.zeros(theta.shape[0])
        for p in range(theta.shape[0]):
            direction = np.zeros_like(theta)
            direction[p] = 1.0
            outs = self._eval_with_params(fm.Dual(theta, direction), x)
            acc = 0.0
            for i, o in enumerate(outs):
                dot = o.dot if isinstance(o, fm.Dual) else 0.0
                acc = acc + np.sum(dot * cot[:, i])
            grad[p] = acc
        return grad

    def _eval_with_params(self, theta, x):
        """Componentwise evaluation with dual-friendly parameters."""
        raise CapabilityError(f"{type(self).__name__} has no parameters")

    # -- helpers --------------------------------------------------------------

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeMismatchError(
                f"points must have shape (B, {self.dim}), got {x.shape}"
            )
        return x


class ScoreField(VectorField):
    """The score of a Gaussian mixture as a vector field (all closed forms)."""

    def __init__(self, gmm: GaussianMixture):
        self.gmm = gmm
        self.dim = gmm.dim

    def evaluate(self, x):
        return mixture_score(self.gmm, self._check(x))

    def jacobian(self, x):
        return mixture_score_jacobian(self.gmm, self._check(x))

    def divergence(self, x):
        return mixture_score_divergence(self.gmm, self._check(x))

    def divergence_gradient(self, x):
        return mixture_score_divergence_gradient(self.gmm, self._check(x))


class LinearField(VectorField):
    """f(x) = A x + b; handy for analytic checks."""

    def __init__(self, matrix, offset=None):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ShapeMismatchError("matrix must be square")
        self.dim = self.matrix.shape[0]
        self.offset = (
            np.zeros(self.dim) if offset is None else np.asarray(offset, dtype=float)
        )

    def evaluate(self, x):
        return self._check(x) @ self.matrix.T + self.offset

    def jacobian(self, x):
        x = self._check(x)
        return np.broadcast_to(self.matrix, (x.shape[0], self.dim, self.dim)).copy()

    def divergence(self, x):
        x = self._check(x)
        return np.full(x.shape[0], float(np.trace(self.matrix)))

    def divergence_gradient(self, x):
        return np.zeros_like(self._check(x))


class ZeroField(VectorField):
    def __init__(self, dim: int):
        self.dim = dim

    def evaluate(self, x):
        return np.zeros_like(self._check(x))

    def jacobian(self, x):
        x = self._check(x)
        return np.zeros((x.shape[0], self.dim, self.dim))

    def divergence(self, x):
        return np.zeros(self._check(x).shape[0])

    def divergence_gradient(self, x):
        return np.zeros_like(self._check(x))


class DifferenceField(VectorField):
    """u = f - g with derivatives taken as differences.

    Parameter operations delegate to f (g is treated as frozen), which is
    exactly the structure of a trainable field minus a score estimate.
    """

    def __init__(self, f: VectorField, g: VectorField):
        if f.dim != g.dim:
            raise ShapeMismatchError("field dimensions differ")
        self.f = f
        self.g = g
        self.dim = f.dim

    def evaluate(self, x):
        return self.f.evaluate(x) - self.g.evaluate(x)

    def jacobian(self, x):
        return self.f.jacobian(x) - self.g.jacobian(x)

    def divergence(self, x):
        return self.f.divergence(x) - self.g.divergence(x)

    def divergence_gradient(self, x):
        return self.f.divergence_gradient(x) - self.g.divergence_gradient(x)

    @property
    def n_params(self):
        return self.f.n_params

    def get_params(self):
        return self.f.get_params()

    def set_params(self, flat):
        return DifferenceField(self.f.set_params(flat), self.g)

    def param_grad_dot(self, x, cotangents):
        return self.f.param_grad_dot(x, cotangents)
