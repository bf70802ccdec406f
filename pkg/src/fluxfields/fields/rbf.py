"""Radial-basis-function vector fields (linear in their coefficients)."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError
from .base import VectorField


class RbfField(VectorField):
    """f(x) = sum_m coeffs_m * exp(-||x - centers_m||^2 / (2 l^2)).

    Only the coefficients are trainable; centers come from a data subsample
    and the shared length scale from the median pairwise-distance heuristic.
    """

    def __init__(self, centers, length_scale: float, coeffs=None):
        centers = np.asarray(centers, dtype=float)
        if centers.ndim != 2:
            raise ShapeMismatchError("centers must have shape (M, d)")
        if not length_scale > 0:
            raise ValueError("length scale must be positive")
        self.centers = centers
        self.length_scale = float(length_scale)
        self.dim = centers.shape[1]
        if coeffs is None:
            coeffs = np.zeros_like(centers)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != centers.shape:
            raise ShapeMismatchError("coeffs must match centers shape (M, d)")
        self.coeffs = coeffs

    @classmethod
    def from_data(cls, data, n_centers: int, rng: np.random.Generator,
                  subsample_cap: int = 500) -> "RbfField":
        """Centers from a data subsample, length scale from median heuristic."""
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[0] < n_centers:
            raise ShapeMismatchError("need at least n_centers data rows")
        idx = rng.choice(data.shape[0], size=n_centers, replace=False)
        centers = data[idx]
        pool = data
        if data.shape[0] > subsample_cap:
            pool = data[rng.choice(data.shape[0], size=subsample_cap, replace=False)]
        diffs = pool[:, None, :] - pool[None, :, :]
        dists = np.sqrt((diffs**2).sum(-1))
        upper = dists[np.triu_indices(pool.shape[0], k=1)]
        scale = float(np.median(upper))
        if not scale > 0:
            raise ValueError("median heuristic found zero length scale")
        return cls(centers, scale)

    def _kernel(self, x):
        diffs = x[:, None, :] - self.centers[None, :, :]  # (B, M, d)
        sq = np.einsum("bmd,bmd->bm", diffs, diffs)
        return np.exp(-0.5 * sq / self.length_scale**2), diffs

    def evaluate(self, x):
        k, _ = self._kernel(self._check(x))
        return k @ self.coeffs

    def jacobian(self, x):
        x = self._check(x)
        k, diffs = self._kernel(x)
        # grad phi_m(x) = -phi_m (x - z_m)/l^2
        return -np.einsum("bm,mi,bmj->bij", k, self.coeffs, diffs) / self.length_scale**2

    def divergence(self, x):
        x = self._check(x)
        k, diffs = self._kernel(x)
        return -np.einsum("bm,bmd,md->b", k, diffs, self.coeffs) / self.length_scale**2

    def divergence_gradient(self, x):
        x = self._check(x)
        k, diffs = self._kernel(x)
        l2 = self.length_scale**2
        dot = np.einsum("bmd,md->bm", diffs, self.coeffs)  # (x - z_m) . c_m
        term1 = np.einsum("bm,bm,bmi->bi", k, dot, diffs) / l2**2
        term2 = np.einsum("bm,mi->bi", k, self.coeffs) / l2
        return term1 - term2

    @property
    def n_params(self):
        return self.coeffs.size

    def get_params(self):
        return self.coeffs.ravel().copy()

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.coeffs.size,):
            raise ShapeMismatchError("flat parameter vector has wrong length")
        return RbfField(self.centers, self.length_scale, flat.reshape(self.coeffs.shape))

    def param_grad_dot(self, x, cotangents):
        x = self._check(x)
        cot = np.asarray(cotangents, dtype=float)
        if cot.shape != x.shape:
            raise ShapeMismatchError("cotangents must match point batch shape")
        k, _ = self._kernel(x)
        return (k.T @ cot).ravel()

    def checkpoint_meta(self):
        return {
            "centers": self.centers.tolist(),
            "length_scale": self.length_scale,
        }

    @classmethod
    def from_checkpoint(cls, meta, params):
        centers = np.asarray(meta["centers"], dtype=float)
        field = cls(centers, float(meta["length_scale"]))
        return field.set_params(params)
