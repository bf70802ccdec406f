"""Kernel score estimation from a minibatch.

The minibatch score estimate is the exact score of the Gaussian mixture whose
components sit at the batch rows with equal weights and variance bandwidth^2,
so everything delegates to the mixture implementation: the same softmax core,
the same underflow guard, the same derivative formulas. Keeping the delegation
explicit is what makes the estimator's structure obvious and testable.
"""

from __future__ import annotations

import numpy as np

from .densities import (
    GaussianMixture,
    mixture_score,
    mixture_score_divergence,
    mixture_score_divergence_gradient,
    mixture_score_jacobian,
)
from .errors import ShapeMismatchError


def batch_mixture(batch, bandwidth: float) -> GaussianMixture:
    """Equal-weight mixture with means at the batch rows, variance bandwidth^2.

    Args:
        batch: (B, d) data minibatch; B >= 1.
        bandwidth: kernel width sigma > 0.

    Returns:
        GaussianMixture whose score is the kernel score estimate.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ShapeMismatchError(f"batch must be (B, d) with B >= 1, got {batch.shape}")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    n = batch.shape[0]
    return GaussianMixture(np.full(n, 1.0 / n), batch, float(bandwidth) ** 2)


def kde_score(batch, bandwidth: float, x) -> np.ndarray:
    """Kernel score estimate at (B', d) query points.

    Raises DegenerateEvaluationError when every kernel underflows at some
    query (max log kernel below -700).
    """
    return mixture_score(batch_mixture(batch, bandwidth), x)


def kde_score_jacobian(batch, bandwidth: float, x) -> np.ndarray:
    return mixture_score_jacobian(batch_mixture(batch, bandwidth), x)


def kde_score_divergence(batch, bandwidth: float, x) -> np.ndarray:
    return mixture_score_divergence(batch_mixture(batch, bandwidth), x)


def kde_score_divergence_gradient(batch, bandwidth: float, x) -> np.ndarray:
    return mixture_score_divergence_gradient(batch_mixture(batch, bandwidth), x)
