"""Grid-based finite-difference ground truth for flux-matched fields.

Everything here lives on a small tensor-product grid carrying node values of
the target density.  The discretization is deliberately simple and uniform:

* flux divergences use face-averaged central differences with zero-flux
  outer faces, so the discrete total flux telescopes to exactly zero;
* the weighted Laplacian div(p grad .) is assembled from the same face
  fluxes, which makes it symmetric negative-semidefinite with the constant
  vector as its exact null space;
* the diffusion generator Delta + f . grad is written as
  (1/p) div(p grad .) + (f - grad_h log p) . grad_h, which reduces the score
  case to the flux form above and is therefore exactly self-adjoint under
  density weights (a plain Delta + s . grad stencil misses self-adjointness
  by O(h^2), far above the tolerances asserted downstream).

These routines form the slow, independent route against which the Monte
Carlo losses and simulators are validated; nothing in here shares code with
the sampling path beyond the density itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .densities import mixture_score, sample_mixture
from .errors import ShapeMismatchError, SolverError, UndefinedAlignmentError
from .simulate import ou_langevin_step

__all__ = [
    "GridOperator",
    "flux_divergence",
    "stream_field",
    "projected_fisher_divergence",
    "discretize_generator",
    "solve_poisson_mean_constrained",
    "default_mixing_observables",
    "mixing_speed_metric",
    "triangle_alignment",
    "jacobian_skewness",
    "stationarity_violation",
    "residual_autocorrelation_integral",
    "export_grid_csv",
]


# --------------------------------------------------------------------------- grid


@dataclass(frozen=True)
class GridOperator:
    """Uniform 1-D or 2-D evaluation grid with positive density node values.

    ``weights()`` are the density values normalized to sum to one; every
    metric below is an expectation under these weights.  Grids are chosen
    wide enough that the density is negligible at the boundary, which is
    what justifies the zero-flux boundary treatment of the stencils.
    """

    bounds: tuple
    resolution: tuple
    density_values: np.ndarray

    def __post_init__(self):
        bounds, res = _normalize_layout(self.bounds, self.resolution)
        ndim = len(bounds)
        if ndim not in (1, 2):
            raise ValueError(f"only 1-D and 2-D grids are supported, got {ndim}-D")
        if len(res) != ndim:
            raise ShapeMismatchError("resolution must give one size per dimension")
        if any(n < 8 for n in res):
            raise ValueError(f"resolution must be at least 8 per dimension, got {res}")
        for lo, hi in bounds:
            if not hi > lo:
                raise ValueError(f"bounds must satisfy lo < hi, got ({lo}, {hi})")
        dens = np.asarray(self.density_values, dtype=float).reshape(res)
        if not np.all(np.isfinite(dens)) or np.any(dens <= 0):
            raise ValueError("density must be finite and strictly positive at every node")
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "density_values", dens)

    @classmethod
    def from_density(cls, bounds, resolution, density_fn) -> "GridOperator":
        """Build a grid by evaluating ``density_fn`` on the (N, d) nodes."""
        b, res = _normalize_layout(bounds, resolution)
        mesh = np.meshgrid(*(np.linspace(lo, hi, n) for (lo, hi), n in zip(b, res)),
                           indexing="ij")
        nodes = np.column_stack([m.ravel() for m in mesh])
        return cls(b, res, density_fn(nodes))

    @classmethod
    def oracle_grid_1d(cls, density_fn, half_width: float = 8.0,
                       resolution: int = 401) -> "GridOperator":
        """Default fine 1-D validation grid (401 nodes over +-8 std)."""
        return cls.from_density(((-half_width, half_width),), resolution, density_fn)

    @classmethod
    def oracle_grid_2d(cls, density_fn, extent: float = 6.0,
                       resolution: int = 81) -> "GridOperator":
        """Default fine 2-D validation grid (81 x 81 over the +-6 box)."""
        b = ((-extent, extent), (-extent, extent))
        return cls.from_density(b, resolution, density_fn)

    @classmethod
    def metric_grid_2d(cls, density_fn, extent: float = 5.5,
                       resolution: int = 25) -> "GridOperator":
        """Coarse 25 x 25 reproduction grid over the +-5.5 box."""
        b = ((-extent, extent), (-extent, extent))
        return cls.from_density(b, resolution, density_fn)

    @property
    def ndim(self) -> int:
        return len(self.bounds)

    @property
    def shape(self) -> tuple:
        return self.resolution

    @property
    def node_count(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def spacing(self) -> tuple:
        return tuple((hi - lo) / (n - 1)
                     for (lo, hi), n in zip(self.bounds, self.resolution))

    def axes(self) -> tuple:
        return tuple(np.linspace(lo, hi, n)
                     for (lo, hi), n in zip(self.bounds, self.resolution))

    def nodes(self) -> np.ndarray:
        """All grid nodes as an (N, d) array in C order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def weights(self) -> np.ndarray:
        """Normalized density weights, grid shaped."""
        return self.density_values / self.density_values.sum()

    def evaluate_scalar(self, fn) -> np.ndarray:
        """fn on (N, d) nodes, reshaped to the grid."""
        return np.asarray(fn(self.nodes()), dtype=float).reshape(self.shape)

    def evaluate_field(self, field) -> np.ndarray:
        """Vector field values on the nodes, shaped (*shape, d).

        Accepts anything with ``.evaluate`` or a plain callable on (N, d).
        """
        fn = field.evaluate if hasattr(field, "evaluate") else field
        out = np.asarray(fn(self.nodes()), dtype=float)
        return out.reshape(self.shape + (self.ndim,))

    def evaluate_jacobian(self, field) -> np.ndarray:
        """Analytic Jacobians on the nodes, shaped (*shape, d, d)."""
        jac = np.asarray(field.jacobian(self.nodes()), dtype=float)
        return jac.reshape(self.shape + (self.ndim, self.ndim))


def _normalize_layout(bounds, resolution):
    """Accept a bare (lo, hi) pair for 1-D and scalar resolutions."""
    b = tuple(bounds)
    if b and np.isscalar(b[0]):
        b = (b,)
    b = tuple((float(lo), float(hi)) for lo, hi in b)
    if np.isscalar(resolution):
        res = (int(resolution),) * len(b)
    else:
        res = tuple(int(n) for n in resolution)
    return b, res


def _as_grid(grid: GridOperator, values, trailing=()) -> np.ndarray:
    """Normalize node data given grid shaped or flat (N, ...) to grid shaped."""
    arr = np.asarray(values, dtype=float)
    want = grid.shape + tuple(trailing)
    flat = (grid.node_count,) + tuple(trailing)
    if arr.shape == want:
        return arr
    if arr.shape == flat:
        return arr.reshape(want)
    raise ShapeMismatchError(
        f"expected node values shaped {want} or {flat}, got {arr.shape}")


# ------------------------------------------------------------ flux divergence


def _axis_face_difference(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """One divergence term: face-averaged flux differences with zero outer faces.

    Interior rows reduce to the plain central difference; the outer faces
    carry zero flux, so summing the output over the grid telescopes to zero
    exactly.  The same operator doubles as the rotated-gradient stencil in
    :func:`stream_field`, which is what makes those fields exactly flux free.
    """
    lo = [slice(None)] * values.ndim
    hi = [slice(None)] * values.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    faces = 0.5 * (values[tuple(lo)] + values[tuple(hi)])
    pad = [(0, 0)] * values.ndim
    pad[axis] = (1, 1)
    return np.diff(np.pad(faces, pad), axis=axis) / h


def flux_divergence(grid: GridOperator, field_values) -> np.ndarray:
    """Discrete div(p f) from node field values, grid shaped output."""
    f = _as_grid(grid, field_values, (grid.ndim,))
    out = np.zeros(grid.shape)
    for axis, h in enumerate(grid.spacing):
        out += _axis_face_difference(grid.density_values * f[..., axis], h, axis)
    return out


def stream_field(grid: GridOperator, psi) -> np.ndarray:
    """Velocity field whose discrete flux divergence is exactly zero (2-D).

    The flux p v is the rotated discrete gradient of the stream function
    ``psi``, built with the same stencil :func:`flux_divergence` applies per
    axis.  Operators acting along different tensor axes commute, so the
    discrete flux divergence cancels to machine precision for any ``psi``;
    these fields certify the gauge invariance of the projected Fisher
    divergence on the grid itself rather than up to discretization error.
    """
    if grid.ndim != 2:
        raise ShapeMismatchError("stream fields need a 2-D grid")
    psi = _as_grid(grid, psi)
    h0, h1 = grid.spacing
    flux0 = -_axis_face_difference(psi, h1, 1)
    flux1 = +_axis_face_difference(psi, h0, 0)
    return np.stack([flux0, flux1], axis=-1) / grid.density_values[..., None]


# ------------------------------------------------- elliptic operator and PFD


def _difference_matrix(n: int, h: float) -> sparse.csr_matrix:
    """(n-1, n) forward difference matrix mapping nodes to interior faces."""
    one = np.ones(n - 1) / h
    return sparse.diags([-one, one], [0, 1], shape=(n - 1, n), format="csr")


def _axis_lift(grid: GridOperator, mat, axis: int) -> sparse.csr_matrix:
    """Kronecker-lift a 1-D operator to act along one axis of the grid."""
    mats = [sparse.identity(n, format="csr") for n in grid.resolution]
    mats[axis] = mat
    out = mats[0]
    for m in mats[1:]:
        out = sparse.kron(out, m, format="csr")
    return out


def _weighted_laplacian(grid: GridOperator) -> sparse.csr_matrix:
    """Sparse A = div(p grad .), zero-flux faces; symmetric, A 1 = 0 exactly."""
    p = grid.density_values
    total = None
    for axis, (n, h) in enumerate(zip(grid.resolution, grid.spacing)):
        G = _axis_lift(grid, _difference_matrix(n, h), axis)
        lo = [slice(None)] * p.ndim
        hi = [slice(None)] * p.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        pf = 0.5 * (p[tuple(lo)] + p[tuple(hi)]).ravel()
        term = (G.T @ sparse.diags(pf) @ G).tocsr()
        total = term if total is None else total + term
    return (-total).tocsr()


def projected_fisher_divergence(grid: GridOperator, u_values,
                                rtol: float = 1e-10) -> float:
    """Density-weighted energy of the gradient part of u's flux divergence.

    Solves div(p grad phi) = div(p u) for a mean-zero potential phi by
    Jacobi-preconditioned conjugate gradients on the symmetric semidefinite
    face-flux operator (constants projected out), then returns
    sum_i w_i ||grad phi(x_i)||^2.  Adding any field with zero discrete flux
    divergence to u leaves the right-hand side bitwise unchanged, so the
    result is gauge invariant by construction.
    """
    u = _as_grid(grid, u_values, (grid.ndim,))
    rhs = flux_divergence(grid, u).ravel()
    if not np.any(rhs):
        return 0.0
    K = (-_weighted_laplacian(grid)).tocsr()        # positive semidefinite
    b = -(rhs - rhs.mean())
    dinv = 1.0 / K.diagonal()
    precon = spla.LinearOperator(K.shape, matvec=lambda v: dinv * v)
    apply_k = spla.LinearOperator(K.shape, matvec=lambda v: K @ (v - v.mean()))
    maxiter = 10 * grid.node_count
    phi, info = spla.cg(apply_k, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=precon)
    if info != 0:
        residual = float(np.linalg.norm(K @ (phi - phi.mean()) - b))
        raise SolverError(
            f"conjugate gradients did not reach rtol={rtol} within "
            f"{maxiter} iterations (residual norm {residual:.3e})")
    phi = (phi - phi.mean()).reshape(grid.shape)
    grads = np.gradient(phi, *grid.spacing)
    if grid.ndim == 1:
        grads = [grads]
    energy = sum(g**2 for g in grads)
    return float(np.sum(grid.weights() * energy))


# ----------------------------------------------------- generator and Poisson


def _central_matrix(n: int, h: float) -> sparse.csr_matrix:
    """Central first-derivative matrix; mirror ghosts zero the boundary rows."""
    off = np.ones(n - 1) / (2 * h)
    mat = sparse.diags([-off, off], [-1, 1]).tolil()
    mat[0, :] = 0.0
    mat[n - 1, :] = 0.0
    return mat.tocsr()


def discretize_generator(grid: GridOperator, drift=None) -> sparse.csr_matrix:
    """Sparse diffusion generator L = Delta + drift . grad on the grid nodes.

    With ``drift=None`` the drift is the score of the grid density and L is
    assembled as (1/p) div(p grad .), which is exactly self-adjoint in the
    density-weighted inner product and annihilates constants exactly.  A
    general drift adds (drift - grad_h log p) . grad_h on top, which keeps
    constants in the null space and reduces to the self-adjoint form when
    the drift is the score.  Nodes are ordered C-style (last axis fastest).
    """
    p_flat = grid.density_values.ravel()
    L = sparse.diags(1.0 / p_flat) @ _weighted_laplacian(grid)
    if drift is not None:
        f = _as_grid(grid, drift, (grid.ndim,))
        slog = np.gradient(np.log(grid.density_values), *grid.spacing)
        if grid.ndim == 1:
            slog = [slog]
        for axis, (n, h) in enumerate(zip(grid.resolution, grid.spacing)):
            residual_drift = (f[..., axis] - slog[axis]).ravel()
            D = _axis_lift(grid, _central_matrix(n, h), axis)
            L = L + sparse.diags(residual_drift) @ D
    return L.tocsr()


def solve_poisson_mean_constrained(L, rhs, weights) -> np.ndarray:
    """Solve -L psi = rhs with the weighted mean of psi pinned to zero.

    ``rhs`` must be centered (weighted mean below 1e-8).  The singular
    system is solved through the bordered sparse LU factorization
    [[-L, 1], [w^T, 0]]; the scalar multiplier absorbs the component of rhs
    outside the range of L.  For the self-adjoint score-case generator that
    component is zero to machine precision, so -L psi reproduces rhs to the
    solver tolerance; for a general drift it is an O(h^2) constant offset
    (the grid's stationary vector differs from the density at that order).
    Raises SolverError when the factorization residual is out of contract.
    """
    rhs_arr = np.asarray(rhs, dtype=float)
    shape = rhs_arr.shape
    b = rhs_arr.ravel()
    w = np.asarray(weights, dtype=float).ravel()
    n = L.shape[0]
    if b.shape != (n,) or w.shape != (n,):
        raise ShapeMismatchError(
            f"rhs and weights must have {n} node values, got {b.shape} and {w.shape}")
    wmean = float(np.dot(w, b)) / float(w.sum())
    if abs(wmean) > 1e-8:
        raise ValueError(
            f"rhs must be centered: weighted mean {wmean:.3e} exceeds 1e-8")
    one = sparse.csr_matrix(np.ones((n, 1)))
    row = sparse.csr_matrix(w.reshape(1, n))
    bordered = sparse.bmat([[-L, one], [row, None]], format="csc")
    solution = spla.splu(bordered).solve(np.concatenate([b, [0.0]]))
    psi, mu = solution[:n], solution[n]
    block_residual = (-L) @ psi + mu - b
    scale = max(1.0, float(np.sqrt(np.dot(w, b**2) / w.sum())))
    defect = float(np.sqrt(np.dot(w, block_residual**2) / w.sum()))
    gauge = abs(float(np.dot(w, psi)))
    if defect > 1e-10 * scale or gauge > 1e-10 * scale:
        raise SolverError(
            f"bordered solve out of contract: residual {defect:.3e}, "
            f"constraint {gauge:.3e}")
    return psi.reshape(shape)


# ------------------------------------------------------------------- metrics


def default_mixing_observables(grid: GridOperator) -> list:
    """Coordinates, radius and angle components; the origin node maps to 0."""
    if grid.ndim != 2:
        raise ShapeMismatchError("mixing observables need a 2-D grid")
    nodes = grid.nodes()
    x1 = nodes[:, 0].reshape(grid.shape)
    x2 = nodes[:, 1].reshape(grid.shape)
    radius = np.sqrt(x1**2 + x2**2)
    safe = np.where(radius > 1e-12, radius, 1.0)
    cos_angle = np.where(radius > 1e-12, x1 / safe, 0.0)
    sin_angle = np.where(radius > 1e-12, x2 / safe, 0.0)
    return [x1, x2, radius, cos_angle, sin_angle]


def mixing_speed_metric(grid: GridOperator, drift, observables=None) -> float:
    """Inverse mean integrated autocorrelation time over the observable set.

    For each observable the autocorrelation time is obtained from a
    mean-constrained Poisson solve against the discretized generator of the
    drift: tau = 2 <phi - E[phi], psi>_w / Var_w(phi).  Larger values mean
    faster mixing.  Solver failures propagate.
    """
    if grid.ndim != 2:
        raise ShapeMismatchError("the mixing metric is defined on 2-D grids")
    L = discretize_generator(grid, drift)
    w = grid.weights().ravel()
    taus = []
    for phi in (observables if observables is not None else
                default_mixing_observables(grid)):
        phi = _as_grid(grid, phi).ravel()
        centered = phi - np.dot(w, phi)
        variance = float(np.dot(w, centered**2))
        # rounding leaves ~eps*|phi| in a constant observable; catch those too
        floor = 1e-10 * max(float(np.abs(phi).max()), 1e-30)
        if variance <= floor**2:
            raise ValueError("mixing observables must be non-constant on the grid")
        psi = solve_poisson_mean_constrained(L, centered, w)
        taus.append(2.0 * float(np.dot(w, centered * psi)) / variance)
    return 1.0 / float(np.mean(taus))


def triangle_alignment(grid: GridOperator, u_values, reference_values) -> float:
    """Density-weighted cosine between a perturbation and a reference field."""
    u = _as_grid(grid, u_values, (grid.ndim,))
    ref = _as_grid(grid, reference_values, (grid.ndim,))
    w = grid.weights()
    inner = float(np.sum(w * np.sum(u * ref, axis=-1)))
    norm_u = float(np.sqrt(np.sum(w * np.sum(u * u, axis=-1))))
    norm_ref = float(np.sqrt(np.sum(w * np.sum(ref * ref, axis=-1))))
    if norm_u == 0.0 or norm_ref == 0.0:
        raise UndefinedAlignmentError(
            "alignment is undefined for a field with zero weighted norm")
    return inner / (norm_u * norm_ref)


def jacobian_skewness(grid: GridOperator, jacobians) -> float:
    """Weighted squared antisymmetric Jacobian component (2-D fields)."""
    if grid.ndim != 2:
        raise ShapeMismatchError("Jacobian skewness is defined for 2-D fields")
    jac = _as_grid(grid, jacobians, (2, 2))
    antisym = jac[..., 0, 1] - jac[..., 1, 0]
    return float(np.sum(grid.weights() * 0.5 * antisym**2))


def stationarity_violation(grid: GridOperator, u_values,
                           divergence=None, score=None) -> float:
    """Weighted RMS of the stationarity residual r = div u + u . score.

    Analytic divergences and scores are used when supplied; otherwise both
    fall back to second-order grid stencils on the node values.
    """
    u = _as_grid(grid, u_values, (grid.ndim,))
    if divergence is None:
        div = np.zeros(grid.shape)
        for axis, h in enumerate(grid.spacing):
            div += np.gradient(u[..., axis], h, axis=axis)
    else:
        div = _as_grid(grid, divergence)
    if score is None:
        slog = np.gradient(np.log(grid.density_values), *grid.spacing)
        if grid.ndim == 1:
            slog = [slog]
        s = np.stack(slog, axis=-1)
    else:
        s = _as_grid(grid, score, (grid.ndim,))
    residual = div + np.sum(u * s, axis=-1)
    return float(np.sqrt(np.sum(grid.weights() * residual**2)))


# ----------------------------------------------- Monte Carlo companion check


def residual_autocorrelation_integral(u_field, gmm, horizon_grid,
                                      chains_per_point: int, rng,
                                      max_step: float = 0.05) -> float:
    """Time integral of E[r(x_0) r(x_t)] along exact-score diffusion chains.

    The stationarity residual r = div u + u . score is recorded at t = 0 and
    at every horizon grid point while the chains evolve under the unit-scale
    score diffusion; the autocorrelation curve is then integrated by the
    trapezoid rule.  This Monte Carlo route is the companion to
    :func:`projected_fisher_divergence`: the two agree on fields whose
    residual decorrelates within the horizon window.
    """
    grid_t = np.asarray(horizon_grid, dtype=float)
    if grid_t.ndim != 1 or grid_t.size < 2:
        raise ShapeMismatchError("horizon grid must be a 1-D array of times")
    if grid_t[0] < 0 or np.any(np.diff(grid_t) <= 0):
        raise ValueError("horizon grid must be nonnegative and strictly increasing")
    if chains_per_point < 2:
        raise ValueError("need at least 2 chains")

    def residual(points):
        div = u_field.divergence(points)
        return div + np.sum(u_field.evaluate(points) * mixture_score(gmm, points),
                            axis=1)

    score_fn = lambda pts: mixture_score(gmm, pts)
    x = sample_mixture(gmm, chains_per_point, rng)
    r0 = residual(x)
    curve = []
    t_now = 0.0
    for t in grid_t:
        span = t - t_now
        if span > 0:
            steps = int(np.ceil(span / max_step))
            for _ in range(steps):
                x = ou_langevin_step(x, score_fn, span / steps, 1.0, rng)
        t_now = t
        curve.append(float(np.mean(r0 * residual(x))))
    return float(np.trapezoid(curve, grid_t))


# ------------------------------------------------------------------- exports


def export_grid_csv(grid: GridOperator, values, path) -> None:
    """Write node coordinates plus values as a plain CSV table."""
    arr = np.asarray(values, dtype=float).reshape(grid.node_count, -1)
    table = np.column_stack([grid.nodes(), arr])
    np.savetxt(path, table, delimiter=",", fmt="%.17g")
