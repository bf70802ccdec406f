"""Forward-mode automatic differentiation with nestable dual numbers.

A Dual carries a primal part and a single tangent part; both are numpy arrays
or, for higher-order derivatives, Duals themselves. All arithmetic and the
math helpers below dispatch recursively, so second and third derivatives fall
out of nesting jvp calls. This module is the generic fallback for spatial and
parameter derivatives of vector fields; analytic fast paths override it where
closed forms exist.

Functions whose derivative has a kink (abs, relu, maximum) differentiate the
selected branch, which is correct almost everywhere and standard for
forward-mode AD.
"""

from __future__ import annotations

import numpy as np


class Dual:
    """Primal/tangent pair supporting elementwise numpy-style arithmetic."""

    __slots__ = ("val", "dot")

    # Make ndarray <op> Dual defer to the reflected methods below instead of
    # silently broadcasting into object arrays.
    __array_ufunc__ = None

    def __init__(self, val, dot):
        self.val = val
        self.dot = dot

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.dot + other.dot)
        return Dual(self.val + other, self.dot)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.dot - other.dot)
        return Dual(self.val - other, self.dot)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.dot)

    def __neg__(self):
        return Dual(-self.val, -self.dot)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.dot * other.val + self.val * other.dot)
        return Dual(self.val * other, self.dot * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            return Dual(self.val * inv, (self.dot - self.val * inv * other.dot) * inv)
        return Dual(self.val / other, self.dot / other)

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        return Dual(other * inv, -other * inv * inv * self.dot)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("Dual.__pow__ supports constant exponents only")
        if exponent == 2:
            return Dual(self.val * self.val, 2.0 * self.val * self.dot)
        v = self.val ** exponent
        return Dual(v, exponent * self.val ** (exponent - 1) * self.dot)

    def __getitem__(self, idx):
        dot = self.dot[idx] if not np.isscalar(self.dot) else self.dot
        return Dual(self.val[idx], dot)

    def __repr__(self):
        return f"Dual(val={self.val!r}, dot={self.dot!r})"


def primal(x):
    """Innermost primal value of a possibly nested Dual."""
    while isinstance(x, Dual):
        x = x.val
    return x


def _zero_like(x):
    if isinstance(x, Dual):
        return Dual(_zero_like(x.val), _zero_like(x.dot))
    return np.zeros_like(np.asarray(x, dtype=float))


def where(cond, a, b):
    """Branch select on a boolean (primal) condition; recurses into Duals."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        if not isinstance(a, Dual):
            a = Dual(a, _zero_like(b.dot) * 0.0 if isinstance(b.dot, Dual) else 0.0)
        if not isinstance(b, Dual):
            b = Dual(b, _zero_like(a.dot) * 0.0 if isinstance(a.dot, Dual) else 0.0)
        return Dual(where(cond, a.val, b.val), where(cond, a.dot, b.dot))
    return np.where(cond, a, b)


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.val)
        return Dual(e, e * x.dot)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.val), x.dot / x.val)
    return np.log(x)


def log1p(x):
    if isinstance(x, Dual):
        return Dual(log1p(x.val), x.dot / (1.0 + x.val))
    return np.log1p(x)


def sqrt(x):
    if isinstance(x, Dual):
        s = sqrt(x.val)
        return Dual(s, 0.5 * x.dot / s)
    return np.sqrt(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.val), cos(x.val) * x.dot)
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.val), -sin(x.val) * x.dot)
    return np.cos(x)


def tanh(x):
    if isinstance(x, Dual):
        t = tanh(x.val)
        return Dual(t, (1.0 - t * t) * x.dot)
    return np.tanh(x)


def absolute(x):
    return where(primal(x) >= 0, x, -x)


def relu(x):
    # >= keeps the branch choice consistent with absolute() at exactly 0,
    # so softplus'(0) composes to sigmoid(0) = 1/2.
    return where(primal(x) >= 0, x, x * 0.0)


def maximum(a, b):
    return where(primal(a) >= primal(b), a, b)


def sigmoid(x):
    # Overflow-safe on both tails: only exp(-|x|) is ever formed.
    e = exp(-absolute(x))
    return where(primal(x) >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    return log1p(exp(-absolute(x))) + relu(x)


def logsumexp(terms):
    """Stable log(sum(exp(t))) over a list of dual-friendly terms.

    The stabilizing shift is the elementwise max of the primal parts, treated
    as a constant (its derivative contribution cancels exactly).
    """
    shift = np.maximum.reduce([primal(t) for t in terms])
    total = None
    for t in terms:
        e = exp(t - shift)
        total = e if total is None else total + e
    return log(total) + shift


def seed(coords, index):
    """Copy of a coordinate list with a unit tangent on one coordinate.

    Works at any nesting level: coordinates may already be Duals, in which
    case the new tangent lives one level above them (the seed directions are
    constants with respect to every other level).
    """
    out = []
    for j, xj in enumerate(coords):
        ones = np.ones_like(primal(xj))
        out.append(Dual(xj, ones if j == index else ones * 0.0))
    return out


def _tangent(output):
    if isinstance(output, Dual):
        return output.dot
    return np.zeros_like(primal(output))


def _coords(x):
    x = np.asarray(x, dtype=float)
    return [x[:, j] for j in range(x.shape[1])], x.shape[1]


def components_jacobian(fn, coords):
    """Jacobian columns of a components-style function, dual-friendly.

    Args:
        fn: maps a list of d coordinate arrays to a list of k outputs,
            written with this module's math helpers.
        coords: list of d coordinate arrays (base arrays or Duals).

    Returns:
        (values, columns): outputs of fn at coords, and a list of d lists of
        k tangents, columns[j][i] = d fn_i / d x_j. Entries are one nesting
        level below the seeded inputs.
    """
    values = None
    columns = []
    for j in range(len(coords)):
        outs = fn(seed(coords, j))
        if values is None:
            values = [o.val if isinstance(o, Dual) else o for o in outs]
        columns.append([_tangent(o) for o in outs])
    return values, columns


def components_divergence(fn, coords):
    """Trace of the Jacobian of a square components-style function."""
    div = None
    for j in range(len(coords)):
        outs = fn(seed(coords, j))
        dj = _tangent(outs[j])
        div = dj if div is None else div + dj
    return div


def value_and_jacobian(fn, x):
    """fn values and dense Jacobian at batched points.

    Args:
        fn: components-style function (d coordinate arrays -> k outputs).
        x: (B, d) evaluation points.

    Returns:
        values (B, k) and J (B, k, d) with J[b, i, j] = d fn_i / d x_j.
    """
    coords, _ = _coords(x)
    values, columns = components_jacobian(fn, coords)
    jac = np.stack([np.stack(col, axis=-1) for col in columns], axis=-1)
    return np.stack(values, axis=-1), jac


def divergence(fn, x):
    """Divergence of a square components-style function at (B, d) points."""
    coords, _ = _coords(x)
    return components_divergence(fn, coords)


def divergence_gradient(fn, x):
    """Gradient of the divergence, via one extra nesting level."""
    coords, d = _coords(x)
    grads = []
    for k in range(d):
        outer = seed(coords, k)
        div_k = components_divergence(fn, outer)
        grads.append(_tangent(div_k))
    return np.stack(grads, axis=-1)


def scalar_gradient(fn, x):
    """Gradient of a scalar components-style function (returns (B, d))."""
    coords, d = _coords(x)
    grads = []
    for j in range(d):
        out = fn(seed(coords, j))
        grads.append(_tangent(out))
    return np.stack(grads, axis=-1)


def _peel(out, levels):
    """Extract the `levels`-times-nested tangent of a Dual tower."""
    for _ in range(levels):
        if isinstance(out, Dual):
            out = out.dot
        else:
            out = np.zeros_like(primal(out))
    return primal(out)


def scalar_hessian(fn, x):
    """Hessian of a scalar components-style function (returns (B, d, d))."""
    coords, d = _coords(x)
    rows = []
    for i in range(d):
        outer = seed(coords, i)
        cols = []
        for j in range(d):
            out = fn(seed(outer, j))
            cols.append(_peel(out, 2))
        rows.append(np.stack(cols, axis=-1))
    return np.stack(rows, axis=-2)


def scalar_grad_laplacian(fn, x):
    """Gradient of the Laplacian of a scalar function (returns (B, d)).

    Third derivatives via triple nesting: component k is
    sum_j d^3 fn / (dx_k dx_j dx_j).
    """
    coords, d = _coords(x)
    out_cols = []
    for k in range(d):
        level1 = seed(coords, k)
        acc = None
        for j in range(d):
            level3 = seed(seed(level1, j), j)
            t = _peel(fn(level3), 3)
            acc = t if acc is None else acc + t
        out_cols.append(acc)
    return np.stack(out_cols, axis=-1)
