"""B-spline basis systems, Gram matrices and smoothing of raw time courses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import DomainError, IllPosedSmoothingError, InputError

DEFAULT_RIDGE = 1e-8


@dataclass(frozen=True)
class BasisSystem:
    """Clamped B-spline basis on a closed interval.

    Parameters
    ----------
    interval : (float, float)
        ``(t_min, t_max)`` with ``t_min < t_max``.
    order : int
        Polynomial order (degree + 1); 4 gives cubic splines.
    interior_knots : sequence of float
        Strictly inside the interval, non-decreasing.
    """

    interval: tuple
    order: int = 4
    interior_knots: tuple = ()
    gram: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.interval)
        if not lo < hi:
            raise InputError(f"basis interval must satisfy t_min < t_max, got {self.interval}")
        if int(self.order) != self.order or self.order < 1:
            raise InputError(f"basis order must be an integer >= 1, got {self.order}")
        knots = tuple(float(k) for k in self.interior_knots)
        if any(not lo < k < hi for k in knots):
            raise InputError("interior knots must lie strictly inside the interval")
        if any(b < a for a, b in zip(knots, knots[1:])):
            raise InputError("interior knots must be sorted")
        object.__setattr__(self, "interval", (lo, hi))
        object.__setattr__(self, "order", int(self.order))
        object.__setattr__(self, "interior_knots", knots)
        object.__setattr__(self, "gram", gram_matrix(self))

    @classmethod
    def uniform(cls, interval, n_basis: int, order: int = 4) -> "BasisSystem":
        """Basis with ``n_basis`` functions and equally spaced interior knots."""
        n_interior = n_basis - order
        if n_interior < 0:
            raise InputError(f"n_basis={n_basis} is smaller than order={order}")
        lo, hi = interval
        knots = np.linspace(lo, hi, n_interior + 2)[1:-1]
        return cls((lo, hi), order, tuple(knots))

    @property
    def M(self) -> int:
        return len(self.interior_knots) + self.order

    @property
    def knot_vector(self) -> np.ndarray:
        lo, hi = self.interval
        k = self.order
        return np.concatenate([np.full(k, lo), self.interior_knots, np.full(k, hi)])

    def __call__(self, t) -> np.ndarray:
        return evaluate_basis(self, t)

    def to_dict(self) -> dict:
        return {
            "interval": list(self.interval),
            "order": self.order,
            "interior_knots": list(self.interior_knots),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSystem":
        return cls(tuple(d["interval"]), d["order"], tuple(d["interior_knots"]))


@dataclass(frozen=True)
class RawCurve:
    """Discrete observations of one predictor for one sample.

    Missing observations are simply left out of both arrays.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if times.shape != values.shape:
            raise InputError("times and values must have the same length")
        if times.size < 1:
            raise InputError("a curve needs at least one observation")
        if np.any(np.diff(times) <= 0):
            raise InputError("curve times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise InputError("curve values must be finite; drop missing points instead")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)


def evaluate_basis(basis: BasisSystem, t) -> np.ndarray:
    """Evaluate all basis functions at ``t``.

    Returns an array of shape ``(M,)`` for scalar ``t`` and ``(len(t), M)``
    otherwise. Uses the triangular Cox-de Boor scheme on the span that
    contains each point; the right end of the interval belongs to the last
    non-degenerate span.
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = basis.interval
    if np.any((t < lo) | (t > hi)) or np.any(~np.isfinite(t)):
        bad = t[(t < lo) | (t > hi) | ~np.isfinite(t)][0]
        raise DomainError(f"t={bad} is outside the basis interval [{lo}, {hi}]")

    k = basis.order
    knots = basis.knot_vector
    M = basis.M
    # span index s with knots[s] <= t < knots[s+1], k-1 <= s <= M-1
    span = np.searchsorted(knots, t, side="right") - 1
    span = np.clip(span, k - 1, M - 1)

    n = t.size
    vals = np.zeros((n, k))
    vals[:, 0] = 1.0
    left = np.zeros((n, k))
    right = np.zeros((n, k))
    for d in range(1, k):
        left[:, d] = t - knots[span + 1 - d]
        right[:, d] = knots[span + d] - t
        saved = np.zeros(n)
        for r in range(d):
            denom = right[:, r + 1] + left[:, d - r]
            temp = vals[:, r] / denom
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, d - r] * temp
        vals[:, d] = saved

    out = np.zeros((n, M))
    cols = span[:, None] - (k - 1) + np.arange(k)[None, :]
    np.put_along_axis(out, cols, vals, axis=1)
    return out[0] if scalar else out


def gram_matrix(basis: BasisSystem) -> np.ndarray:
    """Gram matrix of basis cross-products over the interval.

    Gauss-Legendre with ``order`` nodes on each knot span integrates the
    degree ``2*order - 2`` integrand exactly.
    """
    k = basis.order
    breaks = np.unique(np.concatenate([basis.interval, basis.interior_knots]))
    nodes, weights = np.polynomial.legendre.leggauss(k)
    M = len(basis.interior_knots) + k
    G = np.zeros((M, M))
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        t = half * nodes + 0.5 * (a + b)
        Phi = evaluate_basis(basis, t)
        G += (Phi * (half * weights)[:, None]).T @ Phi
    return 0.5 * (G + G.T)


def difference_penalty(M: int, order: int = 2) -> np.ndarray:
    """Difference operator D with ``(M - order)`` rows (empty when M <= order)."""
    if M <= order:
        return np.zeros((0, M))
    return np.diff(np.eye(M), n=order, axis=0)


def smooth_observations(
    curve: RawCurve,
    basis: BasisSystem,
    ridge: float = DEFAULT_RIDGE,
    name: Optional[str] = None,
) -> np.ndarray:
    """Penalized least-squares basis coefficients for one curve.

    Minimizes ``sum_k (values_k - phi(times_k)' w)^2 + ridge * ||D2 w||^2``
    with ``D2`` the second-order difference matrix.
    """
    if ridge < 0:
        raise InputError("ridge must be non-negative")
    label = f" for predictor '{name}'" if name else ""
    B = evaluate_basis(basis, curve.times)
    B = B.reshape(-1, basis.M)
    D = difference_penalty(basis.M)
    A = np.vstack([B, np.sqrt(ridge) * D]) if ridge > 0 else B
    rhs = np.concatenate([curve.values, np.zeros(A.shape[0] - B.shape[0])])
    w, _, rank, _ = np.linalg.lstsq(A, rhs, rcond=None)
    if rank < basis.M:
        raise IllPosedSmoothingError(
            f"smoothing is ill-posed{label}: {curve.times.size} observation(s) "
            f"cannot determine {basis.M} basis coefficients with ridge={ridge}"
        )
    return w


def smooth_many(
    curves: Sequence[RawCurve],
    basis: BasisSystem,
    ridge: float = DEFAULT_RIDGE,
    name: Optional[str] = None,
) -> np.ndarray:
    """Stack ``smooth_observations`` over samples into an ``n x M`` matrix."""
    return np.vstack([smooth_observations(c, basis, ridge, name) for c in curves])
