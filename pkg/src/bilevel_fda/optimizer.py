"""Sparse group lasso fitting of the multiclass functional logistic model.

The penalized objective (minimization form) is

    -loglik(b) + n(1-alpha) sum_j lam_j ||b_j|| + n alpha sum_j lam_j sum_l ||b_jl||

with ``lam_j = sqrt(M_j) * lam``. Each IRLS pass builds the weighted
least-squares working problem, orthogonalizes every weighted block by a
thin QR factorization and cycles over the blocks. A block is zeroed by the
group screen; otherwise its working subproblem is minimized exactly, using
the closed-form thresholding operator ``block_solve`` as the proximal map.
For an orthonormal block a single step reproduces ``block_solve``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ._kernels import block_descent, cd_sweeps
from .exceptions import InputError, RankDeficiencyError
from .model import (
    CoefficientSet,
    DesignMatrix,
    IRLSState,
    irls_linearize,
    linear_predictor,
    log_likelihood_from_predictor,
    score,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float
    alpha: float = 0.5

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise InputError(f"lambda must be a finite non-negative number, got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")

    def group_lambda(self, M: int) -> float:
        return float(np.sqrt(M) * self.lam)

    def thresholds(self, n: int, M: int):
        """``(group, sub-block)`` thresholds ``n(1-a)lam_j`` and ``n a lam_j``."""
        lam_j = self.group_lambda(M)
        return n * (1.0 - self.alpha) * lam_j, n * self.alpha * lam_j


@dataclass(frozen=True)
class SolverControls:
    tol: float = 1e-6
    inner_tol: float = 1e-6
    max_outer: int = 100
    max_inner: int = 1000
    max_halvings: int = 20
    block_tol: float = 1e-10
    block_max_iter: int = 100_000
    refresh_every: int = 50


@dataclass
class OrthoBlock:
    """Thin QR factors of one weighted design block."""

    Q: np.ndarray
    R: np.ndarray

    @property
    def A(self) -> np.ndarray:
        return self.Q @ self.R


@dataclass
class SolverReport:
    coefficients: CoefficientSet
    config: PenaltyConfig
    active_groups: np.ndarray
    active_subblocks: np.ndarray
    outer_iterations: int
    inner_sweeps: int
    converged: bool
    objective: float
    loglik: float
    objective_history: List[float] = field(default_factory=list)
    # working quantities at the final coefficients, used for the df
    state: Optional[IRLSState] = field(default=None, repr=False)
    ortho: Optional[list] = field(default=None, repr=False)
    r_tilde: Optional[list] = field(default=None, repr=False)

    @property
    def n_active(self) -> int:
        return int(self.active_groups.sum())


def penalty_value(coefs: CoefficientSet, config: PenaltyConfig, n: int) -> float:
    total = 0.0
    for B in coefs.blocks:
        lam_j = config.group_lambda(B.shape[1])
        total += n * (1.0 - config.alpha) * lam_j * np.linalg.norm(B)
        total += n * config.alpha * lam_j * np.linalg.norm(B, axis=1).sum()
    return float(total)


def weighted_design(W_half: np.ndarray, Z_tilde: np.ndarray, K: int) -> np.ndarray:
    """``W^{1/2} Z~_j`` from per-observation blocks ``(n, K, K)`` or a dense matrix."""
    if W_half.ndim == 2:
        return W_half @ Z_tilde
    n = W_half.shape[0]
    Zr = Z_tilde.reshape(K, n, -1)
    return np.einsum("ikl,lic->kic", W_half, Zr).reshape(K * n, -1)


def _expanded_weighted(W_half: np.ndarray, Z: np.ndarray) -> np.ndarray:
    # same as weighted_design(W_half, kron(I_K, Z)) without forming the kron
    n, K, _ = W_half.shape
    M = Z.shape[1]
    return np.einsum("ikl,im->kilm", W_half, Z).reshape(K * n, K * M)


def orthogonalize_block(W_half, Z_tilde, name=None, rtol=1e-10) -> OrthoBlock:
    """Thin QR of ``W^{1/2} Z~_j`` with a positive diagonal in R.

    ``W_half`` is either the ``(n, K, K)`` per-observation square roots or a
    dense ``nK x nK`` matrix.
    """
    if W_half.ndim == 3:
        K = W_half.shape[1]
        A = weighted_design(W_half, Z_tilde, K)
    else:
        A = W_half @ Z_tilde
    return _qr(A, name, rtol)


def _qr(A: np.ndarray, name=None, rtol=1e-10) -> OrthoBlock:
    rows, cols = A.shape
    label = f"group '{name}'" if name is not None else "design block"
    if rows < cols:
        raise RankDeficiencyError(
            f"{label} has {cols} columns but only {rows} weighted rows; "
            "use fewer basis functions or more samples"
        )
    Q, R = np.linalg.qr(A, mode="reduced")
    d = np.diag(R)
    scale = np.abs(d).max() if d.size else 0.0
    if scale == 0.0 or np.any(np.abs(d) <= rtol * scale):
        raise RankDeficiencyError(
            f"{label} is rank deficient after weighting; "
            "increase the smoothing ridge or use fewer basis functions"
        )
    sign = np.where(d < 0, -1.0, 1.0)
    return OrthoBlock(Q * sign[None, :], R * sign[:, None])


def _as_subblocks(r, M: int) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return r.reshape(-1, M)


def group_screen(r_tilde, config: PenaltyConfig, n: int, M: int) -> bool:
    """True when the whole block is set to zero.

    ``S_l = (||r_l|| - n alpha lam_j)_+`` and the block vanishes iff
    ``||S|| <= n (1-alpha) lam_j``.
    """
    group_thr, sub_thr = config.thresholds(n, M)
    norms = np.linalg.norm(_as_subblocks(r_tilde, M), axis=1)
    S = np.maximum(norms - sub_thr, 0.0)
    return bool(np.linalg.norm(S) <= group_thr)


def shrinkage_factors(r_tilde, config: PenaltyConfig, n: int, M: int) -> np.ndarray:
    """Per-sub-block scalars ``c_l`` with ``block_solve(r)_l = c_l r_l``.

    ``c_l = ||b*|| (||r_l|| - n a lam_j)_+ / ((||b*|| + n(1-a) lam_j) ||r_l||)``
    where ``||b*|| = (||h|| - n(1-a) lam_j)_+`` and ``h`` stacks the
    sub-block soft-thresholded residuals.
    """
    group_thr, sub_thr = config.thresholds(n, M)
    r = _as_subblocks(r_tilde, M)
    norms = np.linalg.norm(r, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    kept = np.maximum(norms - sub_thr, 0.0)
    h_norm = np.linalg.norm(kept)
    b_norm = max(h_norm - group_thr, 0.0)
    if b_norm == 0.0:
        return np.zeros(r.shape[0])
    return b_norm * kept / ((b_norm + group_thr) * safe)


def block_solve(r_tilde, config: PenaltyConfig, n: int, M: int) -> np.ndarray:
    """Closed-form minimizer of
    ``1/2||r - b||^2 + n(1-a)lam_j ||b|| + n a lam_j sum_l ||b_l||``.

    Returns a flat vector laid out like ``r_tilde``.
    """
    r = _as_subblocks(r_tilde, M)
    return (shrinkage_factors(r, config, n, M)[:, None] * r).ravel()


def _block_update(H, v, step, config, n, M, x0, controls):
    if group_screen(v, config, n, M):
        return np.zeros(v.size)
    group_thr, sub_thr = config.thresholds(n, M)
    if group_thr == 0.0 and sub_thr == 0.0:
        return np.linalg.solve(H, v)
    x, _ = block_descent(
        H, v, v.size // M, M, group_thr, sub_thr, x0, step,
        controls.block_tol, controls.block_max_iter,
    )
    return x


def solve_block_subproblem(H, v, config: PenaltyConfig, n: int, M: int, x0=None, controls=None):
    """Exact minimizer of ``1/2 b'Hb - v'b`` plus the block penalty.

    The block is zero iff ``group_screen(v)`` holds, ``v`` being the
    negative gradient at zero. With ``H = I`` the result is ``block_solve(v)``.
    """
    v = np.asarray(v, dtype=float).ravel()
    x0 = np.zeros(v.size) if x0 is None else np.asarray(x0, dtype=float).ravel()
    step = 1.0 / np.linalg.eigvalsh(H)[-1]
    return _block_update(np.asarray(H, dtype=float), v, step, config, n, M, x0, controls or SolverControls())


def penalized_objective(design: DesignMatrix, y, coefs: CoefficientSet, config: PenaltyConfig) -> float:
    """``-loglik + penalty``."""
    u = linear_predictor(design, coefs)
    return -log_likelihood_from_predictor(y, u) + penalty_value(coefs, config, design.n)


def _check_labels(y: np.ndarray) -> None:
    counts = y.sum(axis=0)
    ref = y.shape[0] - counts.sum()
    if np.any(counts == 0) or ref == 0:
        raise InputError("every class must occur at least once")


def null_intercepts(y: np.ndarray) -> np.ndarray:
    """Intercept-only maximum likelihood: log class-frequency ratios."""
    _check_labels(y)
    counts = y.sum(axis=0)
    return np.log(counts / (y.shape[0] - counts.sum()))


class _WorkingProblem:
    """Weighted least-squares problem of one IRLS pass."""

    def __init__(self, design, state, names=None):
        self.design = design
        self.state = state
        n, K = state.n, state.K
        names = names or [None] * design.p
        self.ortho = [
            _qr(_expanded_weighted(state.weights_sqrt, Z), name)
            for Z, name in zip(design.blocks, names)
        ]
        self.A = [o.A for o in self.ortho]
        self.H = [o.R.T @ o.R for o in self.ortho]
        # intercept block W^{1/2}(I_K (x) 1_n)
        self.A0 = state.weights_sqrt.transpose(1, 0, 2).reshape(K * n, K)

    def residual(self, coefs: CoefficientSet) -> np.ndarray:
        u = linear_predictor(self.design, coefs)
        return self.state.apply_sqrt(self.state.eta - u).ravel()

    def r_tilde(self, j: int, e: np.ndarray, b_j: np.ndarray) -> np.ndarray:
        o = self.ortho[j]
        return o.Q.T @ e + o.R @ b_j

    def solve(self, coefs, config, controls):
        base = self.state.apply_sqrt(self.state.eta).ravel()
        return coordinate_descent(self.A, self.A0, base, coefs, config, self.state.n, controls, self.H)


def coordinate_descent(A, A0, base, coefs: CoefficientSet, config: PenaltyConfig, n: int,
                       controls: Optional[SolverControls] = None, H=None):
    """Cyclic blockwise descent on ``1/2||base - A0 c - sum_j A_j b_j||^2 + penalty``.

    ``A`` lists the weighted expanded blocks (``Kn x KM_j``), ``A0`` the
    weighted intercept block. The intercepts take an exact least-squares
    step before every sweep; each block is then minimized exactly. Returns
    the new coefficients and the number of sweeps.
    """
    controls = controls or SolverControls()
    K = coefs.K
    H = H if H is not None else [Aj.T @ Aj for Aj in A]
    sizes = np.array([B.shape[1] for B in coefs.blocks], dtype=np.int64)
    thr = np.array([config.thresholds(n, int(M)) for M in sizes], dtype=float).reshape(-1, 2)
    widths = K * sizes
    offsets = np.concatenate([[0], np.cumsum(widths)]).astype(np.int64)
    H_offsets = np.concatenate([[0], np.cumsum(widths * widths)]).astype(np.int64)
    steps = np.array([1.0 / np.linalg.eigvalsh(Hj)[-1] for Hj in H])
    intercepts = coefs.intercepts.astype(float).copy()
    b = coefs.b.astype(float).copy()
    sweeps = cd_sweeps(
        np.concatenate([np.ascontiguousarray(Aj).ravel() for Aj in A]), offsets, sizes, K,
        np.concatenate([Hj.ravel() for Hj in H]), H_offsets,
        steps, thr[:, 0].copy(), thr[:, 1].copy(),
        np.ascontiguousarray(A0), np.linalg.inv(A0.T @ A0),
        np.asarray(base, dtype=float), intercepts, b,
        controls.inner_tol, controls.max_inner, controls.refresh_every,
        controls.block_tol, controls.block_max_iter,
    )
    blocks = [b[lo:hi].reshape(K, M) for lo, hi, M in zip(offsets[:-1], offsets[1:], sizes)]
    return CoefficientSet(intercepts, blocks), sweeps


def _flags(coefs: CoefficientSet):
    sub = np.array([np.linalg.norm(B, axis=1) > 0 for B in coefs.blocks], dtype=bool)
    return sub.any(axis=1), sub


def fit(
    design: DesignMatrix,
    y: np.ndarray,
    config: PenaltyConfig,
    controls: Optional[SolverControls] = None,
    init: Optional[CoefficientSet] = None,
) -> SolverReport:
    """Penalized maximum likelihood by IRLS with blockwise coordinate descent.

    ``y`` is the ``n x (L-1)`` indicator matrix from ``encode_labels``.
    Non-convergence is reported through ``converged=False``.
    """
    controls = controls or SolverControls()
    y = np.asarray(y, dtype=float)
    K = y.shape[1]
    if y.shape[0] != design.n:
        raise InputError("labels and design have different sample counts")
    if init is None:
        coefs = CoefficientSet.zeros(design.sizes, K)
        coefs.intercepts = null_intercepts(y)
    else:
        _check_labels(y)
        coefs = init.copy()

    obj = penalized_objective(design, y, coefs, config)
    history = [obj]
    converged = False
    total_sweeps = 0
    outer = 0
    for outer in range(1, controls.max_outer + 1):
        state = irls_linearize(design, coefs, y)
        work = _WorkingProblem(design, state, design.names or None)
        cand, sweeps = work.solve(coefs, config, controls)
        total_sweeps += sweeps

        new, new_obj = cand, penalized_objective(design, y, cand, config)
        t = 1.0
        slack = 1e-12 * max(1.0, abs(obj))
        for _ in range(controls.max_halvings):
            if new_obj <= obj + slack:
                break
            t *= 0.5
            new = coefs.axpy(t, cand)
            new_obj = penalized_objective(design, y, new, config)
        if new_obj > obj + slack:
            logger.debug("no descent after %d halvings at outer iteration %d", controls.max_halvings, outer)
            break

        change = np.linalg.norm(new.vector() - coefs.vector())
        # relative for large coefficients, absolute near the origin
        scale = max(np.linalg.norm(new.vector()), 1.0)
        coefs, obj = new, new_obj
        history.append(obj)
        if change <= controls.tol * scale:
            converged = True
            break

    if not converged:
        logger.warning("IRLS did not converge within %d iterations (lambda=%g, alpha=%g)",
                       controls.max_outer, config.lam, config.alpha)

    state = irls_linearize(design, coefs, y)
    work = _WorkingProblem(design, state, design.names or None)
    e = work.residual(coefs)
    r_tilde = [work.r_tilde(j, e, B.ravel()) for j, B in enumerate(coefs.blocks)]
    groups, sub = _flags(coefs)
    loglik = log_likelihood_from_predictor(y, state.linear_predictor)
    return SolverReport(
        coefficients=coefs,
        config=config,
        active_groups=groups,
        active_subblocks=sub,
        outer_iterations=outer,
        inner_sweeps=total_sweeps,
        converged=converged,
        objective=obj,
        loglik=loglik,
        objective_history=history,
        state=state,
        ortho=work.ortho,
        r_tilde=r_tilde,
    )


def lambda_max(design: DesignMatrix, y: np.ndarray, alpha: float, rtol: float = 1e-6) -> float:
    """Smallest lambda whose group screen zeroes every block at the null fit.

    Found by bisection; the returned value is the upper end of the final
    bracket, so the screen holds there.
    """
    y = np.asarray(y, dtype=float)
    _check_labels(y)
    resid = (y - y.mean(axis=0)).T
    grads = [resid @ Z for Z in design.blocks]
    n = design.n

    def all_screened(lam):
        cfg = PenaltyConfig(lam, alpha)
        return all(group_screen(g, cfg, n, g.shape[1]) for g in grads)

    hi = max(np.linalg.norm(g) / (n * np.sqrt(g.shape[1])) for g in grads)
    if hi == 0.0:
        return 0.0
    # keep the bracket end strictly above an exact closed-form threshold
    hi *= 1.0 + 2.0 * rtol
    lo = 0.0
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if all_screened(mid):
            hi = mid
        else:
            lo = mid
    return hi


def kkt_violations(design: DesignMatrix, y: np.ndarray, coefs: CoefficientSet, config: PenaltyConfig) -> dict:
    """Largest violation of each optimality condition at ``coefs``.

    Keys: ``active`` (stationarity of nonzero sub-blocks), ``inactive_group``
    (dual-norm excess of zero groups), ``inactive_sub`` (excess of zero
    sub-blocks inside active groups) and ``intercept``. All are absolute and
    in gradient units; compare against a multiple of ``n``.
    """
    y = np.asarray(y, dtype=float)
    n = design.n
    d0, grads = score(design, coefs, y)
    out = {"active": 0.0, "inactive_group": 0.0, "inactive_sub": 0.0,
           "intercept": float(np.abs(d0).max())}
    for B, G in zip(coefs.blocks, grads):
        g = -G
        M = B.shape[1]
        group_thr, sub_thr = config.thresholds(n, M)
        bn = np.linalg.norm(B)
        if bn == 0.0:
            norms = np.linalg.norm(g, axis=1)
            S = np.maximum(norms - sub_thr, 0.0)
            out["inactive_group"] = max(out["inactive_group"], float(np.linalg.norm(S) - group_thr))
            continue
        for l in range(B.shape[0]):
            bl = np.linalg.norm(B[l])
            if bl > 0:
                res = g[l] + group_thr * B[l] / bn + sub_thr * B[l] / bl
                out["active"] = max(out["active"], float(np.linalg.norm(res)))
            else:
                out["inactive_sub"] = max(out["inactive_sub"], float(np.linalg.norm(g[l]) - sub_thr))
    return out
