"""Effective degrees of freedom, BIC and the tuning-parameter search."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import InputError
from .model import FunctionalDataset, build_design, encode_labels
from .optimizer import PenaltyConfig, SolverControls, SolverReport, fit, lambda_max

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 0.75, 0.95)
PATH_COLUMNS = ["lambda", "alpha", "df", "loglik", "bic", "converged", "active_groups", "active_subblocks"]


@dataclass(frozen=True)
class TuningGrid:
    """Grid of ``(lambda, alpha)`` pairs.

    When ``lambdas`` is ``None`` each alpha gets ``n_lambda`` log-spaced
    values from its own ``lambda_max`` down to ``lambda_min_ratio`` times it.
    """

    alphas: tuple = DEFAULT_ALPHAS
    lambdas: Optional[tuple] = None
    n_lambda: int = 50
    lambda_min_ratio: float = 1e-3

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas:
            raise InputError("the alpha grid is empty")
        if any(not 0.0 <= a <= 1.0 for a in alphas):
            raise InputError("alpha values must lie in [0, 1]")
        object.__setattr__(self, "alphas", alphas)
        if self.lambdas is not None:
            lams = tuple(float(v) for v in self.lambdas)
            if not lams:
                raise InputError("the lambda grid is empty")
            if any(v <= 0 for v in lams):
                raise InputError("lambda values must be strictly positive")
            if any(b >= a for a, b in zip(lams, lams[1:])):
                raise InputError("lambda values must be strictly decreasing")
            object.__setattr__(self, "lambdas", lams)
        if self.n_lambda < 1:
            raise InputError("n_lambda must be positive")
        if not 0 < self.lambda_min_ratio < 1 and self.n_lambda > 1:
            raise InputError("lambda_min_ratio must lie in (0, 1)")

    def lambda_values(self, design, y, alpha: float) -> np.ndarray:
        if self.lambdas is not None:
            return np.asarray(self.lambdas)
        top = lambda_max(design, y, alpha)
        if top == 0.0:
            raise InputError("lambda_max is zero: the predictors carry no signal")
        if self.n_lambda == 1:
            return np.array([top])
        return np.geomspace(top, top * self.lambda_min_ratio, self.n_lambda)


@dataclass
class ScoredFit:
    config: PenaltyConfig
    report: SolverReport
    df: float
    bic: float
    loglik: float

    @property
    def converged(self) -> bool:
        return self.report.converged

    def row(self) -> dict:
        rep = self.report
        return {
            "lambda": self.config.lam,
            "alpha": self.config.alpha,
            "df": self.df,
            "loglik": self.loglik,
            "bic": self.bic,
            "converged": int(rep.converged),
            "active_groups": "".join(str(int(v)) for v in rep.active_groups),
            "active_subblocks": "|".join(
                "".join(str(int(v)) for v in row) for row in rep.active_subblocks
            ),
        }


def df_from_shrinkage(factors: Sequence[np.ndarray], sizes: Sequence[int], active=None) -> float:
    """``sum_j I(active_j) M_j sum_l c_jl``, the trace of block-diagonal C_j."""
    active = [True] * len(sizes) if active is None else active
    return float(sum(M * np.sum(c) for c, M, a in zip(factors, sizes, active) if a))


def block_shrinkage(report: SolverReport) -> List[np.ndarray]:
    """Per-sub-block shrinkage factors ``c_jl`` at the fitted coefficients.

    ``c_jl`` is the least-squares scalar mapping the orthogonalized partial
    residual ``r~_jl`` onto the orthogonalized estimate ``(R_j b_j)_l``,
    clipped to ``[0, 1]``. For an orthonormal block this is exactly the
    closed-form thresholding ratio. Without a penalty the map is the
    identity and nonzero sub-blocks get exactly one.
    """
    out = []
    for B, o, r in zip(report.coefficients.blocks, report.ortho, report.r_tilde):
        K, M = B.shape
        if not np.any(B):
            out.append(np.zeros(K))
            continue
        if report.config.lam == 0.0:
            out.append((np.linalg.norm(B, axis=1) > 0).astype(float))
            continue
        b_star = (o.R @ B.ravel()).reshape(K, M)
        r = r.reshape(K, M)
        denom = np.sum(r * r, axis=1)
        c = np.where(denom > 0, np.sum(b_star * r, axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
        c[~(np.linalg.norm(B, axis=1) > 0)] = 0.0
        out.append(np.clip(c, 0.0, 1.0))
    return out


def smoother_trace_dense(report: SolverReport, design, j: int) -> float:
    """``tr(Z~_j R_j^{-1} C_j Q_j' W^{1/2})`` from explicit matrices."""
    state = report.state
    n, K = state.n, state.K
    o = report.ortho[j]
    M = design.blocks[j].shape[1]
    C = np.kron(np.diag(block_shrinkage(report)[j]), np.eye(M))
    W_half = np.zeros((K, n, K, n))
    idx = np.arange(n)
    for h in range(K):
        for l in range(K):
            W_half[h, idx, l, idx] = state.weights_sqrt[:, h, l]
    W_half = W_half.reshape(K * n, K * n)
    S = design.expanded(j, K) @ np.linalg.solve(o.R, C @ o.Q.T @ W_half)
    return float(np.trace(S))


def effective_df(report: SolverReport) -> float:
    """Sum over active groups of the smoother traces ``tr(S_j) = tr(C_j)``."""
    sizes = [B.shape[1] for B in report.coefficients.blocks]
    return df_from_shrinkage(block_shrinkage(report), sizes, report.active_groups)


def bic(loglik: float, df: float, n: int) -> float:
    if n < 1:
        raise InputError("n must be positive")
    return float(-2.0 * loglik + df * np.log(n))


def score_fit(report: SolverReport, n: int) -> ScoredFit:
    df = effective_df(report)
    return ScoredFit(report.config, report, df, bic(report.loglik, df, n), report.loglik)


@dataclass
class SelectionPath:
    path: List[ScoredFit]
    best: Optional[ScoredFit]
    nonconverged: List[ScoredFit] = field(default_factory=list)

    def rows(self) -> List[dict]:
        return [s.row() for s in self.path]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=PATH_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def select_best(path: Sequence[ScoredFit], rtol: float = 1e-9) -> Optional[ScoredFit]:
    """Minimum BIC among converged fits; near-ties go to larger lambda, then alpha."""
    ok = [s for s in path if s.converged]
    if not ok:
        return None
    low = min(s.bic for s in ok)
    tied = [s for s in ok if s.bic <= low + rtol * max(1.0, abs(low))]
    return max(tied, key=lambda s: (s.config.lam, s.config.alpha))


def _alpha_path(design, y, alpha, lambdas, controls):
    out = []
    init = None
    for lam in lambdas:
        report = fit(design, y, PenaltyConfig(float(lam), alpha), controls, init=init)
        init = report.coefficients
        out.append(score_fit(report, design.n))
    return out


def _alpha_path_job(args):
    return _alpha_path(*args)


def grid_search(
    dataset: FunctionalDataset,
    grid: Optional[TuningGrid] = None,
    controls: Optional[SolverControls] = None,
    jobs: int = 1,
) -> SelectionPath:
    """Fit every grid point, warm-starting along decreasing lambda per alpha."""
    grid = grid or TuningGrid()
    controls = controls or SolverControls()
    dataset.validate_classes()
    design = build_design(dataset)
    y = encode_labels(dataset.labels, dataset.L, dataset.reference_class)
    tasks = [(design, y, a, grid.lambda_values(design, y, a), controls) for a in grid.alphas]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_alpha_path_job, tasks))
    else:
        results = [_alpha_path(*t) for t in tasks]
    path = [s for chunk in results for s in chunk]
    failed = [s for s in path if not s.converged]
    if failed:
        logger.warning("%d of %d grid points did not converge", len(failed), len(path))
    return SelectionPath(path, select_best(path), failed)
