"""Multiclass functional logistic regression model.

Conventions used throughout the package:

* classes are integer codes ``0..L-1`` with names kept in
  ``FunctionalDataset.classes``;
* the ``K = L - 1`` non-reference classes keep their relative order and
  form the "working" class order, the reference class is appended last;
* a coefficient block for predictor ``j`` is stored as a ``(K, M_j)``
  array whose row ``l`` is the boundary sub-block ``b_jl``, so
  ``block.ravel()`` is ``b_j = (b_j1', ..., b_jK')'``;
* stacked vectors over observations and classes are class-major, i.e.
  an ``(K, n)`` array flattened in C order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .basis import BasisSystem
from .exceptions import InputError

PROB_FLOOR = 1e-5


@dataclass(frozen=True)
class PredictorGroup:
    """One predictor: basis coefficients of a curve, or a raw scalar vector.

    ``basis`` is ``None`` for scalar groups, which use an identity Gram.
    """

    name: str
    coefs: np.ndarray
    basis: Optional[BasisSystem] = None

    def __post_init__(self):
        coefs = np.asarray(self.coefs, dtype=float)
        if coefs.ndim == 1:
            coefs = coefs[:, None]
        if coefs.ndim != 2:
            raise InputError(f"group '{self.name}': coefficient matrix must be 2-D")
        if self.basis is not None and coefs.shape[1] != self.basis.M:
            raise InputError(
                f"group '{self.name}': {coefs.shape[1]} coefficients per sample "
                f"but the basis has M={self.basis.M}"
            )
        if not np.all(np.isfinite(coefs)):
            raise InputError(f"group '{self.name}': non-finite coefficients")
        object.__setattr__(self, "coefs", coefs)

    @property
    def kind(self) -> str:
        return "scalar" if self.basis is None else "functional"

    @property
    def M(self) -> int:
        return self.coefs.shape[1]

    @property
    def gram(self) -> np.ndarray:
        return np.eye(self.M) if self.basis is None else self.basis.gram

    def take(self, idx) -> "PredictorGroup":
        return replace(self, coefs=self.coefs[idx])


@dataclass(frozen=True)
class FunctionalDataset:
    groups: tuple
    labels: np.ndarray
    classes: tuple = ()
    reference_class: int = -1
    sample_ids: tuple = ()

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise InputError("labels must be one-dimensional")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise InputError("labels must be integer class codes")
        labels = labels.astype(int)
        groups = tuple(self.groups)
        if not groups:
            raise InputError("a dataset needs at least one predictor group")
        n = labels.size
        for g in groups:
            if g.coefs.shape[0] != n:
                raise InputError(
                    f"group '{g.name}' has {g.coefs.shape[0]} rows, expected {n}"
                )
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise InputError("predictor names must be unique")
        classes = tuple(self.classes) or tuple(str(c) for c in range(labels.max() + 1))
        L = len(classes)
        if L < 2:
            raise InputError("at least two classes are required")
        if labels.min() < 0 or labels.max() >= L:
            raise InputError("label code out of range")
        ref = self.reference_class
        if ref < 0:
            ref += L
        if not 0 <= ref < L:
            raise InputError(f"reference class {self.reference_class} out of range")
        ids = tuple(self.sample_ids) or tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise InputError("sample_ids must have one entry per sample")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "reference_class", ref)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def L(self) -> int:
        return len(self.classes)

    @property
    def p(self) -> int:
        return len(self.groups)

    @property
    def group_sizes(self) -> List[int]:
        return [g.M for g in self.groups]

    @property
    def group_names(self) -> List[str]:
        return [g.name for g in self.groups]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.L)

    def validate_classes(self) -> None:
        missing = [self.classes[c] for c in np.flatnonzero(self.class_counts() == 0)]
        if missing:
            raise InputError(f"classes without samples: {missing}")

    def working_classes(self) -> List[int]:
        """Class codes in working order: non-reference classes, then reference."""
        ref = self.reference_class
        return [c for c in range(self.L) if c != ref] + [ref]

    def take(self, idx) -> "FunctionalDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            groups=tuple(g.take(idx) for g in self.groups),
            labels=self.labels[idx],
            sample_ids=tuple(self.sample_ids[i] for i in idx),
        )

    def permute_groups(self, order: Sequence[int]) -> "FunctionalDataset":
        return replace(self, groups=tuple(self.groups[j] for j in order))


@dataclass
class DesignMatrix:
    """Per-group blocks ``Z_j`` (n x M_j) of the linear predictor."""

    blocks: list
    names: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def p(self) -> int:
        return len(self.blocks)

    @property
    def sizes(self) -> List[int]:
        return [Z.shape[1] for Z in self.blocks]

    def expanded(self, j: int, K: int) -> np.ndarray:
        """``I_K (x) Z_j``, shape ``(n K, M_j K)``."""
        return np.kron(np.eye(K), self.blocks[j])


@dataclass
class CoefficientSet:
    intercepts: np.ndarray
    blocks: list

    @classmethod
    def zeros(cls, sizes: Sequence[int], K: int) -> "CoefficientSet":
        return cls(np.zeros(K), [np.zeros((K, M)) for M in sizes])

    @property
    def K(self) -> int:
        return self.intercepts.size

    def b_j(self, j: int) -> np.ndarray:
        return self.blocks[j].ravel()

    @property
    def b(self) -> np.ndarray:
        return np.concatenate([B.ravel() for B in self.blocks])

    def copy(self) -> "CoefficientSet":
        return CoefficientSet(self.intercepts.copy(), [B.copy() for B in self.blocks])

    def vector(self) -> np.ndarray:
        """Intercepts followed by ``b``; used for convergence checks."""
        return np.concatenate([self.intercepts, self.b])

    def axpy(self, t: float, other: "CoefficientSet") -> "CoefficientSet":
        """``self + t * (other - self)``."""
        return CoefficientSet(
            self.intercepts + t * (other.intercepts - self.intercepts),
            [B + t * (C - B) for B, C in zip(self.blocks, other.blocks)],
        )

    def to_dict(self) -> dict:
        return {
            "intercepts": self.intercepts.tolist(),
            "blocks": [B.tolist() for B in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoefficientSet":
        return cls(
            np.asarray(d["intercepts"], dtype=float),
            [np.asarray(B, dtype=float).reshape(len(d["intercepts"]), -1) for B in d["blocks"]],
        )


@dataclass
class IRLSState:
    """Quadratic approximation of the log-likelihood at a coefficient point.

    ``weights`` holds the ``n`` per-observation ``K x K`` blocks of W in
    observation-major layout and ``weights_sqrt`` their symmetric square
    roots. ``eta`` and ``linear_predictor`` are ``(K, n)`` arrays.
    """

    probs: np.ndarray
    weights: np.ndarray
    weights_sqrt: np.ndarray
    eta: np.ndarray
    linear_predictor: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def K(self) -> int:
        return self.probs.shape[1] - 1

    def apply_sqrt(self, v: np.ndarray) -> np.ndarray:
        """``W^{1/2} v`` for a class-major ``(K, n)`` array."""
        return np.einsum("ikl,li->ki", self.weights_sqrt, v)

    def dense_weights(self) -> np.ndarray:
        """W as a dense class-major ``nK x nK`` matrix (tests, debugging)."""
        n, K = self.n, self.K
        W = np.zeros((K, n, K, n))
        idx = np.arange(n)
        for h in range(K):
            for l in range(K):
                W[h, idx, l, idx] = self.weights[:, h, l]
        return W.reshape(K * n, K * n)


def build_design(dataset: FunctionalDataset) -> DesignMatrix:
    """``Z_j = W_j Phi_j`` for functional groups, raw values for scalar groups."""
    blocks = []
    for g in dataset.groups:
        if g.basis is None:
            blocks.append(g.coefs.copy())
        else:
            if g.basis.gram.shape != (g.M, g.M):
                raise InputError(f"group '{g.name}': Gram matrix does not match coefficients")
            blocks.append(g.coefs @ g.basis.gram)
    return DesignMatrix(blocks, dataset.group_names)


def encode_labels(labels, L: int, reference_class: int) -> np.ndarray:
    """Indicator matrix ``n x (L-1)`` over non-reference classes.

    Rows of the reference class are all zero; the remaining classes keep
    their relative order.

    >>> encode_labels([1, 2], 3, 2).tolist()
    [[0.0, 1.0], [0.0, 0.0]]
    """
    labels = np.asarray(labels, dtype=int)
    if not 0 <= reference_class < L:
        raise InputError(f"reference class {reference_class} out of range for L={L}")
    if labels.size and (labels.min() < 0 or labels.max() >= L):
        raise InputError(f"labels must lie in 0..{L - 1}")
    others = [c for c in range(L) if c != reference_class]
    return (labels[:, None] == np.asarray(others)[None, :]).astype(float)


def linear_predictor(design: DesignMatrix, coefs: CoefficientSet) -> np.ndarray:
    """Log-odds against the reference class, ``(K, n)``."""
    u = np.repeat(coefs.intercepts[:, None], design.n, axis=1)
    for Z, B in zip(design.blocks, coefs.blocks):
        u += B @ Z.T
    return u


def probs_from_predictor(u: np.ndarray) -> np.ndarray:
    """Posterior probabilities ``n x L`` (reference last) from ``(K, n)`` log-odds."""
    full = np.vstack([u, np.zeros((1, u.shape[1]))])
    full -= full.max(axis=0, keepdims=True)
    e = np.exp(full)
    return (e / e.sum(axis=0, keepdims=True)).T


def posterior_probs(design: DesignMatrix, coefs: CoefficientSet) -> np.ndarray:
    """Rows sum to one; the last column is the reference class."""
    return probs_from_predictor(linear_predictor(design, coefs))


def log_likelihood(y: np.ndarray, probs: np.ndarray) -> float:
    """Multinomial log-likelihood from indicators ``y`` (n x K) and probs (n x L)."""
    y = np.asarray(y, dtype=float)
    logp = np.log(np.clip(probs, np.finfo(float).tiny, None))
    y_ref = 1.0 - y.sum(axis=1)
    return float(np.sum(y * logp[:, :-1]) + np.sum(y_ref * logp[:, -1]))


def log_likelihood_from_predictor(y: np.ndarray, u: np.ndarray) -> float:
    """Same quantity computed from log-odds without forming probabilities."""
    full = np.vstack([u, np.zeros((1, u.shape[1]))])
    return float(np.sum(y.T * u) - logsumexp(full, axis=0).sum())


def score(design: DesignMatrix, coefs: CoefficientSet, y: np.ndarray):
    """Exact gradient of the log-likelihood.

    Returns ``(d_intercepts, [d_B_j])`` with ``d_B_j`` shaped like the
    coefficient blocks: ``Z_j' (y_l - pi_l)`` in row ``l``.
    """
    resid = (y - posterior_probs(design, coefs)[:, :-1]).T
    return resid.sum(axis=1), [resid @ Z for Z in design.blocks]


def floor_probs(probs: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    clipped = np.clip(probs, floor, 1.0 - floor)
    return clipped / clipped.sum(axis=1, keepdims=True)


def weight_blocks(probs: np.ndarray) -> np.ndarray:
    """Per-observation ``diag(pi) - pi pi'`` over non-reference classes."""
    pk = probs[:, :-1]
    W = -pk[:, :, None] * pk[:, None, :]
    idx = np.arange(pk.shape[1])
    W[:, idx, idx] += pk
    return W


def _sym_sqrt(blocks: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(blocks)
    vals = np.sqrt(np.clip(vals, 0.0, None))
    return np.einsum("ikm,im,ilm->ikl", vecs, vals, vecs)


def irls_linearize(
    design: DesignMatrix, coefs: CoefficientSet, y: np.ndarray, floor: float = PROB_FLOOR
) -> IRLSState:
    """Build W, its square root and the working response at ``coefs``.

    W is formed from floored probabilities so every block is invertible; the
    residual ``y - pi`` uses exact probabilities, which keeps the gradient of
    the quadratic at the expansion point equal to the exact score.
    """
    u = linear_predictor(design, coefs)
    probs = probs_from_predictor(u)
    W = weight_blocks(floor_probs(probs, floor))
    resid = y - probs[:, :-1]
    adj = np.einsum("ikl,il->ik", np.linalg.pinv(W, hermitian=True), resid)
    return IRLSState(
        probs=probs,
        weights=W,
        weights_sqrt=_sym_sqrt(W),
        eta=u + adj.T,
        linear_predictor=u,
        y=np.asarray(y, dtype=float),
    )


def working_loglik(state: IRLSState, u: np.ndarray) -> float:
    """Quadratic approximation ``-1/2 ||W^{1/2}(eta - u)||^2``."""
    e = state.apply_sqrt(state.eta - u)
    return -0.5 * float(np.sum(e * e))


def predict_classes(dataset: FunctionalDataset, design: DesignMatrix, coefs: CoefficientSet):
    """Argmax class codes in the dataset's original numbering."""
    order = np.asarray(dataset.working_classes())
    return order[np.argmax(posterior_probs(design, coefs), axis=1)]
