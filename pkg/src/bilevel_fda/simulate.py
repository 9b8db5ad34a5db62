"""Synthetic datasets with planted group and boundary structure."""

from __future__ import annotations

from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .basis import BasisSystem
from .model import CoefficientSet, FunctionalDataset, PredictorGroup, build_design, posterior_probs

YEAST_CLASSES = ("G1", "G2/M", "M/G1", "S", "S/G2")

# name -> observation times; the first two are two-point scalar groups
YEAST_DESIGN = {
    "cln3": (1.0, 2.0),
    "clb2": (1.0, 2.0),
    "alpha": tuple(float(t) for t in np.arange(0, 126, 7)),
    "cdc15": tuple(float(t) for t in np.linspace(10, 290, 24)),
    "cdc28": tuple(float(t) for t in np.arange(0, 170, 10)),
    "elu": tuple(float(t) for t in np.arange(0, 420, 30)),
}


def draw_labels(probs: np.ndarray, rng) -> np.ndarray:
    """Working-order class codes drawn row by row from ``probs``."""
    u = rng.random(probs.shape[0])
    return np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def simulate_dataset(
    n: int,
    L: int,
    sizes: Sequence[int],
    effects: Optional[Dict[Tuple[int, int], float]] = None,
    seed: int = 0,
    functional: bool = True,
    intercepts: Optional[Sequence[float]] = None,
) -> Tuple[FunctionalDataset, CoefficientSet]:
    """Random curves and labels from a planted multiclass model.

    ``effects`` maps ``(group j, boundary l)`` to the standard deviation of
    that sub-block's contribution ``Z_j b_jl`` to the log-odds of class
    ``l`` against the last class; the direction of ``b_jl`` is random.
    Functional groups use cubic (or lower order when ``M < 4``) B-splines on
    ``[0, 1]`` with standard normal coefficients.

    Returns the dataset and the true coefficients.
    """
    rng = np.random.default_rng(seed)
    K = L - 1
    groups = []
    for j, M in enumerate(sizes):
        coefs = rng.standard_normal((n, M))
        basis = BasisSystem.uniform((0.0, 1.0), M, order=min(4, M)) if functional else None
        groups.append(PredictorGroup(f"x{j + 1}", coefs, basis))
    names = tuple(str(c) for c in range(L))
    ds = FunctionalDataset(tuple(groups), np.arange(n) % L, names)
    design = build_design(ds)

    truth = CoefficientSet.zeros(list(sizes), K)
    if intercepts is not None:
        truth.intercepts = np.asarray(intercepts, dtype=float)
    for (j, l), sd in (effects or {}).items():
        direction = rng.standard_normal(sizes[j])
        contrib = design.blocks[j] @ direction
        truth.blocks[j][l] = direction * (sd / contrib.std())
    labels = draw_labels(posterior_probs(design, truth), rng)
    return FunctionalDataset(tuple(groups), labels, names), truth


def yeast_like_records(n: int = 150, seed: int = 0, missing_rate: float = 0.05):
    """Long-format observations shaped like the cell-cycle experiments.

    Two scalar predictors measured at two time points and four functional
    predictors on their own time grids, five phase classes. Classes differ by
    the phase of a periodic expression profile. Returns ``(rows, labels)``
    with rows ``(sample_id, predictor, time, value)`` and labels
    ``(sample_id, class)``.
    """
    rng = np.random.default_rng(seed)
    L = len(YEAST_CLASSES)
    classes = np.arange(n) % L
    rng.shuffle(classes)
    rows, labels = [], []
    for i in range(n):
        sid = f"gene{i:04d}"
        c = classes[i]
        phase = 2 * np.pi * c / L + rng.normal(0, 0.6)
        labels.append((sid, YEAST_CLASSES[c]))
        for name, times in YEAST_DESIGN.items():
            t = np.asarray(times)
            if len(t) == 2:
                shift = 0.0 if name == "cln3" else np.pi / 2
                vals = 0.8 * np.cos(phase + shift + np.array([0.0, 0.4])) + rng.normal(0, 0.5, 2)
                keep = np.ones(2, dtype=bool)
            else:
                period = (t[-1] - t[0]) / 1.7
                vals = np.cos(2 * np.pi * (t - t[0]) / period + phase) + rng.normal(0, 0.4, t.size)
                keep = rng.random(t.size) >= missing_rate
                keep[[0, -1]] = True
            for tk, vk, ok in zip(t, vals, keep):
                rows.append((sid, name, float(tk), float(vk) if ok else None))
    return rows, labels


def yeast_like_config(data="data.csv", labels="labels.csv", n_basis: int = 4) -> dict:
    """Run configuration matching :func:`yeast_like_records`."""
    predictors = {}
    for name, times in YEAST_DESIGN.items():
        if len(times) == 2:
            predictors[name] = {"kind": "scalar"}
        else:
            predictors[name] = {
                "kind": "functional",
                "order": 4,
                "n_basis": n_basis,
                "interval": [times[0], times[-1]],
                "ridge": 1e-3,
            }
    return {
        "data": data,
        "labels": labels,
        "predictors": predictors,
        "class_order": list(YEAST_CLASSES),
        "filters": {
            "complete": ["cln3", "clb2"],
            "max_missing_total": {"predictors": ["alpha", "cdc15", "cdc28", "elu"], "limit": 10},
        },
    }
