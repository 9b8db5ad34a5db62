"""Bootstrap selection frequencies over all pairwise decision boundaries.

Each replicate resamples whole samples with replacement, then for every
configured reference class the model is refit with BIC-tuned penalties.
A fitted sub-block ``b_jl`` is the boundary between class ``l`` and the
reference, so rotating the reference exposes every unordered class pair.
"""

from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import InputError
from .model import FunctionalDataset
from .optimizer import SolverControls
from .selection import TuningGrid, grid_search

MAX_RESAMPLE_ATTEMPTS = 100


def rotate_reference(dataset: FunctionalDataset, reference: int) -> FunctionalDataset:
    """Renumber classes so ``reference`` becomes the last class.

    Non-reference classes keep their relative order; class names travel with
    the codes so the original identities are preserved.
    """
    L = dataset.L
    if not 0 <= reference < L:
        raise InputError(f"reference class {reference} out of range for L={L}")
    order = [c for c in range(L) if c != reference] + [reference]
    new_code = np.empty(L, dtype=int)
    new_code[order] = np.arange(L)
    return replace(
        dataset,
        labels=new_code[dataset.labels],
        classes=tuple(dataset.classes[c] for c in order),
        reference_class=L - 1,
    )


def replicate_seed(seed: int, replicate: int) -> np.random.SeedSequence:
    """Independent stream for one replicate: ``SeedSequence(seed, spawn_key=(r,))``."""
    return np.random.SeedSequence(seed, spawn_key=(replicate,))


def resample_indices(labels: np.ndarray, L: int, rng, max_attempts: int = MAX_RESAMPLE_ATTEMPTS):
    """Row indices drawn with replacement, redrawn until every class appears."""
    n = labels.size
    for _ in range(max_attempts):
        idx = rng.integers(0, n, size=n)
        if np.unique(labels[idx]).size == L:
            return np.sort(idx)
    raise InputError(f"no resample with all {L} classes after {max_attempts} attempts")


@dataclass
class ReplicateRecord:
    replicate: int
    reference: int
    status: str  # "ok" or "nonconverged"
    lam: float = float("nan")
    alpha: float = float("nan")
    active_groups: Optional[list] = None
    # boundary flags keyed by the non-reference class code (original numbering)
    active_boundaries: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "replicate": self.replicate,
            "reference": self.reference,
            "status": self.status,
            "lambda": None if self.status != "ok" else self.lam,
            "alpha": None if self.status != "ok" else self.alpha,
            "active_groups": self.active_groups,
            "active_boundaries": None if self.active_boundaries is None
            else {str(k): v for k, v in sorted(self.active_boundaries.items())},
        }


@dataclass
class SelectionReport:
    predictors: list
    classes: list
    replicates: int
    references: list
    seed: int
    records: List[ReplicateRecord] = field(default_factory=list)

    @property
    def pairs(self) -> list:
        return list(itertools.combinations(range(len(self.classes)), 2))

    def pair_label(self, pair) -> str:
        a, b = pair
        return f"{self.classes[a]} vs. {self.classes[b]}"

    def _ok(self):
        return [r for r in self.records if r.status == "ok"]

    @property
    def boundary_counts(self) -> np.ndarray:
        """``(n_pairs, p)`` counts of nonzero boundary sub-blocks."""
        index = {pr: i for i, pr in enumerate(self.pairs)}
        out = np.zeros((len(index), len(self.predictors)), dtype=int)
        for rec in self._ok():
            for cls, flags in rec.active_boundaries.items():
                out[index[tuple(sorted((cls, rec.reference)))]] += np.asarray(flags, dtype=int)
        return out

    @property
    def boundary_denominators(self) -> np.ndarray:
        """Per pair: fits in which the pair was a fitted boundary."""
        return self._pair_tally(lambda r: r.status == "ok")

    @property
    def boundary_nonconverged(self) -> np.ndarray:
        return self._pair_tally(lambda r: r.status == "nonconverged")

    @property
    def boundary_attempted(self) -> np.ndarray:
        return self._pair_tally(lambda r: True)

    def _pair_tally(self, keep) -> np.ndarray:
        out = np.zeros(len(self.pairs), dtype=int)
        for i, (a, b) in enumerate(self.pairs):
            out[i] = sum(1 for r in self.records if keep(r) and r.reference in (a, b))
        return out

    @property
    def variable_counts(self) -> np.ndarray:
        out = np.zeros(len(self.predictors), dtype=int)
        for rec in self._ok():
            out += np.asarray(rec.active_groups, dtype=int)
        return out

    @property
    def variable_denominator(self) -> int:
        return len(self._ok())

    @property
    def nonconverged(self) -> int:
        return sum(1 for r in self.records if r.status == "nonconverged")

    def boundary_table(self) -> List[list]:
        counts = self.boundary_counts
        return [[self.pair_label(pr)] + counts[i].tolist() for i, pr in enumerate(self.pairs)]

    def write_boundary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["boundary"] + list(self.predictors))
            w.writerows(self.boundary_table())

    def write_variable_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.predictors))
            w.writerow(self.variable_counts.tolist())

    def to_dict(self) -> dict:
        return {
            "predictors": list(self.predictors),
            "classes": list(self.classes),
            "replicates": self.replicates,
            "references": [self.classes[r] for r in self.references],
            "seed": self.seed,
            "boundaries": [
                {
                    "pair": [self.classes[a], self.classes[b]],
                    "counts": dict(zip(self.predictors, self.boundary_counts[i].tolist())),
                    "denominator": int(self.boundary_denominators[i]),
                    "nonconverged": int(self.boundary_nonconverged[i]),
                    "attempted": int(self.boundary_attempted[i]),
                }
                for i, (a, b) in enumerate(self.pairs)
            ],
            "variables": {
                "counts": dict(zip(self.predictors, self.variable_counts.tolist())),
                "denominator": self.variable_denominator,
                "nonconverged": self.nonconverged,
                "attempted": len(self.records),
            },
            "records": [r.to_dict() for r in self.records],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _run_replicate(args):
    dataset, grid, controls, seed, r, references = args
    rng = np.random.default_rng(replicate_seed(seed, r))
    sample = dataset.take(resample_indices(dataset.labels, dataset.L, rng))
    records = []
    for ref in references:
        rotated = rotate_reference(sample, ref)
        order = [c for c in range(dataset.L) if c != ref]
        result = grid_search(rotated, grid, controls)
        best = result.best
        if best is None:
            records.append(ReplicateRecord(r, ref, "nonconverged"))
            continue
        rep = best.report
        records.append(ReplicateRecord(
            replicate=r,
            reference=ref,
            status="ok",
            lam=best.config.lam,
            alpha=best.config.alpha,
            active_groups=[int(v) for v in rep.active_groups],
            active_boundaries={
                cls: [int(v) for v in rep.active_subblocks[:, l]] for l, cls in enumerate(order)
            },
        ))
    return records


def bootstrap_run(
    dataset: FunctionalDataset,
    grid: Optional[TuningGrid] = None,
    B: int = 50,
    seed: int = 0,
    references: Optional[Sequence[int]] = None,
    controls: Optional[SolverControls] = None,
    jobs: int = 1,
) -> SelectionReport:
    """Bootstrap the BIC-tuned fit under each reference class.

    ``references`` defaults to every class. Results do not depend on ``jobs``.
    """
    if B < 1:
        raise InputError("the number of bootstrap replicates must be at least 1")
    dataset.validate_classes()
    grid = grid or TuningGrid()
    controls = controls or SolverControls()
    refs = list(range(dataset.L)) if references is None else [int(r) for r in references]
    for r in refs:
        if not 0 <= r < dataset.L:
            raise InputError(f"reference class {r} out of range")
    tasks = [(dataset, grid, controls, seed, r, refs) for r in range(B)]
    if jobs > 1 and B > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_replicate, tasks))
    else:
        chunks = [_run_replicate(t) for t in tasks]
    report = SelectionReport(
        predictors=dataset.group_names,
        classes=list(dataset.classes),
        replicates=B,
        references=refs,
        seed=seed,
    )
    report.records = [rec for chunk in chunks for rec in chunk]
    return report
