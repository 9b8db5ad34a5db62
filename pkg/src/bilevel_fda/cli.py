"""Command-line driver: ingest long-format CSV data, fit, tune and bootstrap.

Subcommands
-----------
simulate   write a synthetic five-class dataset and a matching config
smooth     ingest and smooth the raw curves, write ``dataset.json``
path       fit the whole tuning grid, write ``path.csv``
fit        as ``path`` plus the BIC-optimal model and its coefficient functions
bootstrap  bootstrap selection frequencies over all pairwise boundaries

Exit status: 0 success, 2 input error, 3 numerical failure, 4 non-convergence
(only with ``--fatal-nonconvergence``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .basis import DEFAULT_RIDGE, BasisSystem, RawCurve, evaluate_basis, smooth_observations
from .bootstrap import bootstrap_run
from .exceptions import BilevelFDAError, ConvergenceError, InputError
from .model import (
    CoefficientSet,
    FunctionalDataset,
    PredictorGroup,
    build_design,
    posterior_probs,
)
from .optimizer import SolverControls
from .selection import DEFAULT_ALPHAS, SelectionPath, TuningGrid, grid_search
from .simulate import yeast_like_config, yeast_like_records

logger = logging.getLogger("bilevel_fda")

MISSING_TOKENS = {"", "na", "nan", "null", "none"}
COEF_GRID_POINTS = 200


@dataclass(frozen=True)
class PredictorSpec:
    kind: str = "functional"
    order: int = 4
    n_basis: Optional[int] = None
    knots: Optional[tuple] = None
    interval: Optional[tuple] = None
    ridge: float = DEFAULT_RIDGE

    @classmethod
    def from_dict(cls, name, d: dict) -> "PredictorSpec":
        kind = d.get("kind", "functional")
        if kind not in ("functional", "scalar"):
            raise InputError(f"predictor '{name}': kind must be 'functional' or 'scalar'")
        unknown = set(d) - {"kind", "order", "n_basis", "n_interior_knots", "knots", "interval", "ridge"}
        if unknown:
            raise InputError(f"predictor '{name}': unknown keys {sorted(unknown)}")
        order = int(d.get("order", 4))
        n_basis = d.get("n_basis")
        if "n_interior_knots" in d:
            n_basis = int(d["n_interior_knots"]) + order
        knots = tuple(float(k) for k in d["knots"]) if d.get("knots") is not None else None
        interval = tuple(float(v) for v in d["interval"]) if d.get("interval") is not None else None
        if kind == "functional" and n_basis is None and knots is None:
            n_basis = order
        ridge = float(d.get("ridge", DEFAULT_RIDGE))
        if ridge < 0:
            raise InputError(f"predictor '{name}': ridge must be non-negative")
        return cls(kind, order, None if n_basis is None else int(n_basis), knots, interval, ridge)

    def basis(self, times: np.ndarray) -> BasisSystem:
        interval = self.interval or (float(times.min()), float(times.max()))
        if self.knots is not None:
            return BasisSystem(interval, self.order, self.knots)
        return BasisSystem.uniform(interval, self.n_basis, self.order)


@dataclass
class RunConfig:
    """Parsed run configuration; paths are resolved against the config file."""

    data: Path
    labels: Path
    predictors: Dict[str, PredictorSpec]
    class_order: Optional[list] = None
    reference_class: Optional[str] = None
    complete: list = field(default_factory=list)
    max_missing: dict = field(default_factory=dict)
    max_missing_total: Optional[dict] = None
    grid: TuningGrid = field(default_factory=TuningGrid)
    controls: SolverControls = field(default_factory=SolverControls)
    replicates: int = 50
    seed: int = 0
    references: Optional[list] = None
    output_dir: Path = Path("out")

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "RunConfig":
        for key in ("data", "labels", "predictors"):
            if key not in d:
                raise InputError(f"config is missing '{key}'")
        preds = {name: PredictorSpec.from_dict(name, spec) for name, spec in d["predictors"].items()}
        if not preds:
            raise InputError("config declares no predictors")
        filters = d.get("filters", {})
        for name in list(filters.get("complete", [])) + list(filters.get("max_missing", {})):
            if name not in preds:
                raise InputError(f"filter refers to unknown predictor '{name}'")
        g = d.get("grid", {})
        grid = TuningGrid(
            alphas=tuple(g.get("alphas", DEFAULT_ALPHAS)),
            lambdas=tuple(g["lambdas"]) if g.get("lambdas") else None,
            n_lambda=int(g.get("n_lambda", 50)),
            lambda_min_ratio=float(g.get("lambda_min_ratio", 1e-3)),
        )
        s = d.get("solver", {})
        try:
            controls = SolverControls(**s)
        except TypeError as exc:
            raise InputError(f"bad solver settings: {exc}") from None
        b = d.get("bootstrap", {})
        refs = b.get("references", "all")
        return cls(
            data=base / d["data"],
            labels=base / d["labels"],
            predictors=preds,
            class_order=d.get("class_order"),
            reference_class=d.get("reference_class"),
            complete=list(filters.get("complete", [])),
            max_missing={k: int(v) for k, v in filters.get("max_missing", {}).items()},
            max_missing_total=filters.get("max_missing_total"),
            grid=grid,
            controls=controls,
            replicates=int(b.get("replicates", 50)),
            seed=int(b.get("seed", 0)),
            references=None if refs == "all" else list(refs),
            output_dir=base / d.get("output_dir", "out"),
        )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    return RunConfig.from_dict(raw, path.parent)


def _parse_float(text, what):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise InputError(f"non-numeric {what}: {text!r}") from None
    if not math.isfinite(value):
        raise InputError(f"non-finite {what}: {text!r}")
    return value


def _read_csv(path, header):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != header:
            raise InputError(f"{path}: expected header {','.join(header)}")
        return [{k.strip(): (v or "").strip() for k, v in row.items()} for row in reader]


def ingest(data_csv, labels_csv, config: RunConfig):
    """Read, filter and smooth long-format data.

    Returns ``(dataset, log)`` where ``log`` lists excluded samples with the
    reason for each. Samples are ordered by id so row order in the inputs
    does not matter.
    """
    label_rows = _read_csv(labels_csv, ["sample_id", "class"])
    labels = {}
    for row in label_rows:
        sid = row["sample_id"]
        if sid in labels:
            raise InputError(f"sample '{sid}' has more than one label")
        labels[sid] = row["class"]

    obs: Dict[str, Dict[str, list]] = {}
    expected: Dict[str, set] = {name: set() for name in config.predictors}
    for row in _read_csv(data_csv, ["sample_id", "predictor", "time", "value"]):
        name = row["predictor"]
        if name not in config.predictors:
            raise InputError(f"unknown predictor '{name}' (sample '{row['sample_id']}')")
        t = _parse_float(row["time"], f"time for sample '{row['sample_id']}'")
        expected[name].add(t)
        if row["value"].lower() in MISSING_TOKENS:
            continue
        v = _parse_float(row["value"], f"value for sample '{row['sample_id']}'")
        obs.setdefault(row["sample_id"], {}).setdefault(name, []).append((t, v))

    data_ids = set(obs)
    for sid in sorted(data_ids - set(labels)):
        raise InputError(f"sample '{sid}' has data but no label")
    for sid in sorted(set(labels) - data_ids):
        raise InputError(f"sample '{sid}' has a label but no data")

    excluded = []
    kept = []
    total = config.max_missing_total or {}
    for sid in sorted(data_ids):
        curves = obs[sid]
        missing = {
            name: len(expected[name]) - len({t for t, _ in curves.get(name, [])})
            for name in config.predictors
        }
        reason = None
        for name in config.complete:
            if missing[name] > 0:
                reason = f"missing values for required predictor '{name}'"
                break
        if reason is None:
            for name, limit in config.max_missing.items():
                if missing[name] > limit:
                    reason = f"{missing[name]} missing values for '{name}' (limit {limit})"
                    break
        if reason is None and total:
            count = sum(missing[name] for name in total.get("predictors", []))
            if count > int(total["limit"]):
                reason = f"{count} missing values in total (limit {total['limit']})"
        if reason is None:
            for name, spec in config.predictors.items():
                if spec.kind == "scalar" and missing[name] > 0:
                    reason = f"incomplete scalar predictor '{name}'"
                    break
                if not curves.get(name):
                    reason = f"no observations for '{name}'"
                    break
        if reason is not None:
            excluded.append({"sample_id": sid, "reason": reason})
        else:
            kept.append(sid)
    if not kept:
        raise InputError("no samples left after the exclusion filters")

    groups = []
    for name, spec in config.predictors.items():
        series = []
        for sid in kept:
            pts = sorted(obs[sid][name])
            times = [t for t, _ in pts]
            if len(set(times)) != len(times):
                raise InputError(f"sample '{sid}' has repeated times for '{name}'")
            series.append((np.array(times), np.array([v for _, v in pts])))
        if spec.kind == "scalar":
            groups.append(PredictorGroup(name, np.vstack([v for _, v in series])))
        else:
            basis = spec.basis(np.array(sorted(expected[name])))
            coefs = np.vstack([
                smooth_observations(RawCurve(t, v), basis, spec.ridge, name) for t, v in series
            ])
            groups.append(PredictorGroup(name, coefs, basis))

    names = sorted({labels[sid] for sid in kept})
    if config.class_order:
        unknown = sorted(set(names) - set(config.class_order))
        if unknown:
            raise InputError(f"classes not listed in class_order: {unknown}")
        names = [c for c in config.class_order if c in names]
    ref = -1
    if config.reference_class is not None:
        if config.reference_class not in names:
            raise InputError(f"unknown reference class '{config.reference_class}'")
        ref = names.index(config.reference_class)
    code = {c: i for i, c in enumerate(names)}
    dataset = FunctionalDataset(
        tuple(groups),
        np.array([code[labels[sid]] for sid in kept]),
        tuple(names),
        ref,
        tuple(kept),
    )
    log = {
        "n_input": len(data_ids),
        "n_kept": len(kept),
        "excluded": excluded,
        "classes": {c: int(k) for c, k in zip(names, dataset.class_counts())},
    }
    return dataset, log


def dataset_to_dict(ds: FunctionalDataset) -> dict:
    return {
        "classes": list(ds.classes),
        "reference_class": ds.reference_class,
        "sample_ids": list(ds.sample_ids),
        "labels": ds.labels.tolist(),
        "groups": [
            {
                "name": g.name,
                "kind": g.kind,
                "basis": None if g.basis is None else g.basis.to_dict(),
                "coefs": g.coefs.tolist(),
            }
            for g in ds.groups
        ],
    }


def dataset_from_dict(d: dict) -> FunctionalDataset:
    groups = tuple(
        PredictorGroup(
            g["name"],
            np.asarray(g["coefs"], dtype=float),
            None if g["basis"] is None else BasisSystem.from_dict(g["basis"]),
        )
        for g in d["groups"]
    )
    return FunctionalDataset(
        groups, np.asarray(d["labels"]), tuple(d["classes"]), d["reference_class"], tuple(d["sample_ids"])
    )


def model_to_dict(dataset: FunctionalDataset, path: SelectionPath) -> dict:
    best = path.best
    rep = best.report
    coefs = rep.coefficients
    order = dataset.working_classes()
    ref_name = dataset.classes[order[-1]]
    return {
        "lambda": best.config.lam,
        "alpha": best.config.alpha,
        "df": best.df,
        "bic": best.bic,
        "loglik": best.loglik,
        "converged": rep.converged,
        "classes": [dataset.classes[c] for c in order],
        "reference_class": ref_name,
        "intercepts": coefs.intercepts.tolist(),
        "predictors": [
            {
                "name": g.name,
                "kind": g.kind,
                "basis": None if g.basis is None else g.basis.to_dict(),
                "active": bool(rep.active_groups[j]),
                "active_boundaries": {
                    f"{dataset.classes[c]} vs. {ref_name}": bool(rep.active_subblocks[j, l])
                    for l, c in enumerate(order[:-1])
                },
                "coefficients": coefs.blocks[j].tolist(),
            }
            for j, g in enumerate(dataset.groups)
        ],
    }


def load_model(path) -> CoefficientSet:
    """Coefficients from a ``best_model.json`` file."""
    d = json.loads(Path(path).read_text())
    return CoefficientSet.from_dict({
        "intercepts": d["intercepts"],
        "blocks": [p["coefficients"] for p in d["predictors"]],
    })


def coefficient_function_rows(dataset: FunctionalDataset, coefs: CoefficientSet, n_points=COEF_GRID_POINTS):
    """``(predictor, boundary, t, value)`` rows; functional predictors on a grid.

    Scalar predictors report one row per component with ``t`` its 1-based index.
    """
    order = dataset.working_classes()
    ref_name = dataset.classes[order[-1]]
    rows = []
    for g, B in zip(dataset.groups, coefs.blocks):
        if g.basis is None:
            ts = np.arange(1, g.M + 1, dtype=float)
            values = B.T
        else:
            ts = np.linspace(*g.basis.interval, n_points)
            values = evaluate_basis(g.basis, ts) @ B.T
        for l, c in enumerate(order[:-1]):
            boundary = f"{dataset.classes[c]} vs. {ref_name}"
            rows.extend((g.name, boundary, float(t), float(v)) for t, v in zip(ts, values[:, l]))
    return rows


def _write_json(path, obj, sort_keys=True):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=sort_keys)
        fh.write("\n")


class _Stage:
    name = "startup"


def _load_dataset(args, config, stage, out):
    if getattr(args, "dataset", None):
        stage.name = "load-dataset"
        try:
            return dataset_from_dict(json.loads(Path(args.dataset).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise InputError(f"cannot read dataset {args.dataset}: {exc}") from None
    stage.name = "ingest"
    dataset, log = ingest(config.data, config.labels, config)
    _write_json(out / "ingestion_log.json", log)
    return dataset


def _check_convergence(args, path: SelectionPath):
    if path.best is None:
        raise ConvergenceError("no grid point converged")
    if args.fatal_nonconvergence and path.nonconverged:
        raise ConvergenceError(f"{len(path.nonconverged)} grid point(s) did not converge")


def cmd_simulate(args, stage):
    stage.name = "simulate"
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, labels = yeast_like_records(args.n, args.seed)
    with open(out / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "predictor", "time", "value"])
        w.writerows((s, p, repr(t), "" if v is None else repr(v)) for s, p, t, v in rows)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "class"])
        w.writerows(labels)
    # predictor order in the config defines the group order
    _write_json(out / "config.json", yeast_like_config(), sort_keys=False)
    return 0


def _prepare(args, stage):
    stage.name = "config"
    config = load_config(args.config)
    out = Path(args.output_dir) if args.output_dir else config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return config, out


def cmd_smooth(args, stage):
    config, out = _prepare(args, stage)
    dataset = _load_dataset(args, config, stage, out)
    _write_json(out / "dataset.json", dataset_to_dict(dataset))
    return 0


def _run_path(args, stage):
    config, out = _prepare(args, stage)
    dataset = _load_dataset(args, config, stage, out)
    stage.name = "fit"
    path = grid_search(dataset, config.grid, config.controls, jobs=args.jobs)
    path.write_csv(out / "path.csv")
    _check_convergence(args, path)
    return dataset, path, out


def cmd_path(args, stage):
    _run_path(args, stage)
    return 0


def cmd_fit(args, stage):
    dataset, path, out = _run_path(args, stage)
    stage.name = "export"
    _write_json(out / "best_model.json", model_to_dict(dataset, path))
    with open(out / "coefficient_functions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predictor", "boundary", "t", "value"])
        w.writerows((p, b, repr(t), repr(v)) for p, b, t, v in
                    coefficient_function_rows(dataset, path.best.report.coefficients))
    return 0


def cmd_bootstrap(args, stage):
    config, out = _prepare(args, stage)
    dataset = _load_dataset(args, config, stage, out)
    refs = None
    if config.references is not None:
        unknown = [r for r in config.references if r not in dataset.classes]
        if unknown:
            raise InputError(f"unknown reference classes {unknown}")
        refs = [dataset.classes.index(r) for r in config.references]
    stage.name = "bootstrap"
    report = bootstrap_run(
        dataset,
        config.grid,
        B=args.replicates if args.replicates is not None else config.replicates,
        seed=args.seed if args.seed is not None else config.seed,
        references=refs,
        controls=config.controls,
        jobs=args.jobs,
    )
    report.write_boundary_csv(out / "bootstrap_boundaries.csv")
    report.write_variable_csv(out / "bootstrap_variables.csv")
    report.write_json(out / "bootstrap_report.json")
    if args.fatal_nonconvergence and report.nonconverged:
        raise ConvergenceError(f"{report.nonconverged} bootstrap fit(s) did not converge")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bilevel-fda",
        description="Sparse group lasso multiclass logistic regression for functional predictors.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "Config defaults: grid alphas=0,0.25,0.5,0.75,0.95; n_lambda=50; "
            "lambda_min_ratio=1e-3; solver tol=1e-6, max_outer=100, max_inner=1000; "
            "basis order=4, ridge=1e-8; bootstrap replicates=50, seed=0, references=all."
        ),
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic five-class dataset and config")
    p.add_argument("--output-dir", default="synthetic")
    p.add_argument("--n", type=int, default=150, help="number of samples (default 150)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.set_defaults(func=cmd_simulate)

    for name, func, text in [
        ("smooth", cmd_smooth, "ingest and smooth curves into dataset.json"),
        ("path", cmd_path, "fit the tuning grid and write path.csv"),
        ("fit", cmd_fit, "fit the grid and export the BIC-optimal model"),
        ("bootstrap", cmd_bootstrap, "bootstrap boundary and variable selection counts"),
    ]:
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--output-dir", default=None, help="overrides output_dir from the config")
        p.add_argument("--dataset", default=None, help="reuse a dataset.json written by 'smooth'")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
        p.add_argument("--fatal-nonconvergence", action="store_true",
                       help="exit with status 4 if any fit fails to converge")
        if name == "bootstrap":
            p.add_argument("--replicates", type=int, default=None, help="overrides bootstrap.replicates")
            p.add_argument("--seed", type=int, default=None, help="overrides bootstrap.seed")
        p.set_defaults(func=func)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = _Stage()
    try:
        return args.func(args, stage)
    except BilevelFDAError as exc:
        err = {"stage": stage.name, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
