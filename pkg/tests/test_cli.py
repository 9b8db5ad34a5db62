import csv
import json
import random

import numpy as np
import pytest

from bilevel_fda import cli
from bilevel_fda.basis import BasisSystem, evaluate_basis
from bilevel_fda.exceptions import InputError
from bilevel_fda.model import build_design, posterior_probs

FAST_GRID = {"alphas": [0.5, 0.95], "n_lambda": 6, "lambda_min_ratio": 0.02}


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def config_file(tmp_path, **overrides):
    cfg = {
        "data": "data.csv",
        "labels": "labels.csv",
        "predictors": {"f": {"kind": "functional", "order": 2, "n_basis": 3, "ridge": 0.0}},
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def tiny_inputs(tmp_path, label_rows=None):
    times = [0.0, 0.5, 1.0, 1.5]
    rows = [("s1", "f", t, v) for t, v in zip(times, [1, 2, 3, 4])]
    rows += [("s2", "f", t, v) for t, v in zip(times, [0, 1, 0, 1])]
    write_csv(tmp_path / "data.csv", ["sample_id", "predictor", "time", "value"], rows)
    write_csv(tmp_path / "labels.csv", ["sample_id", "class"], label_rows or [("s1", "a"), ("s2", "b")])


@pytest.fixture(scope="module")
def yeast(tmp_path_factory):
    root = tmp_path_factory.mktemp("yeast")
    assert cli.main(["simulate", "--output-dir", str(root), "--n", "100", "--seed", "1"]) == 0
    cfg = json.loads((root / "config.json").read_text())
    cfg["grid"] = FAST_GRID
    cfg["bootstrap"] = {"replicates": 5, "seed": 7}
    (root / "fast.json").write_text(json.dumps(cfg))
    return root


def run_error(argv, capsys):
    code = cli.main(argv)
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    return code, err


def test_ingest_tiny(tmp_path):
    tiny_inputs(tmp_path)
    cfg = cli.load_config(config_file(tmp_path))
    ds, log = cli.ingest(cfg.data, cfg.labels, cfg)
    assert (ds.n, ds.p, ds.L) == (2, 1, 2)
    assert ds.classes == ("a", "b") and ds.sample_ids == ("s1", "s2")
    assert log["excluded"] == []
    basis = ds.groups[0].basis
    np.testing.assert_allclose(evaluate_basis(basis, [0.0, 0.5, 1.0, 1.5]) @ ds.groups[0].coefs[0], [1, 2, 3, 4],
                               atol=1e-10)


def test_missing_label_names_sample(tmp_path, capsys):
    tiny_inputs(tmp_path, label_rows=[("s1", "a")])
    code, err = run_error(["smooth", str(config_file(tmp_path))], capsys)
    assert code == 2
    assert err["stage"] == "ingest" and "s2" in err["message"]


def test_label_without_data(tmp_path):
    tiny_inputs(tmp_path, label_rows=[("s1", "a"), ("s2", "b"), ("s3", "a")])
    cfg = cli.load_config(config_file(tmp_path))
    with pytest.raises(InputError, match="s3"):
        cli.ingest(cfg.data, cfg.labels, cfg)


@pytest.mark.parametrize(
    "row,match",
    [(("s1", "g", 0.0, 1.0), "unknown predictor"), (("s1", "f", "late", 1.0), "non-numeric"),
     (("s1", "f", 2.0, "x1"), "non-numeric")],
)
def test_bad_rows(tmp_path, row, match):
    tiny_inputs(tmp_path)
    with open(tmp_path / "data.csv", "a", newline="") as fh:
        csv.writer(fh).writerow(row)
    cfg = cli.load_config(config_file(tmp_path))
    with pytest.raises(InputError, match=match):
        cli.ingest(cfg.data, cfg.labels, cfg)


def test_filters_and_empty_result(tmp_path):
    tiny_inputs(tmp_path)
    with open(tmp_path / "data.csv", "a", newline="") as fh:
        csv.writer(fh).writerow(("s1", "f", 2.0, "NA"))
    cfg = cli.load_config(config_file(tmp_path, filters={"max_missing": {"f": 1}}))
    ds, log = cli.ingest(cfg.data, cfg.labels, cfg)
    assert ds.n == 2
    cfg = cli.load_config(config_file(tmp_path, filters={"complete": ["f"]}))
    with pytest.raises(InputError, match="no samples"):
        cli.ingest(cfg.data, cfg.labels, cfg)


def test_ill_posed_smoothing_exit_code(tmp_path, capsys):
    tiny_inputs(tmp_path)
    path = config_file(tmp_path, predictors={"f": {"kind": "functional", "order": 4, "n_basis": 6, "ridge": 0.0}})
    code, err = run_error(["smooth", str(path)], capsys)
    assert code == 3
    assert err["error"] == "IllPosedSmoothingError" and "'f'" in err["message"]


def test_bad_config(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text("{not json")
    code, err = run_error(["fit", str(path)], capsys)
    assert code == 2 and err["stage"] == "config"


def test_yeast_shaped_ingestion(yeast):
    cfg = cli.load_config(yeast / "config.json")
    ds, log = cli.ingest(cfg.data, cfg.labels, cfg)
    assert ds.p == 6 and ds.L == 5
    assert [g.kind for g in ds.groups] == ["scalar"] * 2 + ["functional"] * 4
    assert ds.groups[0].M == 2 and ds.groups[1].M == 2
    assert ds.n + len(log["excluded"]) == 100
    assert all(e["reason"] for e in log["excluded"])


def test_ingestion_is_order_insensitive(yeast, tmp_path):
    rows = (yeast / "data.csv").read_text().splitlines()
    random.Random(0).shuffle(body := rows[1:])
    (tmp_path / "data.csv").write_text("\n".join([rows[0]] + body) + "\n")
    labels = (yeast / "labels.csv").read_text().splitlines()
    (tmp_path / "labels.csv").write_text("\n".join([labels[0]] + labels[:0:-1]) + "\n")
    cfg_a = cli.load_config(yeast / "config.json")
    (tmp_path / "config.json").write_text((yeast / "config.json").read_text())
    cfg_b = cli.load_config(tmp_path / "config.json")
    a, _ = cli.ingest(cfg_a.data, cfg_a.labels, cfg_a)
    b, _ = cli.ingest(cfg_b.data, cfg_b.labels, cfg_b)
    assert cli.dataset_to_dict(a) == cli.dataset_to_dict(b)


def test_smooth_then_fit_from_dataset(yeast, tmp_path):
    out = tmp_path / "s"
    assert cli.main(["smooth", str(yeast / "fast.json"), "--output-dir", str(out)]) == 0
    ds = cli.dataset_from_dict(json.loads((out / "dataset.json").read_text()))
    assert ds.p == 6
    assert cli.main(["path", str(yeast / "fast.json"), "--output-dir", str(out), "--dataset",
                     str(out / "dataset.json")]) == 0
    assert len((out / "path.csv").read_text().splitlines()) == 1 + 12


def test_fit_outputs(yeast, tmp_path):
    out = tmp_path / "fit"
    assert cli.main(["fit", str(yeast / "fast.json"), "--output-dir", str(out)]) == 0
    for name in ["path.csv", "best_model.json", "coefficient_functions.csv", "ingestion_log.json"]:
        assert (out / name).exists()
    model = json.loads((out / "best_model.json").read_text())
    cfg = cli.load_config(yeast / "fast.json")
    ds, _ = cli.ingest(cfg.data, cfg.labels, cfg)
    assert model["reference_class"] == ds.classes[-1]

    # round trip: probabilities from the exported coefficients
    coefs = cli.load_model(out / "best_model.json")
    probs = posterior_probs(build_design(ds), coefs)
    from bilevel_fda.selection import grid_search, TuningGrid
    best = grid_search(ds, TuningGrid(**{k: tuple(v) if isinstance(v, list) else v for k, v in FAST_GRID.items()}),
                       cfg.controls).best
    np.testing.assert_allclose(probs, posterior_probs(build_design(ds), best.report.coefficients), atol=1e-12)

    # coefficient functions against independent evaluation
    with open(out / "coefficient_functions.csv") as fh:
        rows = list(csv.DictReader(fh))
    for pred in model["predictors"]:
        if pred["kind"] != "functional":
            continue
        basis = BasisSystem.from_dict(pred["basis"])
        B = np.array(pred["coefficients"])
        mine = [r for r in rows if r["predictor"] == pred["name"]]
        assert len(mine) == 200 * 4
        for l, boundary in enumerate(pred["active_boundaries"]):
            sub = [r for r in mine if r["boundary"] == boundary]
            t = np.array([float(r["t"]) for r in sub])
            v = np.array([float(r["value"]) for r in sub])
            np.testing.assert_allclose(v, evaluate_basis(basis, t) @ B[l], atol=1e-10)


def test_default_grid_path_size(yeast, tmp_path):
    out = tmp_path / "p"
    assert cli.main(["path", str(yeast / "config.json"), "--output-dir", str(out), "--jobs", "4"]) == 0
    assert len((out / "path.csv").read_text().splitlines()) == 1 + 50 * 5


def test_bootstrap_byte_identical(yeast, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"b{k}"
        assert cli.main(["bootstrap", str(yeast / "fast.json"), "--output-dir", str(out),
                         "--replicates", "5", "--seed", "7"]) == 0
        outs.append(out)
    for name in ["bootstrap_boundaries.csv", "bootstrap_variables.csv", "bootstrap_report.json"]:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rows = (outs[0] / "bootstrap_boundaries.csv").read_text().splitlines()
    assert len(rows) == 11 and len(rows[0].split(",")) == 7


def test_fatal_nonconvergence(yeast, tmp_path, capsys):
    cfg = json.loads((yeast / "fast.json").read_text())
    cfg["solver"] = {"max_outer": 1}
    cfg["data"] = str(yeast / "data.csv")
    cfg["labels"] = str(yeast / "labels.csv")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    code, err = run_error(["path", str(path), "--output-dir", str(tmp_path), "--fatal-nonconvergence"], capsys)
    assert code == 4 and err["error"] == "ConvergenceError"


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    assert "n_lambda=50" in text and "tol=1e-6" in text and "ridge=1e-8" in text
