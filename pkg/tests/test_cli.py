"""End-to-end checks of the command-line interface on small configurations."""

import csv
import hashlib
import json
import os
import subprocess
import sys

import pytest

from edforecast import cli

WARDS = ["Cardiology", "EmergencyMedicine", "GeneralMedicine", "Neurology", "Other",
         "Paediatric", "Psychiatry", "Surgery", "TotalAllWards"]

SMALL = {
    "synthetic": {"n_days": 500, "start": "2019-01-01",
                  "anomaly": {"start": "2019-06-01", "end": "2019-07-15", "depth": 0.5}},
    "experiment": {"models": ["lstm", "sarimax", "gbt"], "seeds": [1, 2], "test_days": 60,
                   "keys": ["TotalAllWards_All", "Neurology_Major"],
                   "gbt": {"n_trees": 5}, "lstm": {"max_epochs": 2, "hidden_size": 8, "dense_units": 16},
                   "sarimax_order": [0, 1, 1, 0, 1, 1]},
    "jobs": 1,
}


def _write(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh)
    return str(path)


def _tree(root, skip_manifests=False):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            if skip_manifests and f == "manifest.json":
                continue
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    return _write(tmp_path_factory.mktemp("cfg") / "small.json", SMALL)


@pytest.fixture(scope="module")
def full_report(tmp_path_factory):
    """One report over all 18 Major/All series."""
    cfg = json.loads(json.dumps(SMALL))
    cfg["experiment"]["keys"] = [f"{w}_{v}" for w in WARDS for v in ("Major", "All")]
    d = tmp_path_factory.mktemp("report")
    path = _write(d / "cfg.json", cfg)
    assert cli.main(["report", "--config", path, "--out", str(d / "out")]) == 0
    return d / "out"


def test_generate_twice_identical(tmp_path, small_cfg):
    for name in ("a", "b"):
        assert cli.main(["generate", "--config", small_cfg, "--out", str(tmp_path / name), "--seed", "1"]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b
    assert "covariates.csv" in a and "TotalAllWards_All.csv" in a and len(a) == 27 + 2


def test_generate_seed_changes_data(tmp_path, small_cfg):
    cli.main(["generate", "--config", small_cfg, "--out", str(tmp_path / "a"), "--seed", "1"])
    cli.main(["generate", "--config", small_cfg, "--out", str(tmp_path / "b"), "--seed", "2"])
    assert _tree(tmp_path / "a")["Surgery_Major.csv"] != _tree(tmp_path / "b")["Surgery_Major.csv"]


def test_evaluate_without_train_is_model_error(tmp_path, small_cfg, capsys):
    cli.main(["generate", "--config", small_cfg, "--out", str(tmp_path / "data")])
    code = cli.main(["evaluate", "--config", small_cfg, "--data", str(tmp_path / "data"),
                     "--models", str(tmp_path / "nomodels"), "--out", str(tmp_path / "ev")])
    assert code == cli.EXIT_MODEL
    assert "missing model artifacts" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    bad = _write(tmp_path / "bad.json", {"experiment": {"seeds": "one"}})
    code = cli.main(["generate", "--config", bad, "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    assert "error[config]" in capsys.readouterr().err


def test_bad_jobs_and_unknown_flag(tmp_path):
    assert cli.main(["generate", "--out", str(tmp_path / "o"), "--jobs", "0"]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        cli.main(["generate", "--out", str(tmp_path / "o"), "--bogus"])
    assert exc.value.code == cli.EXIT_CONFIG


def test_missing_data_dir_is_data_error(tmp_path, small_cfg):
    code = cli.main(["featurize", "--config", small_cfg, "--data", str(tmp_path / "nothing"),
                     "--out", str(tmp_path / "f")])
    assert code == cli.EXIT_DATA


def test_stale_marker_cleared_on_success(tmp_path, small_cfg):
    out = tmp_path / "g"
    out.mkdir()
    bad = _write(tmp_path / "bad.json", {"synthetic": {"n_days": -5}})
    assert cli.main(["generate", "--config", bad, "--out", str(out)]) != 0
    assert os.path.exists(out / "STALE")
    assert cli.main(["generate", "--config", small_cfg, "--out", str(out)]) == 0
    assert not os.path.exists(out / "STALE")


def test_composable_pipeline(tmp_path, small_cfg):
    d = str(tmp_path)
    steps = [
        ["generate", "--config", small_cfg, "--out", f"{d}/data"],
        ["impute", "--config", small_cfg, "--data", f"{d}/data", "--out", f"{d}/imp"],
        ["featurize", "--config", small_cfg, "--data", f"{d}/imp", "--out", f"{d}/feat"],
        ["train", "--config", small_cfg, "--data", f"{d}/imp", "--out", f"{d}/models"],
        ["evaluate", "--config", small_cfg, "--data", f"{d}/imp", "--models", f"{d}/models", "--out", f"{d}/ev"],
        ["explain", "--config", small_cfg, "--data", f"{d}/imp", "--models", f"{d}/models", "--out", f"{d}/ex"],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    with open(f"{d}/ev/records.csv") as fh:
        recs = list(csv.DictReader(fh))
    # 2 series x (lstm 2 seeds + gbt 2 seeds + sarimax + baseline) x 54 origins
    models = {r["model"] for r in recs}
    assert models == {"lstm", "sarimax", "gbt", "baseline"}
    man = json.load(open(f"{d}/ev/manifest.json"))
    for f, digest in man["files"].items():
        with open(os.path.join(d, "ev", f), "rb") as fh:
            assert hashlib.sha256(fh.read()).hexdigest() == digest


def test_manifest_contents(full_report):
    man = json.load(open(full_report / "manifest.json"))
    assert man["stage"] == "report"
    assert len(man["config_sha256"]) == 64
    assert man["seeds"]["experiment"] == [1, 2]
    assert {"python", "numpy", "scipy", "edforecast"} <= set(man["versions"])
    assert {"data", "imputed", "models", "evaluation", "explain"} <= set(man["bundle"])
    assert "evaluation/metrics_table.csv" in man["files"]


def test_manifest_reproduces_bundle(tmp_path, full_report):
    """The config stored in the manifest alone regenerates the same tables."""
    man = json.load(open(full_report / "manifest.json"))
    cfg = _write(tmp_path / "from_manifest.json", man["config"])
    assert cli.main(["report", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    a, b = _tree(full_report), _tree(tmp_path / "again")
    assert a == b


def test_report_table_shape(full_report):
    with open(full_report / "evaluation" / "metrics_table.csv") as fh:
        rows = list(csv.DictReader(fh))
    for metric in ("mae", "mape"):
        sub = [r for r in rows if r["metric"] == metric]
        assert len(sub) == 9 * 2 * 4
        cells = {(r["view"], r["ward"], r["model"]) for r in sub}
        assert cells == {(v, w, m) for v in ("Major", "All") for w in WARDS
                         for m in ("lstm", "sarimax", "gbt", "baseline")}
    for r in rows:
        assert float(r["mean"]) >= 0
        if r["model"] in ("sarimax", "baseline"):
            assert r["std"] == "" and r["n_runs"] == "1"
        else:
            assert r["n_runs"] == "2"
        if r["model"] == "gbt":
            assert float(r["std"]) == 0.0
    figs = os.listdir(full_report / "evaluation")
    assert {"mae_All.svg", "mae_Major.svg", "mape_All.svg", "mape_Major.svg"} <= set(figs)


def test_results_independent_of_jobs(tmp_path, small_cfg):
    for n in ("1", "2"):
        assert cli.main(["report", "--config", small_cfg, "--out", str(tmp_path / n), "--jobs", n]) == 0
    a = _tree(tmp_path / "1", skip_manifests=True)
    b = _tree(tmp_path / "2", skip_manifests=True)
    assert a == b


def test_help_and_module_entry():
    res = subprocess.run([sys.executable, "-m", "edforecast", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate", "impute", "featurize", "tune", "train", "evaluate", "explain", "report"):
        assert cmd in res.stdout
