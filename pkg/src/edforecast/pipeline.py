"""Run configuration and the file-to-file stages behind the command line.

Each stage reads only its input directories and writes one output
directory holding a ``manifest.json`` (resolved configuration, its hash,
seeds, library versions and a digest of every file written). Paths in
manifests are relative, so two runs of one configuration produce
byte-identical bundles wherever they are written.
"""

from __future__ import annotations

import dataclasses
import hashlib
import importlib.metadata
import json
import logging
import os
import platform
import shutil
from dataclasses import dataclass, field
from importlib import resources

import jsonschema

from . import __version__
from . import evaluation as ev
from . import explain as ex
from . import imputer
from . import plotting
from . import synthgen
from . import tuner
from .core import (Complexity, Dataset, DataError, SeriesKey, Ward, dump_dataset, load_dataset,
                   parse_date, read_json, write_json)
from .features import build_frame, chronological_split, make_windows

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
STALE = "STALE"
TOTAL_MAJOR = SeriesKey(Ward.TOTAL, Complexity.MAJOR)
TOTAL_ALL = SeriesKey(Ward.TOTAL, Complexity.ALL)


class ConfigError(ValueError):
    pass


# --- configuration ------------------------------------------------------------

def _schema() -> dict:
    return json.loads(resources.files("edforecast").joinpath("schemas/run_config.schema.json").read_text())


def validate_config_dict(d: dict) -> None:
    try:
        jsonschema.validate(d, _schema(), format_checker=jsonschema.FormatChecker())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


@dataclass(frozen=True)
class RunConfig:
    data_dir: str | None = None
    synthetic: dict = field(default_factory=dict)
    anomaly_window: tuple | None = None
    impute: dict = field(default_factory=dict)
    experiment: ev.ExperimentConfig = ev.ExperimentConfig()
    tune: dict = field(default_factory=dict)
    explain: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    jobs: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        validate_config_dict(d)
        d = dict(d)
        try:
            if d.get("anomaly_window") is not None:
                a, b = (parse_date(x) for x in d["anomaly_window"])
                if b < a:
                    raise ConfigError("anomaly_window end precedes start")
                d["anomaly_window"] = (a, b)
            if "experiment" in d:
                d["experiment"] = ev.ExperimentConfig.from_dict(d["experiment"])
            if d.get("synthetic"):
                synthgen.GeneratorConfig.from_dict(d["synthetic"])
        except (DataError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config invalid: {exc}") from None
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        """JSON-ready form; unset optional fields are omitted."""
        d = {
            "data_dir": self.data_dir,
            "synthetic": self.synthetic,
            "anomaly_window": None if self.anomaly_window is None
            else [x.isoformat() for x in self.anomaly_window],
            "impute": self.impute,
            "experiment": self.experiment.to_dict(),
            "tune": self.tune,
            "explain": self.explain,
            "report": self.report,
            "jobs": self.jobs,
        }
        return {k: v for k, v in d.items() if v is not None}

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    @property
    def n_jobs(self) -> int:
        return self.jobs or ev.default_jobs()

    def generator_config(self, seed: int | None = None) -> synthgen.GeneratorConfig:
        d = dict(self.synthetic)
        if seed is not None:
            d["seed"] = seed
        return synthgen.GeneratorConfig.from_dict(d)

    def imputer_config(self) -> imputer.ImputerConfig:
        fields = {f.name for f in dataclasses.fields(imputer.ImputerConfig)}
        return imputer.ImputerConfig(**{k: v for k, v in self.impute.items() if k in fields})


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# --- manifests ----------------------------------------------------------------

def versions() -> dict:
    out = {"edforecast": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "matplotlib", "jsonschema"):
        try:
            out[pkg] = importlib.metadata.version(pkg)
        except importlib.metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def list_files(root) -> list[str]:
    out = []
    for dirpath, _, files in os.walk(root):
        for f in files:
            rel = os.path.relpath(os.path.join(dirpath, f), root)
            if rel not in (MANIFEST, STALE):
                out.append(rel.replace(os.sep, "/"))
    return sorted(out)


def write_manifest(out_dir, stage: str, config: RunConfig, extra: dict | None = None) -> str:
    cfg = config.to_dict()
    cfg.pop("data_dir", None)  # location only; content is covered by the input digests
    manifest = {
        "stage": stage,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seeds": {"experiment": list(config.experiment.seeds),
                  "impute": config.impute.get("seed", 1),
                  "synthetic": config.synthetic.get("seed", 1)},
        "versions": versions(),
        "files": {f: _digest(os.path.join(out_dir, f)) for f in list_files(out_dir)},
    }
    manifest.update(extra or {})
    path = os.path.join(out_dir, MANIFEST)
    write_json(manifest, path)
    stale = os.path.join(out_dir, STALE)
    if os.path.exists(stale):
        os.remove(stale)
    return path


def mark_stale(out_dir, message: str) -> None:
    if out_dir and os.path.isdir(out_dir):
        with open(os.path.join(out_dir, STALE), "w") as fh:
            fh.write(message.rstrip() + "\n")


def _prepare_out(out_dir) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from None


def read_manifest(directory) -> dict | None:
    path = os.path.join(directory, MANIFEST)
    return read_json(path) if os.path.exists(path) else None


def _input_digest(directory) -> dict:
    return {f: _digest(os.path.join(directory, f)) for f in list_files(directory) if f.endswith(".csv")}


# --- data loading -------------------------------------------------------------

def resolve_window(config: RunConfig, data_dir) -> tuple | None:
    if config.anomaly_window is not None:
        return config.anomaly_window
    m = read_manifest(data_dir)
    if m and m.get("anomaly_window"):
        a, b = m["anomaly_window"]
        return parse_date(a), parse_date(b)
    return None


def load_data(data_dir, config: RunConfig) -> Dataset:
    ds = load_dataset(data_dir, resolve_window(config, data_dir))
    if ds.covariates is None:
        raise DataError(f"{data_dir}: covariates.csv is required")
    return ds


# --- stages -------------------------------------------------------------------

def stage_generate(config: RunConfig, out_dir, seed: int | None = None) -> str:
    _prepare_out(out_dir)
    gen = config.generator_config(seed)
    truth = synthgen.generate(gen)
    synthgen.emit(truth, out_dir)
    emitted = read_json(os.path.join(out_dir, MANIFEST))
    cfg = config.replace(synthetic=gen.to_dict())
    return write_manifest(out_dir, "generate", cfg, {
        "kind": "synthetic", "anomaly_window": emitted["anomaly_window"],
        "series": emitted["series"], "notes": emitted["notes"],
    })


def stage_impute(config: RunConfig, data_dir, out_dir, seed: int | None = None) -> str:
    window = resolve_window(config, data_dir)
    if window is None:
        raise ConfigError("no anomaly window given and none recorded with the data")
    ds = load_data(data_dir, config)
    seed = config.impute.get("seed", 1) if seed is None else seed
    new, reports, _ = imputer.impute_dataset(ds, window, seed, config.imputer_config())
    _prepare_out(out_dir)
    dump_dataset(new, out_dir)
    write_json([r.to_dict() for r in reports], os.path.join(out_dir, "impute_report.json"))
    with open(os.path.join(out_dir, "impute_summary.csv"), "w") as fh:
        fh.write("series,window_start,window_end,n_replaced,sigma,seed\n")
        for r in reports:
            fh.write(f"{r.series},{r.window[0]},{r.window[1]},{r.n_replaced},{r.sigma!r},{r.seed}\n")
    for key in (TOTAL_ALL, TOTAL_MAJOR):
        s = ds[key]
        plotting.impute_plot(s.dates, s.counts, new[key].counts, window,
                             os.path.join(out_dir, f"impute_{key.name}.svg"),
                             title=f"{key.name}: observed and counterfactual counts")
    cfg = config.replace(impute={**config.impute, "seed": seed})
    return write_manifest(out_dir, "impute", cfg, {
        "kind": "imputed", "imputed_window": [window[0].isoformat(), window[1].isoformat()],
        "anomaly_window": None, "inputs": _input_digest(data_dir),
    })


def stage_featurize(config: RunConfig, data_dir, out_dir) -> str:
    ds = load_data(data_dir, config)
    _prepare_out(out_dir)
    for key in config.experiment.keys:
        build_frame(ds[key], ds.covariates).to_csv(os.path.join(out_dir, f"{key.name}.csv"))
    return write_manifest(out_dir, "featurize", config, {"inputs": _input_digest(data_dir)})


def stage_tune(config: RunConfig, data_dir, out_dir) -> str:
    ds = load_data(data_dir, config)
    series = SeriesKey.parse(config.tune.get("series", TOTAL_ALL.name))
    frame = build_frame(ds[series], ds.covariates)
    train, _ = chronological_split(make_windows(frame), config.experiment.test_days)
    _prepare_out(out_dir)
    winners = {}
    for kind in config.tune.get("models", ["gbt"]):
        grid = config.tune.get(f"{kind}_grid")
        base = dict(config.tune.get(f"{kind}_base", {}))
        if kind == "lstm":
            base.setdefault("seed", min(config.experiment.seeds))
        space = (tuner.SearchSpace(kind, {k: tuple(v) for k, v in grid.items()}, base) if grid
                 else tuner.SearchSpace.default(kind, **base))
        result = tuner.grid_search(space, train, n_jobs=config.n_jobs)
        result.write_leaderboard(os.path.join(out_dir, f"leaderboard_{kind}.csv"))
        winners[kind] = tuner.trial_to_dict(result.winner)
        write_json({"space": tuner.space_to_dict(space), "trials": [tuner.trial_to_dict(t) for t in result.trials]},
                   os.path.join(out_dir, f"trials_{kind}.json"))
    write_json(winners, os.path.join(out_dir, "winners.json"))
    return write_manifest(out_dir, "tune", config, {"series": series.name, "inputs": _input_digest(data_dir)})


def model_filename(job: ev.Job) -> str:
    if job.model == "lstm":
        return f"{job.key.name}/lstm_seed{job.seed}.json"
    return f"{job.key.name}/{job.model}.json"


def stage_train(config: RunConfig, data_dir, out_dir) -> str:
    ds = load_data(data_dir, config)
    models, failures = ev.train_all(ds, config.experiment, config.n_jobs)
    _prepare_out(out_dir)
    jobs = []
    for job in ev.plan_jobs(config.experiment):
        entry = {"series": job.key.name, "model": job.model, "seed": job.seed}
        if job in models:
            path = os.path.join(out_dir, model_filename(job))
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w") as fh:
                json.dump(models[job], fh, sort_keys=True)
                fh.write("\n")
            entry["file"] = model_filename(job)
        jobs.append(entry)
    write_json([dataclasses.asdict(f) for f in failures], os.path.join(out_dir, "failures.json"))
    return write_manifest(out_dir, "train", config, {
        "kind": "models", "jobs": jobs, "inputs": _input_digest(data_dir),
    })


def load_models(models_dir) -> tuple[ev.ExperimentConfig, dict, list]:
    m = read_manifest(models_dir) if os.path.isdir(models_dir) else None
    if not m or m.get("kind") != "models":
        raise ev.ModelError(f"missing model artifacts in {models_dir} (run `train` first)")
    exp = ev.ExperimentConfig.from_dict(m["config"]["experiment"])
    models = {}
    for entry in m["jobs"]:
        if "file" not in entry:
            continue
        path = os.path.join(models_dir, entry["file"])
        if not os.path.exists(path):
            raise ev.ModelError(f"missing model artifact {entry['file']}")
        models[ev.Job(SeriesKey.parse(entry["series"]), entry["model"], int(entry["seed"]))] = read_json(path)
    failures = [ev.Failure(**f) for f in read_json(os.path.join(models_dir, "failures.json"))]
    return exp, models, failures


def stage_evaluate(config: RunConfig, data_dir, models_dir, out_dir, sarimax_mode: str | None = None) -> str:
    exp, models, train_failures = load_models(models_dir)
    if sarimax_mode is not None:
        exp = dataclasses.replace(exp, sarimax_mode=sarimax_mode)
    ds = load_data(data_dir, config)
    records, failures = ev.forecast_all(ds, exp, models)
    failures = train_failures + failures
    report = ev.compute_metrics(records, failures)
    _prepare_out(out_dir)
    ev.write_records(records, os.path.join(out_dir, "records.csv"))
    report.write_cells_csv(os.path.join(out_dir, "metrics_runs.csv"))
    report.write_table_csv(os.path.join(out_dir, "metrics_table.csv"))
    write_json(report.to_json_dict(), os.path.join(out_dir, "metrics.json"))
    for view in ("Major", "All"):
        for metric in ("mae", "mape"):
            if any(r[0] == view and r[3] == metric for r in report.table_rows()):
                plotting.metrics_plot(report, os.path.join(out_dir, f"{metric}_{view}.svg"), view, metric)
    week_seed = int(config.report.get("week_seed", 1))
    for name in config.report.get("week_series", [TOTAL_MAJOR.name, TOTAL_ALL.name]):
        recs = [r for r in records if r.series == name]
        if not recs:
            continue
        diag = ev.week_diagnostics(recs, name, week_seed)
        diag.write_csv(os.path.join(out_dir, f"weeks_{name}.csv"))
        plotting.weeks_plot(diag, os.path.join(out_dir, f"weeks_{name}.svg"),
                            title=f"{name}: best and worst weeks (seed {week_seed})")
    cfg = config.replace(experiment=exp)
    return write_manifest(out_dir, "evaluate", cfg, {
        "n_records": len(records), "n_failures": len(failures),
        "inputs": _input_digest(data_dir),
    })


def stage_explain(config: RunConfig, data_dir, models_dir, out_dir) -> str:
    exp, models, _ = load_models(models_dir)
    ds = load_data(data_dir, config)
    top_k = int(config.explain.get("top_k", 10))
    n_samples = int(config.explain.get("n_samples", 1))
    names = config.explain.get("series")
    if names is None:  # the totals if they were trained, else every GBT series
        trained = [j.key.name for j in models if j.model == "gbt"]
        names = [k.name for k in (TOTAL_MAJOR, TOTAL_ALL) if k.name in trained] or sorted(trained)
    _prepare_out(out_dir)
    summary = []
    for name in names:
        key = SeriesKey.parse(name)
        job = ev.Job(key, "gbt", 0)
        if job not in models:
            raise ev.ModelError(f"no GBT model for {name} in {models_dir}")
        model = ev.model_from_dict(models[job])[1]
        prep = ev.prepare_series(ds, key, exp.test_days)
        imp = ex.gain_importance(model)
        imp.write_csv(os.path.join(out_dir, f"importance_{name}.csv"))
        plotting.importance_plot(imp.pooled, os.path.join(out_dir, f"importance_{name}.svg"),
                                 title=f"{name}: gain importance")
        with open(os.path.join(out_dir, f"importance_{name}_by_feature.csv"), "w") as fh:
            fh.write("feature,gain,share\n")
            for f, g, s in imp.by_base_feature():
                fh.write(f"{f},{g!r},{s!r}\n")
        for i in range(len(prep.test) - n_samples, len(prep.test)):
            sample = prep.test[i]
            res = ex.tree_shap(model, sample, prep.train)
            stem = f"waterfall_{name}_{sample.origin.isoformat()}"
            ex.waterfall_export(res.mean, os.path.join(out_dir, stem + ".csv"), top_k)
            summary.append({"series": name, "origin": sample.origin.isoformat(),
                            "base": res.mean.base, "prediction": res.mean.prediction,
                            "max_abs_residual": max(abs(e.residual) for e in res.per_horizon)})
    write_json({"method": "path-dependent Shapley values by coalition enumeration; "
                          "covers counted on the training windows",
                "explanations": summary}, os.path.join(out_dir, "explain_summary.json"))
    return write_manifest(out_dir, "explain", config.replace(experiment=exp),
                          {"inputs": _input_digest(data_dir)})


def run_report(config: RunConfig, out_dir, seed: int | None = None) -> str:
    """Generate (or read) data, impute, train, evaluate and explain into one bundle."""
    _prepare_out(out_dir)
    data = os.path.join(out_dir, "data")
    if config.data_dir:
        src = config.data_dir
        if os.path.exists(data):
            shutil.rmtree(data)
        os.makedirs(data)
        for f in list_files(src):
            if f.endswith(".csv") or f == MANIFEST:
                shutil.copyfile(os.path.join(src, f), os.path.join(data, f))
        if os.path.exists(os.path.join(src, MANIFEST)):
            shutil.copyfile(os.path.join(src, MANIFEST), os.path.join(data, MANIFEST))
    else:
        stage_generate(config, data, seed)
    imputed = os.path.join(out_dir, "imputed")
    if config.impute.get("enabled", True) and resolve_window(config, data) is not None:
        stage_impute(config, data, imputed)
    else:
        imputed = data
    if config.report.get("tune", False):
        stage_tune(config, imputed, os.path.join(out_dir, "tune"))
    models = os.path.join(out_dir, "models")
    stage_train(config, imputed, models)
    stage_evaluate(config, imputed, models, os.path.join(out_dir, "evaluation"))
    if "gbt" in config.experiment.models:
        stage_explain(config, imputed, models, os.path.join(out_dir, "explain"))
    return write_manifest(out_dir, "report", config, {"bundle": sorted(
        d for d in os.listdir(out_dir) if os.path.isdir(os.path.join(out_dir, d)))})
