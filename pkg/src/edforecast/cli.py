"""Command-line entry point: ``edforecast <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 model error.
Set ``NO_COLOR`` (or ``EDFORECAST_NO_COLOR``) to disable colored errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from . import evaluation as ev
from . import pipeline as pl
from .core import DataError, SeriesKey
from .explain import ExplainError
from .gbt import GbtError
from .lstm import LstmError
from .sarimax import SarimaxError

EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("config", message)
        sys.exit(EXIT_CONFIG)


def _report(kind: str, message: str) -> None:
    color = sys.stderr.isatty() and not (os.environ.get("NO_COLOR") or os.environ.get("EDFORECAST_NO_COLOR"))
    prefix = f"edforecast: error[{kind}]:"
    if color:
        prefix = f"\033[31m{prefix}\033[0m"
    print(f"{prefix} {message}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edforecast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"edforecast {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, models=False):
        sp.add_argument("--config", help="run configuration JSON (see schemas/run_config.schema.json)")
        if data:
            sp.add_argument("--data", help="dataset directory (series CSVs and covariates.csv)")
        if models:
            sp.add_argument("--models", required=True, help="model artifact directory written by `train`")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int, help="worker processes (default: available cores)")
        return sp

    g = common(sub.add_parser("generate", aliases=["synthgen"], help="write a synthetic dataset"), data=False)
    g.add_argument("--seed", type=int, help="generator seed (overrides the config)")

    i = common(sub.add_parser("impute", help="counterfactual rewrite of the anomaly window"))
    i.add_argument("--seed", type=int, help="imputation seed")
    i.add_argument("--window", metavar="START:END", help="anomaly window, e.g. 2020-03-23:2020-06-30")

    common(sub.add_parser("featurize", help="write per-series feature frames"))

    t = common(sub.add_parser("tune", help="grid search on one series"))
    t.add_argument("--model", action="append", choices=["gbt", "lstm"], help="model kind (repeatable)")
    t.add_argument("--series", help="series key, e.g. TotalAllWards_All")

    for name, helptext in (("train", "fit every (series, model, seed) cell"),):
        tr = common(sub.add_parser(name, help=helptext))
        tr.add_argument("--seeds", type=int, nargs="+", help="run seeds for the LSTM")
        tr.add_argument("--series", nargs="+", help="restrict to these series keys")
        tr.add_argument("--test-days", type=int, help="hold-out length in days")

    ev_p = common(sub.add_parser("evaluate", help="forecast the test set and score it"), models=True)
    ev_p.add_argument("--rolling-one-step", action="store_true",
                      help="score SARIMAX with chained one-step forecasts instead of 7-step ones")
    e = common(sub.add_parser("explain", help="gain importance and SHAP waterfalls"), models=True)
    e.add_argument("--series", nargs="+", help="series to explain")

    r = common(sub.add_parser("report", help="end-to-end bundle: data, models, tables, figures"))
    r.add_argument("--seed", type=int, help="generator seed when data are synthesized")
    return p


def _config(args) -> pl.RunConfig:
    cfg = pl.RunConfig.load(args.config) if args.config else pl.RunConfig()
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            raise pl.ConfigError("--jobs must be >= 1")
        cfg = cfg.replace(jobs=args.jobs)
    if getattr(args, "data", None):
        cfg = cfg.replace(data_dir=args.data)
    exp = cfg.experiment.to_dict()
    changed = False
    if getattr(args, "seeds", None):
        exp["seeds"], changed = list(args.seeds), True
    if getattr(args, "test_days", None):
        exp["test_days"], changed = args.test_days, True
    if args.command == "train" and getattr(args, "series", None):
        exp["keys"], changed = list(args.series), True
    if changed:
        try:
            cfg = cfg.replace(experiment=ev.ExperimentConfig.from_dict(exp))
        except (ValueError, TypeError) as exc:
            raise pl.ConfigError(str(exc)) from None
    return cfg


def _need_data(cfg, command):
    if not cfg.data_dir:
        raise pl.ConfigError(f"`{command}` needs --data (or data_dir in the config)")
    return cfg.data_dir


def run(args) -> str:
    cfg = _config(args)
    cmd = args.command
    if cmd in ("generate", "synthgen"):
        return pl.stage_generate(cfg, args.out, args.seed)
    if cmd == "report":
        return pl.run_report(cfg, args.out, args.seed)
    data = _need_data(cfg, cmd)
    if cmd == "impute":
        if args.window:
            parts = args.window.split(":")
            if len(parts) != 2:
                raise pl.ConfigError("--window expects START:END")
            cfg = pl.RunConfig.from_dict({**cfg.to_dict(), "anomaly_window": parts})
        return pl.stage_impute(cfg, data, args.out, args.seed)
    if cmd == "featurize":
        return pl.stage_featurize(cfg, data, args.out)
    if cmd == "tune":
        tune = dict(cfg.tune)
        if args.model:
            tune["models"] = args.model
        if args.series:
            SeriesKey.parse(args.series)
            tune["series"] = args.series
        return pl.stage_tune(cfg.replace(tune=tune), data, args.out)
    if cmd == "train":
        return pl.stage_train(cfg, data, args.out)
    if cmd == "evaluate":
        return pl.stage_evaluate(cfg, data, args.models, args.out,
                                 "rolling_one_step" if args.rolling_one_step else None)
    if cmd == "explain":
        if args.series:
            cfg = cfg.replace(explain={**cfg.explain, "series": args.series})
        return pl.stage_explain(cfg, data, args.models, args.out)
    raise pl.ConfigError(f"unknown command {cmd}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    out = getattr(args, "out", None)
    try:
        manifest = run(args)
    except pl.ConfigError as exc:
        _report("config", str(exc))
        pl.mark_stale(out, f"config error: {exc}")
        return EXIT_CONFIG
    except (ev.ModelError, SarimaxError, GbtError, LstmError, ExplainError) as exc:
        _report("model", str(exc))
        pl.mark_stale(out, f"model error: {exc}")
        return EXIT_MODEL
    except (DataError, OSError, ValueError) as exc:
        _report("data", str(exc))
        pl.mark_stale(out, f"data error: {exc}")
        return EXIT_DATA
    print(manifest)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
