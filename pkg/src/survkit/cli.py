"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    Modality,
    atomic_write_text,
    dataset_to_csv,
    load_csv,
    schema_hash,
    schema_to_csv,
    stratified_split,
    synthesize_cox,
)
from .errors import DataError, NumericalError
from .harness import (
    SEARCH_SPACE,
    ExperimentPlan,
    binning_rows,
    conversion_analysis,
    conversion_histogram,
    conversion_records,
    dumps,
    hyperparameter_search,
    importance_prune_retrain,
    predicted_event_time,
    run_feature_set_experiments,
    survival_binning,
)
from .hazard import BaselineHazard, StepFunction, breslow, kaplan_meier, survival_curves
from .importance import permutation_importance
from .metrics import brier_score_at, c_index, c_td_index, integrated_brier
from .model import DEFAULT_CONFIG, CoxMLP, NetworkConfig, predict_risk, train
from .preprocess import ImputePolicy, PreprocessPlan, fit_plan, parse_feature_set, select_features

log = logging.getLogger("survkit")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# -- parser ----------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="flat JSON file with the same keys as the flags")
    p.add_argument("--out", default=".", help="output directory")


def _data_args(p):
    p.add_argument("--data", required=True, help="data CSV")
    p.add_argument("--schema", required=True, help="schema CSV (name,modality,kind)")


def _network_args(p):
    d = DEFAULT_CONFIG
    p.add_argument("--hidden-layers", type=int, default=d.hidden_layers)
    p.add_argument("--nodes-per-layer", type=int, default=d.nodes_per_layer)
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--initial-lr", type=float, default=d.initial_lr)
    p.add_argument("--lr-decay-per-cycle", type=float, default=d.lr_decay_per_cycle)
    p.add_argument("--initial-cycle-epochs", type=int, default=d.initial_cycle_epochs)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--early-stop-patience", type=int, default=d.early_stop_patience)
    p.add_argument("--impute", choices=[p.value for p in ImputePolicy],
                   default=ImputePolicy.OutOfRangeMax3.value)
    p.add_argument("--modalities", default="GEN+MRI+CDC",
                   help="feature set, e.g. CDC or GEN+MRI")


def _model_args(p):
    p.add_argument("--model", required=True,
                   help="directory with model.json, plan.json and baseline.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="survkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic proportional-hazards dataset")
    _common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--beta", type=_floats, default=[1.0, -0.5, 0.25])
    p.add_argument("--baseline-rate", type=float, default=0.1)
    p.add_argument("--censor-rate", type=float, default=0.05)
    p.add_argument("--nonlinearity", choices=["linear", "quadratic"], default="linear")
    p.add_argument("--n-noise", type=int, default=0)
    p.add_argument("--modality", choices=[m.value for m in Modality], default="CDC")

    p = sub.add_parser("train", help="fit the network, preprocessing plan and baseline hazard")
    _common(p)
    _data_args(p)
    _network_args(p)
    p.add_argument("--val-frac", type=float, default=0.2)

    p = sub.add_parser("predict", help="per-subject survival curves and predicted event times")
    _common(p)
    _data_args(p)
    _model_args(p)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--sentinel", type=float, default=20.0)

    p = sub.add_parser("eval", help="Ctd, Brier score and IBS on a held-out file")
    _common(p)
    _data_args(p)
    _model_args(p)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--times", type=_floats, default=[1.0, 2.0, 5.0, 10.0])

    p = sub.add_parser("cv", help="Monte Carlo cross-validation over feature sets")
    _common(p)
    _data_args(p)
    _network_args(p)
    p.add_argument("--feature-sets", default="GEN;MRI;CDC;GEN+MRI;GEN+CDC;MRI+CDC;GEN+MRI+CDC",
                   help="semicolon-separated feature sets")
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--sentinel", type=float, default=20.0)

    p = sub.add_parser("importance", help="permutation importance of a trained model")
    _common(p)
    _data_args(p)
    p.add_argument("--model", help="trained model directory (single-model mode)")
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--prune-retrain", action="store_true",
                   help="cross-validated importance, pruning and retraining instead")
    _network_args(p)
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--horizon", type=float, default=10.0)

    p = sub.add_parser("search", help="hyperparameter search by mean validation loss")
    _common(p)
    _data_args(p)
    _network_args(p)
    p.add_argument("--space", help="JSON file mapping hyperparameter -> list of values")
    p.add_argument("--splits", type=int, default=100)
    p.add_argument("--budget", type=int)

    p = sub.add_parser("report", help="survival binning and conversion histogram tables")
    _common(p)
    _data_args(p)
    p.add_argument("--curves", required=True, help="curves.csv written by predict")
    p.add_argument("--probe-times", type=_floats, default=[1.0, 2.0, 5.0, 10.0])
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--sentinel", type=float, default=20.0)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_help())
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a flat JSON object")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(k.replace("-", "_") for k in cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        subparser.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


# -- helpers ---------------------------------------------------------------


def _sha_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(out: Path, name: str, text: str) -> None:
    atomic_write_text(out / name, text)


def _echo_config(out: Path, args, inputs=()) -> None:
    echo = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    echo["version"] = __version__
    echo["input_hashes"] = {str(p): _sha_file(p) for p in inputs if p}
    _write(out, "config.json", dumps(echo))


def _network_config(args) -> NetworkConfig:
    return NetworkConfig(
        hidden_layers=args.hidden_layers,
        nodes_per_layer=args.nodes_per_layer,
        dropout=args.dropout,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        initial_lr=args.initial_lr,
        lr_decay_per_cycle=args.lr_decay_per_cycle,
        initial_cycle_epochs=args.initial_cycle_epochs,
        max_epochs=args.max_epochs,
        early_stop_patience=args.early_stop_patience,
        seed=args.seed,
    )


def _load(args):
    return load_csv(args.data, args.schema)


def _load_model(model_dir):
    d = Path(model_dir)
    try:
        plan = PreprocessPlan.from_json((d / "plan.json").read_text())
        net_doc = json.loads((d / "model.json").read_text())
        base = BaselineHazard.from_csv((d / "baseline.csv").read_text())
    except OSError as exc:
        raise DataError(f"cannot read model directory {d}: {exc}") from None
    return net_doc, plan, base


def _select_for_model(ds, net_doc, plan):
    names = ds.feature_names
    missing = [n for n in plan.names if n not in names]
    if missing:
        raise DataError(f"data lacks model features {missing}")
    sub = ds.with_columns([names.index(n) for n in plan.names])
    net = CoxMLP.from_dict(net_doc, expected_schema_hash=schema_hash(sub.schema))
    return sub, net


def _rows_to_csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[h] for h in header])
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# -- commands --------------------------------------------------------------


def cmd_synth(args) -> None:
    ds = synthesize_cox(args.n, args.beta, args.baseline_rate, args.censor_rate,
                        args.nonlinearity, args.seed, args.n_noise, Modality(args.modality))
    out = _out_dir(args)
    _write(out, "data.csv", dataset_to_csv(ds))
    _write(out, "schema.csv", schema_to_csv(ds.schema))
    _echo_config(out, args)
    log.info("wrote %d subjects (%d events) to %s", len(ds), ds.events.sum(), out)


def cmd_train(args) -> None:
    ds = select_features(_load(args), parse_feature_set(args.modalities))
    config = _network_config(args)
    fit_ds, val_ds = stratified_split(ds, 1.0 - args.val_frac, args.seed)
    plan = fit_plan(ds, ImputePolicy(args.impute))
    net, report = train(config, fit_ds, val_ds, plan)
    base = breslow(predict_risk(net, plan, ds), ds.durations, ds.events)
    out = _out_dir(args)
    _write(out, "model.json", net.to_json(schema_hash(ds.schema)))
    _write(out, "plan.json", plan.to_json())
    _write(out, "baseline.csv", base.to_csv())
    _write(out, "train_report.json", dumps(report.to_dict()))
    _echo_config(out, args, [args.data, args.schema])


def cmd_predict(args) -> None:
    net_doc, plan, base = _load_model(args.model)
    ds, net = _select_for_model(_load(args), net_doc, plan)
    risks = predict_risk(net, plan, ds)
    curves = survival_curves(base, risks)
    curve_rows, pred_rows = [], []
    for sid, T, D, g, c in zip(ds.ids, ds.durations, ds.events, risks, curves):
        t, conv = predicted_event_time(c, args.horizon, args.sentinel)
        pred_rows.append({"id": sid, "duration": _fmt(T), "event": int(D), "risk": _fmt(g),
                          "predicted_time": _fmt(t), "predicted_converter": int(conv)})
        curve_rows.append({"id": sid, "time": "0.0", "survival": _fmt(c.value_before_first)})
        for tt, v in zip(c.times, c.values):
            curve_rows.append({"id": sid, "time": _fmt(tt), "survival": _fmt(v)})
    out = _out_dir(args)
    _write(out, "predictions.csv", _rows_to_csv(
        pred_rows, ["id", "duration", "event", "risk", "predicted_time", "predicted_converter"]))
    _write(out, "curves.csv", _rows_to_csv(curve_rows, ["id", "time", "survival"]))
    _echo_config(out, args, [args.data, args.schema])


def cmd_eval(args) -> None:
    net_doc, plan, base = _load_model(args.model)
    ds, net = _select_for_model(_load(args), net_doc, plan)
    risks = predict_risk(net, plan, ds)
    curves = survival_curves(base, risks)
    G = kaplan_meier(ds.durations, ds.events, target="censoring")
    ev = ds.durations[ds.events]
    t1 = float(ev.min()) if ev.size and ev.min() < args.horizon else 0.0
    ibs = integrated_brier(curves, ds.durations, ds.events, G, t1, args.horizon,
                           return_details=True)
    brier = {}
    for t in args.times:
        r = brier_score_at(curves, ds.durations, ds.events, G, t, return_excluded=True)
        brier[repr(float(t))] = {"score": r.score, "excluded": r.excluded}
    metrics = {
        "ctd": c_td_index(curves, ds.durations, ds.events),
        "c_index": c_index(risks, ds.durations, ds.events),
        "ibs": ibs.value,
        "ibs_bounds": [ibs.t1, ibs.t2],
        "ibs_refinement_error": ibs.refinement_error,
        "brier": brier,
        "n": len(ds),
    }
    out = _out_dir(args)
    _write(out, "metrics.json", dumps(metrics))
    _echo_config(out, args, [args.data, args.schema])
    print(f"ctd={metrics['ctd']:.4f} ibs={metrics['ibs']:.4f}")


def _experiment_plan(args, feature_sets) -> ExperimentPlan:
    return ExperimentPlan(
        feature_sets=feature_sets,
        n_splits=args.splits,
        impute_policy=ImputePolicy(args.impute),
        network=_network_config(args),
        horizon_years=args.horizon,
        sentinel_years=getattr(args, "sentinel", 20.0),
        base_seed=args.seed,
        jobs=args.jobs,
    )


def cmd_cv(args) -> None:
    ds = _load(args)
    feature_sets = [parse_feature_set(s) for s in args.feature_sets.split(";") if s.strip()]
    plan = _experiment_plan(args, feature_sets)
    result = run_feature_set_experiments(plan, ds)
    out = _out_dir(args)
    _write(out, "manifest.json", result.manifest_json())
    for (fs, metric), report in result.reports.items():
        _write(out, f"{fs}_{metric}.csv", report.to_csv())
    last = list(result.splits)[-1]
    analysis = conversion_analysis(result, ds, last)
    _write(out, "conversion.json", dumps(analysis))
    _write(out, "binning.csv", _rows_to_csv(
        analysis["binning"], ["group", "time", "bin_low", "bin_high", "proportion"]))
    _echo_config(out, args, [args.data, args.schema])
    for (fs, metric), report in result.reports.items():
        print(f"{fs:>12} {report}")


def cmd_importance(args) -> None:
    out = _out_dir(args)
    ds = _load(args)
    if args.prune_retrain:
        fs = parse_feature_set(args.modalities)
        plan = _experiment_plan(args, [fs])
        res = importance_prune_retrain(plan, ds, fs, K=args.K)
        _write(out, "prune.json", dumps(res.to_dict()))
    else:
        if not args.model:
            raise UsageError("importance needs --model or --prune-retrain")
        net_doc, pre, base = _load_model(args.model)
        sub, net = _select_for_model(ds, net_doc, pre)
        report = permutation_importance(net, pre, base, sub, args.K, args.seed)
        _write(out, "importance.csv", report.to_csv())
    _echo_config(out, args, [args.data, args.schema])


def cmd_search(args) -> None:
    ds = select_features(_load(args), parse_feature_set(args.modalities))
    if args.space:
        space = json.loads(Path(args.space).read_text())
    else:
        space = SEARCH_SPACE
    res = hyperparameter_search(space, ds, n_splits=args.splits, base=_network_config(args),
                                budget=args.budget, seed=args.seed,
                                impute_policy=ImputePolicy(args.impute))
    out = _out_dir(args)
    _write(out, "search.json", dumps(res.to_dict()))
    _write(out, "best_config.json", dumps(asdict(res.best)))
    _echo_config(out, args, [args.data, args.schema] + ([args.space] if args.space else []))


def _read_curves(path) -> dict:
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "time", "survival"]:
            raise DataError(f"{path}: expected header id,time,survival")
        for r in reader:
            rows.setdefault(r["id"], []).append((float(r["time"]), float(r["survival"])))
    curves = {}
    for sid, pts in rows.items():
        before = pts[0][1]
        steps = [(t, v) for t, v in pts[1:]]
        curves[sid] = StepFunction([t for t, _ in steps], [v for _, v in steps], before)
    return curves


def cmd_report(args) -> None:
    ds = _load(args)
    curves = _read_curves(args.curves)
    ids = [str(i) for i in ds.ids if str(i) in curves]
    events = dict(zip((str(i) for i in ds.ids), ds.events.tolist()))
    groups = ["progressive" if events[i] else "non-progressive" for i in ids]
    binning = survival_binning([curves[i] for i in ids], groups, args.probe_times)
    records = conversion_records(curves, ds, args.horizon, args.sentinel)
    hist = conversion_histogram(records)
    out = _out_dir(args)
    _write(out, "binning.csv", _rows_to_csv(
        binning_rows(binning), ["group", "time", "bin_low", "bin_high", "proportion"]))
    _write(out, "histogram.csv", _rows_to_csv(
        hist["bins"], ["bin", "count", "percent", "non_converters"]))
    _write(out, "conversion.json", dumps(
        {"records": [asdict(r) | {"difference": r.difference, "bin": r.bin} for r in records],
         "histogram": hist}))
    _echo_config(out, args, [args.data, args.schema, args.curves])


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "importance": cmd_importance,
    "search": cmd_search,
    "report": cmd_report,
}


def cli_dispatch(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    stage = "arguments"
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        stage = args.command
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"survkit {stage}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"survkit {stage}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
