"""Experiment orchestration: stratified Monte Carlo cross-validation over
feature sets, hyperparameter search, importance-based pruning, and the
time-to-conversion summaries derived from per-subject survival curves.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataset import Modality, SurvivalDataset, stratified_split
from .errors import NumericalError, SurvkitError
from .hazard import StepFunction, breslow, kaplan_meier, survival_curves
from .importance import permutation_importance, prune_nonpositive
from .metrics import MetricReport, c_td_index, integrated_brier, paired_t_test
from .model import DEFAULT_CONFIG, CoxMLP, NetworkConfig, predict_risk, train
from .preprocess import (
    ImputePolicy,
    feature_set_name,
    fit_plan,
    select_features,
)

log = logging.getLogger(__name__)

FEATURE_SETS = (
    (Modality.GEN,),
    (Modality.MRI,),
    (Modality.CDC,),
    (Modality.GEN, Modality.MRI),
    (Modality.GEN, Modality.CDC),
    (Modality.MRI, Modality.CDC),
    (Modality.GEN, Modality.MRI, Modality.CDC),
)

METRICS = ("ctd", "ibs")


@dataclass
class ExperimentPlan:
    feature_sets: list = field(default_factory=lambda: [list(fs) for fs in FEATURE_SETS])
    n_splits: int = 10
    train_frac: float = 0.8
    internal_val_frac: float = 0.2
    impute_policy: ImputePolicy = ImputePolicy.OutOfRangeMax3
    network: NetworkConfig = DEFAULT_CONFIG
    horizon_years: float = 10.0
    sentinel_years: float = 20.0
    seeds: list | None = None
    base_seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        self.feature_sets = [
            tuple(Modality(m) for m in fs) if not isinstance(fs, str) else (Modality(fs),)
            for fs in self.feature_sets
        ]
        self.impute_policy = ImputePolicy(self.impute_policy)
        if isinstance(self.network, dict):
            self.network = NetworkConfig(**self.network)
        if self.seeds is None:
            ss = np.random.SeedSequence(self.base_seed)
            self.seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(self.n_splits)]
        self.seeds = [int(s) for s in self.seeds]
        if len(self.seeds) != self.n_splits:
            raise ValueError("need one seed per split")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("split seeds must be distinct")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_sets"] = [feature_set_name(fs) for fs in self.feature_sets]
        d["impute_policy"] = self.impute_policy.value
        return d


# -- one split -------------------------------------------------------------


@dataclass
class SplitResult:
    """Everything fitted and scored in one split for one feature set."""

    split: int
    feature_set: str
    test_ids: list
    ctd: float
    ibs: float
    ibs_bounds: tuple
    plan_json: str
    model_digest: str
    baseline_csv: str
    curves: dict  # subject id -> StepFunction
    best_epoch: int | None
    n_epochs: int
    importance: dict | None = None

    def artifact_hashes(self) -> dict:
        sha = lambda s: hashlib.sha256(s.encode()).hexdigest()
        return {
            "plan": sha(self.plan_json),
            "model": self.model_digest,
            "baseline": sha(self.baseline_csv),
        }


def split_indices(ds: SurvivalDataset, train_frac: float, val_frac: float, seed: int):
    """Stratified train/test split, then a stratified fit/validation split of train."""
    train_ds, test_ds = stratified_split(ds, train_frac, seed)
    fit_ds, val_ds = stratified_split(train_ds, 1.0 - val_frac, seed + 1)
    return train_ds, fit_ds, val_ds, test_ds


def ibs_bounds(test_ds: SurvivalDataset, horizon: float) -> tuple:
    event_times = test_ds.durations[test_ds.events]
    t1 = float(event_times.min()) if event_times.size else 0.0
    return (t1, float(horizon)) if t1 < horizon else (0.0, float(horizon))


def run_split(ds: SurvivalDataset, modalities, split: int, seed: int,
              plan: ExperimentPlan, importance_K: int = 0) -> SplitResult:
    """Fit and score one feature set on one split.

    The preprocessing plan and the Breslow baseline are fitted on the
    training part only (internal fit + validation subjects).
    """
    sub = select_features(ds, modalities)
    train_ds, fit_ds, val_ds, test_ds = split_indices(
        sub, plan.train_frac, plan.internal_val_frac, seed
    )
    pre = fit_plan(train_ds, plan.impute_policy)
    config = plan.network.replace(seed=seed)
    net, report = train(config, fit_ds, val_ds, pre)
    base = breslow(predict_risk(net, pre, train_ds), train_ds.durations, train_ds.events)
    test_risk = predict_risk(net, pre, test_ds)
    curves = survival_curves(base, test_risk)
    ctd = c_td_index(curves, test_ds.durations, test_ds.events)
    G = kaplan_meier(test_ds.durations, test_ds.events, target="censoring")
    t1, t2 = ibs_bounds(test_ds, plan.horizon_years)
    ibs = integrated_brier(curves, test_ds.durations, test_ds.events, G, t1, t2)
    imp = None
    if importance_K:
        imp = permutation_importance(net, pre, base, test_ds, importance_K, seed).to_dict()
    return SplitResult(
        split=split,
        feature_set=feature_set_name(modalities),
        test_ids=[str(i) for i in test_ds.ids],
        ctd=ctd,
        ibs=ibs,
        ibs_bounds=(t1, t2),
        plan_json=pre.to_json(),
        model_digest=net.digest(),
        baseline_csv=base.to_csv(),
        curves=dict(zip((str(i) for i in test_ds.ids), curves)),
        best_epoch=report.best_epoch,
        n_epochs=report.n_epochs,
        importance=imp,
    )


def _run_split_task(args):
    ds, modalities, split, seed, plan, K = args
    try:
        return run_split(ds, modalities, split, seed, plan, K)
    except SurvkitError as exc:
        exc.args = (f"split {split}: {exc}",)
        raise


def _run_splits(ds, modalities, plan: ExperimentPlan, importance_K=0) -> list:
    tasks = [(ds, modalities, k, s, plan, importance_K) for k, s in enumerate(plan.seeds)]
    if plan.jobs > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
            return list(pool.map(_run_split_task, tasks))
    return [_run_split_task(t) for t in tasks]


# -- feature-set experiments -----------------------------------------------


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    splits: dict  # feature-set name -> list of SplitResult
    reports: dict  # (feature-set name, metric) -> MetricReport

    def t_test_matrix(self, metric: str) -> dict:
        names = list(self.splits)
        out = {}
        for a, b in itertools.combinations(names, 2):
            va = self.reports[(a, metric)].values
            vb = self.reports[(b, metric)].values
            if len(va) < 2:
                out[f"{a} vs {b}"] = None
                continue
            r = paired_t_test(va, vb)
            out[f"{a} vs {b}"] = {"t": r.t_stat, "p": r.p, "degenerate": r.degenerate}
        return out

    def test_counts(self, feature_set: str | None = None) -> dict:
        name = feature_set or next(iter(self.splits))
        return dict(Counter(i for r in self.splits[name] for i in r.test_ids))

    def manifest(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "metrics": {
                f"{fs}/{m}": {**self.reports[(fs, m)].summary(), "values": self.reports[(fs, m)].values}
                for fs in self.splits for m in METRICS
            },
            "t_tests": {m: self.t_test_matrix(m) for m in METRICS},
            "splits": {
                fs: [
                    {
                        "split": r.split,
                        "ctd": r.ctd,
                        "ibs": r.ibs,
                        "ibs_bounds": list(r.ibs_bounds),
                        "best_epoch": r.best_epoch,
                        "n_epochs": r.n_epochs,
                        "artifacts": r.artifact_hashes(),
                        "importance": r.importance,
                    }
                    for r in results
                ]
                for fs, results in self.splits.items()
            },
            "test_counts": {fs: self.test_counts(fs) for fs in self.splits},
        }

    def manifest_json(self) -> str:
        return dumps(self.manifest())


def jsonable(obj):
    """Recursively convert to plain JSON types; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def dumps(obj) -> str:
    """Deterministic JSON text (sorted keys, no NaN)."""
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False)


def run_feature_set_experiments(plan: ExperimentPlan, ds: SurvivalDataset,
                                importance_K: int = 0) -> ExperimentResult:
    """Monte Carlo cross-validation of every feature set on shared splits.

    All feature sets see the same sequence of split seeds, so per-split
    scores are paired across feature sets.
    """
    splits, reports = {}, {}
    for modalities in plan.feature_sets:
        name = feature_set_name(modalities)
        results = _run_splits(ds, modalities, plan, importance_K)
        splits[name] = results
        reports[(name, "ctd")] = MetricReport("ctd", [r.ctd for r in results])
        reports[(name, "ibs")] = MetricReport("ibs", [r.ibs for r in results])
        log.info("%s: %s, %s", name, reports[(name, "ctd")], reports[(name, "ibs")])
    return ExperimentResult(plan, splits, reports)


# -- hyperparameter search -------------------------------------------------


SEARCH_SPACE = {
    "hidden_layers": [1, 2, 3, 4, 5, 6],
    "nodes_per_layer": [10, 25, 32, 50, 64, 75, 100],
    "dropout": [0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
    "weight_decay": [0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
    "batch_size": [16, 32, 64, 128, 256, 512],
}


@dataclass
class SearchResult:
    best: NetworkConfig
    scores: list  # (config, mean validation loss)

    def to_dict(self) -> dict:
        return {
            "best": asdict(self.best),
            "scores": [{"config": asdict(c), "mean_val_loss": (l if math.isfinite(l) else None)}
                       for c, l in self.scores],
        }


def _n_params(config: NetworkConfig, n_features: int) -> int:
    return CoxMLP(n_features, config).n_parameters()


def hyperparameter_search(space: dict, ds: SurvivalDataset, n_splits: int = 100,
                          base: NetworkConfig = DEFAULT_CONFIG, budget: int | None = None,
                          train_frac: float = 0.8, seed: int = 0,
                          impute_policy=ImputePolicy.OutOfRangeMax3) -> SearchResult:
    """Pick the configuration with the lowest mean validation Cox loss.

    Each candidate is trained on ``n_splits`` stratified train/validation
    splits (shared across candidates). The whole grid is searched when it
    has at most ``budget`` points, otherwise ``budget`` points are sampled
    uniformly. Diverging runs score ``inf``. Ties go to fewer parameters,
    then lower dropout.
    """
    if not space or any(len(v) == 0 for v in space.values()):
        raise ValueError("search space is empty")
    keys = list(space)
    grid = [dict(zip(keys, vals)) for vals in itertools.product(*(space[k] for k in keys))]
    rng = np.random.default_rng(seed)
    if budget is not None and len(grid) > budget:
        grid = [grid[i] for i in sorted(rng.choice(len(grid), budget, replace=False))]
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_splits)]
    splits = []
    for s in seeds:
        fit_ds, val_ds = stratified_split(ds, train_frac, s)
        splits.append((s, fit_ds, val_ds, fit_plan(fit_ds, impute_policy)))
    scored = []
    for point in grid:
        config = base.replace(**point)
        losses = []
        for s, fit_ds, val_ds, pre in splits:
            try:
                _, report = train(config.replace(seed=s), fit_ds, val_ds, pre)
                losses.append(report.best_val_loss)
            except NumericalError:
                losses.append(math.inf)
        scored.append((config, float(np.mean(losses))))
    n_features = ds.n_features
    best = min(
        scored,
        key=lambda cl: (cl[1], _n_params(cl[0], n_features), cl[0].dropout),
    )[0]
    return SearchResult(best, scored)


# -- pruning and retraining ------------------------------------------------


@dataclass
class PruneResult:
    before: dict  # metric -> MetricReport
    after: dict
    retained: list
    mean_importance: dict
    t_tests: dict

    def to_dict(self) -> dict:
        return {
            "retained": self.retained,
            "mean_importance": self.mean_importance,
            "before": {m: r.summary() | {"values": r.values} for m, r in self.before.items()},
            "after": {m: r.summary() | {"values": r.values} for m, r in self.after.items()},
            "t_tests": self.t_tests,
        }


def importance_prune_retrain(plan: ExperimentPlan, ds: SurvivalDataset, feature_set,
                             K: int = 10) -> PruneResult:
    """Importance on every split, prune features with mean importance <= 0,
    retrain on the retained columns with the same splits and settings."""
    modalities = tuple(Modality(m) for m in feature_set)
    results = _run_splits(ds, modalities, plan, importance_K=K)
    sub = select_features(ds, modalities)
    imp = np.mean(
        [[f["mean_importance"] for f in r.importance["features"]] for r in results], axis=0
    )
    retained = prune_nonpositive(imp, sub.schema)
    cols = [sub.feature_names.index(n) for n in retained]
    pruned = sub.with_columns(cols)
    after = _run_splits(pruned, modalities, plan)
    before_r = {"ctd": MetricReport("ctd", [r.ctd for r in results]),
                "ibs": MetricReport("ibs", [r.ibs for r in results])}
    after_r = {"ctd": MetricReport("ctd", [r.ctd for r in after]),
               "ibs": MetricReport("ibs", [r.ibs for r in after])}
    tests = {}
    if plan.n_splits >= 2:
        for m in METRICS:
            r = paired_t_test(after_r[m].values, before_r[m].values)
            tests[m] = {"t": r.t_stat, "p": r.p, "degenerate": r.degenerate}
    return PruneResult(before_r, after_r, retained,
                       dict(zip(sub.feature_names, map(float, imp))), tests)


# -- per-subject curves and conversion analysis ----------------------------


def aggregate_subject_curves(per_split_curves: Sequence[dict]):
    """Average each subject's test-set curves over the splits it appeared in.

    Parameters
    ----------
    per_split_curves : sequence of dict
        One ``{subject id: StepFunction}`` mapping per split.

    Returns
    -------
    curves : dict
        Subject id -> averaged StepFunction on the union of its grids.
    counts : dict
        Subject id -> number of test-set appearances.
    """
    grouped = {}
    for split_curves in per_split_curves:
        for sid, curve in split_curves.items():
            grouped.setdefault(sid, []).append(curve)
    out = {}
    for sid, curves in grouped.items():
        if len(curves) == 1:
            out[sid] = curves[0]
            continue
        grid = np.unique(np.concatenate([c.times for c in curves]))
        values = np.mean([np.atleast_1d(c(grid)) for c in curves], axis=0)
        before = float(np.mean([c.value_before_first for c in curves]))
        out[sid] = StepFunction(grid, values, before)
    return out, {sid: len(c) for sid, c in grouped.items()}


@dataclass(frozen=True)
class ConversionRecord:
    subject_id: str
    true_time: float
    predicted_time: float
    predicted_converter: bool

    @property
    def difference(self) -> float:
        return self.predicted_time - self.true_time

    @property
    def bin(self) -> int:
        return round_half_away(self.difference)


def round_half_away(x: float) -> int:
    """Nearest integer, halves rounded away from zero (0.5 -> 1, -0.5 -> -1)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def predicted_event_time(curve: StepFunction, horizon: float = 10.0,
                         sentinel: float = 20.0, threshold: float = 0.5):
    """First time within ``horizon`` at which the curve is at or below 0.5.

    Returns ``(time, True)`` for a predicted converter, else
    ``(sentinel, False)``.
    """
    if curve.value_before_first <= threshold:
        return 0.0, True
    hits = np.flatnonzero((curve.values <= threshold) & (curve.times <= horizon))
    if hits.size:
        return float(curve.times[hits[0]]), True
    return float(sentinel), False


def conversion_records(curves: dict, ds: SurvivalDataset, horizon=10.0, sentinel=20.0,
                       progressive_only: bool = True) -> list:
    records = []
    for sid, T, D in zip(ds.ids, ds.durations, ds.events):
        sid = str(sid)
        if sid not in curves or (progressive_only and not D):
            continue
        t, conv = predicted_event_time(curves[sid], horizon, sentinel)
        records.append(ConversionRecord(sid, float(T), t, conv))
    return records


def conversion_histogram(records: Sequence[ConversionRecord]) -> dict:
    """Counts and percentages of (predicted - true) time, binned to whole years.

    Bin ``k`` holds differences in ``(k - 0.5, k + 0.5)``; exact halves go
    away from zero. Non-converters enter with their sentinel predicted time.
    """
    n = len(records)
    counts = Counter(r.bin for r in records)
    nonconv = Counter(r.bin for r in records if not r.predicted_converter)
    bins = sorted(counts)
    return {
        "n": n,
        "bins": [
            {
                "bin": b,
                "count": counts[b],
                "percent": 100.0 * counts[b] / n,
                "non_converters": nonconv.get(b, 0),
            }
            for b in bins
        ],
        "converters": sum(r.predicted_converter for r in records),
        "non_converters": sum(not r.predicted_converter for r in records),
    }


def survival_binning(curves: Sequence[StepFunction], groups: Sequence,
                     probe_times=(1.0, 2.0, 5.0, 10.0), n_bins: int = 10) -> dict:
    """Proportion of each group's subjects per survival-probability decile.

    Bins are ``[0, 0.1), ..., [0.9, 1.0]``; a probability of exactly 1 falls
    in the top bin.

    Returns
    -------
    dict
        ``{(group, probe_time): array of n_bins proportions}``
    """
    groups = np.asarray(groups)
    if len(curves) != len(groups):
        raise ValueError("one group label per curve is required")
    out = {}
    for t in probe_times:
        p = np.array([c(t) for c in curves], dtype=float)
        idx = np.clip(np.floor(p * n_bins).astype(int), 0, n_bins - 1)
        for g in dict.fromkeys(groups.tolist()):
            sel = idx[groups == g]
            out[(g, float(t))] = np.bincount(sel, minlength=n_bins) / max(sel.size, 1)
    return out


def binning_rows(binning: dict, n_bins: int = 10) -> list:
    """Flatten :func:`survival_binning` output to CSV-ready rows."""
    rows = []
    for (g, t), props in binning.items():
        for b, prop in enumerate(props):
            rows.append({"group": g, "time": t, "bin_low": b / n_bins,
                         "bin_high": (b + 1) / n_bins, "proportion": float(prop)})
    return rows


def conversion_analysis(result: ExperimentResult, ds: SurvivalDataset,
                        feature_set: str | None = None) -> dict:
    """Aggregate test curves across splits, then bin survival and conversion times."""
    name = feature_set or next(iter(result.splits))
    curves, counts = aggregate_subject_curves([r.curves for r in result.splits[name]])
    ids = [str(i) for i in ds.ids]
    tested = [i for i in ids if i in curves]
    events = dict(zip(ids, ds.events.tolist()))
    groups = ["progressive" if events[i] else "non-progressive" for i in tested]
    binning = survival_binning([curves[i] for i in tested], groups)
    records = conversion_records(curves, ds, result.plan.horizon_years, result.plan.sentinel_years)
    return {
        "feature_set": name,
        "test_counts": counts,
        "never_tested": [i for i in ids if i not in curves],
        "binning": binning_rows(binning),
        "conversion": [asdict(r) | {"difference": r.difference, "bin": r.bin} for r in records],
        "histogram": conversion_histogram(records),
    }
