"""Missing-value imputation, standardization and modality-based feature selection."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from .dataset import Kind, Modality, SurvivalDataset
from .errors import DataError

STD_FLOOR = 1e-12


class ImputePolicy(str, Enum):
    OutOfRangeMax3 = "OutOfRangeMax3"
    MeanImpute = "MeanImpute"
    MeanThenMax3 = "MeanThenMax3"


DEFAULT_SCALED_KINDS = frozenset({Kind.categorical, Kind.continuous})


@dataclass(frozen=True)
class PreprocessPlan:
    """Per-feature statistics fitted on a training set.

    ``fill`` is the value substituted for missing raw cells before scaling.
    ``post_fill`` is only used by ``MeanThenMax3``: the value written into
    originally-missing cells after scaling.
    """

    names: tuple
    kinds: tuple
    mean: np.ndarray
    std: np.ndarray
    observed_max: np.ndarray
    fill: np.ndarray
    post_fill: np.ndarray
    policy: ImputePolicy
    scaled_kinds: frozenset = DEFAULT_SCALED_KINDS

    @property
    def scaled(self) -> np.ndarray:
        return np.array([k in self.scaled_kinds for k in self.kinds], dtype=bool)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value,
            "scaled_kinds": sorted(k.value for k in self.scaled_kinds),
            "features": {
                name: {
                    "mean": float(self.mean[j]),
                    "std": float(self.std[j]),
                    "max": float(self.observed_max[j]),
                    "kind": self.kinds[j].value,
                    "fill": float(self.fill[j]),
                    "post_fill": float(self.post_fill[j]),
                }
                for j, name in enumerate(self.names)
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessPlan":
        feats = d["features"]
        names = tuple(feats)

        def col(key):
            return np.array([feats[n][key] for n in names], dtype=float)

        return cls(
            names=names,
            kinds=tuple(Kind(feats[n]["kind"]) for n in names),
            mean=col("mean"),
            std=col("std"),
            observed_max=col("max"),
            fill=col("fill"),
            post_fill=col("post_fill"),
            policy=ImputePolicy(d["policy"]),
            scaled_kinds=frozenset(Kind(k) for k in d["scaled_kinds"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "PreprocessPlan":
        return cls.from_dict(json.loads(text))


def fit_plan(
    train: SurvivalDataset,
    policy: ImputePolicy = ImputePolicy.OutOfRangeMax3,
    scaled_kinds=DEFAULT_SCALED_KINDS,
) -> PreprocessPlan:
    """Fit imputation and scaling statistics on ``train`` only.

    Missing cells are filled first (3 * observed max, or the observed mean)
    and the filled column is what the mean and standard deviation are
    computed from. Standard deviations use ``ddof=0`` and are floored at
    ``STD_FLOOR``.
    """
    policy = ImputePolicy(policy)
    if len(train) == 0:
        raise DataError("cannot fit a preprocessing plan on an empty dataset")
    X = np.asarray(train.X, dtype=float)
    missing = np.isnan(X)
    p = X.shape[1]
    mean = np.empty(p)
    std = np.empty(p)
    observed_max = np.empty(p)
    fill = np.empty(p)
    post_fill = np.full(p, np.nan)
    scaled = np.array([f.kind in scaled_kinds for f in train.schema], dtype=bool)
    for j, feat in enumerate(train.schema):
        observed = X[~missing[:, j], j]
        if observed.size == 0:
            raise DataError(f"feature {feat.name!r} has no observed training values")
        observed_max[j] = observed.max()
        if policy is ImputePolicy.OutOfRangeMax3:
            fill[j] = 3.0 * observed_max[j]
        else:
            fill[j] = observed.mean()
        column = np.where(missing[:, j], fill[j], X[:, j])
        mean[j] = column.mean()
        std[j] = max(column.std(), STD_FLOOR)
        if policy is ImputePolicy.MeanThenMax3:
            transformed = (column - mean[j]) / std[j] if scaled[j] else column
            post_fill[j] = 3.0 * transformed.max()
    return PreprocessPlan(
        names=tuple(train.feature_names),
        kinds=tuple(f.kind for f in train.schema),
        mean=mean,
        std=std,
        observed_max=observed_max,
        fill=fill,
        post_fill=post_fill,
        policy=policy,
        scaled_kinds=frozenset(scaled_kinds),
    )


def apply_plan(plan: PreprocessPlan, ds: SurvivalDataset) -> np.ndarray:
    """Return the dense, imputed and scaled feature matrix of ``ds``."""
    if tuple(ds.feature_names) != plan.names:
        raise DataError("dataset features do not match the preprocessing plan")
    X = np.array(ds.X, dtype=float)
    missing = np.isnan(X)
    X = np.where(missing, plan.fill, X)
    scaled = plan.scaled
    X[:, scaled] = (X[:, scaled] - plan.mean[scaled]) / plan.std[scaled]
    if plan.policy is ImputePolicy.MeanThenMax3:
        X = np.where(missing, plan.post_fill, X)
    return X


def select_features(ds: SurvivalDataset, modalities: Iterable) -> SurvivalDataset:
    """Keep the columns whose modality is in ``modalities``, in schema order."""
    wanted = {Modality(m) for m in modalities}
    if not wanted:
        raise ValueError("at least one modality is required")
    columns = [j for j, f in enumerate(ds.schema) if f.modality in wanted]
    if not columns:
        names = "+".join(sorted(m.value for m in wanted))
        raise DataError(f"no features with modality {names}")
    return ds.with_columns(columns)


def parse_feature_set(text: str) -> tuple:
    """``"GEN+MRI"`` -> ``(Modality.GEN, Modality.MRI)``."""
    parts = [p.strip() for p in text.split("+") if p.strip()]
    try:
        return tuple(Modality(p) for p in parts)
    except ValueError:
        raise DataError(f"unknown modality in feature set {text!r}") from None


def feature_set_name(modalities) -> str:
    order = [Modality.GEN, Modality.MRI, Modality.CDC]
    mods = {Modality(m) for m in modalities}
    return "+".join(m.value for m in order if m in mods)
