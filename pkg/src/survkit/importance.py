"""Permutation feature importance scored with the time-dependent C-index."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import SurvivalDataset
from .errors import DataError
from .hazard import BaselineHazard, survival_curves
from .metrics import c_td_index
from .model import CoxMLP, predict_risk
from .preprocess import PreprocessPlan

log = logging.getLogger(__name__)


@dataclass
class ImportanceReport:
    """Reference score and per-shuffle scores for every feature.

    ``scores[j, k]`` is the score with column j shuffled for the k-th time.
    """

    names: list
    modalities: list
    reference: float
    scores: np.ndarray

    @property
    def K(self) -> int:
        return self.scores.shape[1]

    @property
    def importance(self) -> np.ndarray:
        return self.reference - self.scores.mean(axis=1)

    @property
    def std(self) -> np.ndarray:
        """Standard deviation of the per-shuffle importances ``s - s_kj``."""
        if self.K < 2:
            return np.zeros(len(self.names))
        return self.scores.std(axis=1, ddof=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "modality", "mean_importance", "std", "K"])
        for name, mod, imp, sd in zip(self.names, self.modalities, self.importance, self.std):
            w.writerow([name, mod, repr(float(imp)), repr(float(sd)), self.K])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "K": self.K,
            "features": [
                {"feature": n, "modality": m, "mean_importance": float(i), "std": float(s)}
                for n, m, i, s in zip(self.names, self.modalities, self.importance, self.std)
            ],
        }


def ctd_score(net: CoxMLP, plan: PreprocessPlan, base: BaselineHazard,
              ds: SurvivalDataset) -> float:
    risks = predict_risk(net, plan, ds)
    return c_td_index(survival_curves(base, risks), ds.durations, ds.events)


def permutation_importance(
    net: CoxMLP,
    plan: PreprocessPlan,
    base: BaselineHazard,
    test_ds: SurvivalDataset,
    K: int = 10,
    seed: int = 0,
    permute: Callable[[np.random.Generator, int], np.ndarray] | None = None,
) -> ImportanceReport:
    """Drop in time-dependent C-index when one raw feature column is shuffled.

    Each column is permuted ``K`` times across subjects before imputation,
    so missing markers travel with their values. Feature ``j`` draws its
    permutations from its own child of ``SeedSequence(seed)``. ``permute``
    replaces the permutation draw (``rng.permutation(n)`` by default).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if net is None:
        raise DataError("a trained network is required")
    permute = permute or (lambda rng, n: rng.permutation(n))
    reference = ctd_score(net, plan, base, test_ds)
    X = np.asarray(test_ds.X)
    n, p = X.shape
    scores = np.empty((p, K))
    for j, child in enumerate(np.random.SeedSequence(seed).spawn(p)):
        rng = np.random.default_rng(child)
        for k in range(K):
            Xs = X.copy()
            Xs[:, j] = X[permute(rng, n), j]
            scores[j, k] = ctd_score(net, plan, base, test_ds.with_features(Xs))
    return ImportanceReport(
        names=test_ds.feature_names,
        modalities=[f.modality.value for f in test_ds.schema],
        reference=reference,
        scores=scores,
    )


def prune_nonpositive(report, schema) -> list:
    """Names of the features with strictly positive importance, in schema order.

    ``report`` is an :class:`ImportanceReport` or a plain importance vector;
    ``schema`` is a list of names or of ``FeatureSchema`` entries.
    """
    importance = report.importance if isinstance(report, ImportanceReport) else report
    importance = np.asarray(importance, dtype=float)
    names = [getattr(f, "name", f) for f in schema]
    if len(importance) != len(names):
        raise ValueError("importance vector does not cover the schema")
    keep = [n for n, i in zip(names, importance) if i > 0]
    dropped = [n for n, i in zip(names, importance) if not i > 0]
    if dropped:
        log.info("dropping %d features with importance <= 0: %s", len(dropped), dropped)
    if not keep:
        raise DataError("no feature has positive importance")
    return keep
