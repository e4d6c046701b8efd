"""Censoring-aware evaluation: concordance, IPCW Brier score, paired t-test."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .errors import DataError
from .hazard import StepFunction, kaplan_meier


def _labels(durations, events):
    T = np.asarray(durations, dtype=float).ravel()
    D = np.asarray(events, dtype=bool).ravel()
    if T.shape != D.shape:
        raise ValueError("durations and events must have equal length")
    return T, D


def comparable_mask(durations, events) -> np.ndarray:
    """``M[i, j]`` is True when T_i < T_j and subject i had the event."""
    T, D = _labels(durations, events)
    return (T[:, None] < T[None, :]) & D[:, None]


def comparable_pairs(durations, events) -> list[tuple[int, int]]:
    """Ordered pairs ``(i, j)`` whose event order is known (0-based indices)."""
    i, j = np.nonzero(comparable_mask(durations, events))
    return list(zip(i.tolist(), j.tolist()))


def c_index(risks, durations, events) -> float:
    """Harrell's concordance: higher risk should mean an earlier event.

    Risk ties count one half.
    """
    r = np.asarray(risks, dtype=float).ravel()
    M = comparable_mask(durations, events)
    n_pairs = M.sum()
    if n_pairs == 0:
        raise DataError("no comparable pairs")
    diff = r[:, None] - r[None, :]
    score = np.sum(M & (diff > 0)) + 0.5 * np.sum(M & (diff == 0))
    return float(score / n_pairs)


def evaluate_curves(curves: Sequence[StepFunction], times) -> np.ndarray:
    """Matrix ``V[a, k] = curves[a](times[k])``."""
    times = np.asarray(times, dtype=float)
    if not curves:
        return np.empty((0, times.size))
    first = curves[0]
    if all(
        c.times is first.times or np.array_equal(c.times, first.times) for c in curves
    ):
        idx = np.searchsorted(first.times, times, side="right")
        values = np.stack([np.concatenate([[c.value_before_first], c.values]) for c in curves])
        return values[:, idx]
    return np.stack([np.atleast_1d(c(times)) for c in curves])


def c_td_index(curves: Sequence[StepFunction], durations, events,
               evaluate_at: str = "earlier") -> float:
    """Time-dependent concordance of predicted survival curves.

    For each comparable pair (i, j) the pair is concordant when
    ``S_i(T_i) < S_j(T_i)``: both curves are read at the earlier event time.
    ``evaluate_at="own"`` instead compares ``S_i(T_i)`` with ``S_j(T_j)``.
    Ties in survival values count one half.
    """
    T, D = _labels(durations, events)
    if len(curves) != T.size:
        raise ValueError("one survival curve per subject is required")
    M = comparable_mask(T, D)
    n_pairs = M.sum()
    if n_pairs == 0:
        raise DataError("no comparable pairs")
    V = evaluate_curves(curves, T)  # V[a, k] = S_a(T_k)
    own = np.diag(V)
    if evaluate_at == "earlier":
        other = V.T  # other[i, j] = S_j(T_i)
    elif evaluate_at == "own":
        other = np.broadcast_to(own[None, :], M.shape)
    else:
        raise ValueError(f"unknown evaluate_at {evaluate_at!r}")
    mine = own[:, None]
    score = np.sum(M & (mine < other)) + 0.5 * np.sum(M & (mine == other))
    return float(score / n_pairs)


# -- Brier score -------------------------------------------------------------


def _brier_terms(S_at_t, t, T, D, G: StepFunction, left_limit: bool):
    """Per-time Brier sums. ``S_at_t[a, k]`` is subject a's survival at t[k]."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    g_event = G.left_limit(T) if left_limit else G(T)
    g_event = np.atleast_1d(g_event)
    g_t = np.atleast_1d(G(t))
    died = (T[:, None] <= t[None, :]) & D[:, None]
    alive = T[:, None] > t[None, :]
    ok_event = g_event > 0
    ok_t = g_t > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        w_event = np.where(ok_event, 1.0 / np.where(ok_event, g_event, 1.0), 0.0)
        w_t = np.where(ok_t, 1.0 / np.where(ok_t, g_t, 1.0), 0.0)
    term_event = np.where(died & ok_event[:, None], S_at_t**2 * w_event[:, None], 0.0)
    term_alive = np.where(alive & ok_t[None, :], (1.0 - S_at_t) ** 2 * w_t[None, :], 0.0)
    excluded = np.sum(died & ~ok_event[:, None], axis=0) + np.sum(alive & ~ok_t[None, :], axis=0)
    bs = (term_event.sum(axis=0) + term_alive.sum(axis=0)) / T.size
    return bs, excluded


class BrierResult(NamedTuple):
    score: float
    excluded: int


def brier_score_at(curves, durations, events, G: StepFunction, t: float,
                   left_limit: bool = True, return_excluded: bool = False):
    """IPCW Brier score at time ``t``.

    Events before ``t`` are weighted by ``1/G(T_i-)`` (``1/G(T_i)`` with
    ``left_limit=False``) and subjects still at risk by ``1/G(t)``. Terms
    whose weight would be infinite are dropped and counted; the average is
    always over all ``N`` subjects.
    """
    T, D = _labels(durations, events)
    if t < 0:
        raise ValueError("t must be non-negative")
    S = evaluate_curves(curves, [t])
    bs, excluded = _brier_terms(S, [t], T, D, G, left_limit)
    if return_excluded:
        return BrierResult(float(bs[0]), int(excluded[0]))
    return float(bs[0])


def brier_curve(curves, durations, events, G: StepFunction, times,
                left_limit: bool = True) -> np.ndarray:
    T, D = _labels(durations, events)
    S = evaluate_curves(curves, times)
    return _brier_terms(S, times, T, D, G, left_limit)[0]


@dataclass(frozen=True)
class IBSResult:
    value: float
    t1: float
    t2: float
    trapezoid: float  # trapezoid rule on the same grid
    refinement_error: float  # |value - trapezoid on a 2x denser grid|
    n_grid: int


def _ibs_grid(curves, T, t1, t2):
    knots = [T]
    for c in curves:
        knots.append(c.times)
    allt = np.unique(np.concatenate(knots))
    inner = allt[(allt > t1) & (allt < t2)]
    return np.concatenate([[t1], inner, [t2]])


def integrated_brier(curves, durations, events, G: StepFunction, t1: float, t2: float,
                     left_limit: bool = True, method: str = "step",
                     return_details: bool = False):
    """Time average of the IPCW Brier score over ``[t1, t2]``.

    The score is a right-continuous step function of time with jumps only at
    observed durations and at the curves' step times; the grid holds all of
    these, and ``method="step"`` integrates it exactly (left endpoint per
    interval). ``method="trapezoid"`` applies the trapezoid rule on that
    grid instead.
    """
    T, D = _labels(durations, events)
    if not t1 < t2:
        raise ValueError("t1 must be smaller than t2")
    if method not in ("step", "trapezoid"):
        raise ValueError(f"unknown method {method!r}")
    grid = _ibs_grid(curves, T, t1, t2)
    bs = brier_curve(curves, T, D, G, grid, left_limit)
    width = np.diff(grid)
    step = float(np.sum(bs[:-1] * width) / (t2 - t1))
    trap = float(np.sum(0.5 * (bs[:-1] + bs[1:]) * width) / (t2 - t1))
    value = step if method == "step" else trap
    if not return_details:
        return value
    mid = 0.5 * (grid[:-1] + grid[1:])
    fine = np.empty(grid.size + mid.size)
    fine[0::2] = grid
    fine[1::2] = mid
    bs_fine = brier_curve(curves, T, D, G, fine, left_limit)
    wf = np.diff(fine)
    if method == "step":
        refined = np.sum(bs_fine[:-1] * wf) / (t2 - t1)
    else:
        refined = np.sum(0.5 * (bs_fine[:-1] + bs_fine[1:]) * wf) / (t2 - t1)
    return IBSResult(value, float(t1), float(t2), trap, float(abs(refined - value)), grid.size)


def censoring_distribution(durations, events) -> StepFunction:
    return kaplan_meier(durations, events, target="censoring")


# -- paired t-test -----------------------------------------------------------


class TTestResult(NamedTuple):
    t_stat: float
    p: float
    degenerate: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on per-split values.

    When every difference is zero the result is ``t=0, p=1``. Constant but
    non-zero differences have no finite t statistic; they are returned with
    ``degenerate=True`` and ``p=nan``.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValueError("paired t-test needs two equal-length vectors of length >= 2")
    d = a - b
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0.0 or not np.isfinite(sd):
        if np.all(d == 0):
            return TTestResult(0.0, 1.0, False)
        return TTestResult(math.copysign(math.inf, d.mean()), math.nan, True)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return TTestResult(float(t), float(p), False)


# -- reports -----------------------------------------------------------------


@dataclass
class MetricReport:
    """One metric's per-split values and their summary."""

    metric: str
    values: list

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else math.nan

    @property
    def std(self) -> float:
        """Sample standard deviation; NaN with fewer than two splits."""
        if len(self.values) < 2:
            return math.nan
        return float(np.std(self.values, ddof=1))

    @property
    def std_defined(self) -> bool:
        return len(self.values) >= 2

    def summary(self) -> dict:
        return {
            "metric": self.metric,
            "mean": self.mean,
            "std": self.std if self.std_defined else None,
            "std_defined": self.std_defined,
            "n": self.n,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "value"])
        for k, v in enumerate(self.values):
            w.writerow([k, repr(float(v))])
        return buf.getvalue()

    def __str__(self):
        if self.std_defined:
            return f"{self.metric}: {self.mean:.3f} ± {self.std:.3f} (n={self.n})"
        return f"{self.metric}: {self.mean:.3f} (n={self.n}, std undefined)"
