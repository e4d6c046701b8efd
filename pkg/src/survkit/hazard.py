"""Step functions, Breslow baseline hazard, survival curves and Kaplan-Meier."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DataError


class StepFunction:
    """Right-continuous piecewise-constant function of time.

    ``f(t)`` is ``values[k]`` for the largest ``times[k] <= t`` and
    ``value_before_first`` when ``t < times[0]``.
    """

    __slots__ = ("times", "values", "value_before_first")

    def __init__(self, times, values, value_before_first=0.0):
        times = np.asarray(times, dtype=float).ravel()
        values = np.asarray(values, dtype=float).ravel()
        if times.shape != values.shape:
            raise ValueError("times and values must have the same length")
        if times.size and (np.any(np.diff(times) <= 0) or times[0] < 0):
            raise ValueError("times must be strictly increasing and non-negative")
        self.times = times
        self.values = values
        self.value_before_first = float(value_before_first)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        padded = np.concatenate([[self.value_before_first], self.values])
        out = padded[idx + 1]
        return out if out.ndim else float(out)

    def left_limit(self, t):
        """Value just before ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left") - 1
        padded = np.concatenate([[self.value_before_first], self.values])
        out = padded[idx + 1]
        return out if out.ndim else float(out)

    def __repr__(self):
        return f"StepFunction(n_steps={self.times.size}, before={self.value_before_first})"

    def __eq__(self, other):
        return (
            isinstance(other, StepFunction)
            and self.value_before_first == other.value_before_first
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    def map(self, fn) -> "StepFunction":
        return StepFunction(self.times, fn(self.values), fn(np.float64(self.value_before_first)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "value"])
        # the row at time -inf is omitted; value_before_first sits at t=0 if no step is there
        if not (self.times.size and self.times[0] == 0.0):
            w.writerow(["0.0", repr(self.value_before_first)])
        for t, v in zip(self.times, self.values):
            w.writerow([repr(float(t)), repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, value_before_first: float | None = None) -> "StepFunction":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["time", "value"]:
            raise DataError("step-function CSV must have header time,value")
        data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=float).reshape(-1, 2)
        if value_before_first is None:
            if not len(data):
                return cls([], [], 0.0)
            # the leading t=0 row written by to_csv carries value_before_first
            if data[0, 0] == 0.0:
                return cls(data[1:, 0], data[1:, 1], data[0, 1])
            return cls(data[:, 0], data[:, 1], data[0, 1])
        return cls(data[:, 0], data[:, 1], value_before_first)


@dataclass(frozen=True)
class BaselineHazard:
    """Breslow increments at the distinct observed event times."""

    event_times: np.ndarray
    increments: np.ndarray

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "increment"])
        for t, v in zip(self.event_times, self.increments):
            w.writerow([repr(float(t)), repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BaselineHazard":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["time", "increment"]:
            raise DataError("baseline CSV must have header time,increment")
        data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=float).reshape(-1, 2)
        return cls(data[:, 0], data[:, 1])


def breslow(train_risks, durations, events) -> BaselineHazard:
    """Breslow estimate of the baseline hazard increments.

    ``dH0(t) = d(t) / sum_{j: T_j >= t} exp(g_j)`` at every distinct event
    time ``t``, with ``d(t)`` the number of events at ``t``. Risk-set sums
    come from one reverse cumulative pass, in log space.
    """
    g = np.asarray(train_risks, dtype=float).ravel()
    T = np.asarray(durations, dtype=float).ravel()
    D = np.asarray(events, dtype=bool).ravel()
    if not (len(g) == len(T) == len(D)):
        raise ValueError("risk, duration and event vectors must have equal length")
    if not D.any():
        raise DataError("Breslow estimate needs at least one event")
    order = np.argsort(-T, kind="stable")
    log_cum = np.logaddexp.accumulate(g[order])
    t_desc = T[order]
    event_times, n_events = np.unique(T[D], return_counts=True)
    last = np.searchsorted(-t_desc, -event_times, side="right") - 1
    increments = np.exp(np.log(n_events) - log_cum[last])
    return BaselineHazard(event_times, increments)


def cumulative_hazard(base: BaselineHazard, g: float) -> StepFunction:
    """H(t|x) = sum_{T_i <= t} dH0(T_i) * exp(g)."""
    return StepFunction(base.event_times, base.cumulative() * np.exp(g), 0.0)


def survival_curve(H: StepFunction) -> StepFunction:
    """S(t|x) = exp(-H(t|x))."""
    return StepFunction(H.times, np.exp(-H.values), np.exp(-H.value_before_first))


def survival_curves(base: BaselineHazard, risks) -> list[StepFunction]:
    """One survival curve per risk score, all on the baseline's time grid."""
    cum = base.cumulative()
    return [
        StepFunction(base.event_times, np.exp(-cum * np.exp(g)), 1.0)
        for g in np.asarray(risks, dtype=float).ravel()
    ]


def kaplan_meier(durations, events, target: str = "survival") -> StepFunction:
    """Product-limit estimate of survival, or of censoring with ``target="censoring"``.

    For ``target="censoring"`` the event indicator is flipped first, so
    the result is the censoring survival function G(t).
    """
    T = np.asarray(durations, dtype=float).ravel()
    D = np.asarray(events, dtype=bool).ravel()
    if T.size == 0:
        raise ValueError("at least one subject is required")
    if target == "censoring":
        D = ~D
    elif target != "survival":
        raise ValueError(f"unknown target {target!r}")
    times, inverse = np.unique(T, return_inverse=True)
    deaths = np.bincount(inverse, weights=D.astype(float), minlength=times.size)
    leaving = np.bincount(inverse, minlength=times.size)
    at_risk = T.size - np.concatenate([[0], np.cumsum(leaving)[:-1]])
    surv = np.cumprod((at_risk - deaths) / at_risk)
    keep = deaths > 0
    return StepFunction(times[keep], surv[keep], 1.0)
