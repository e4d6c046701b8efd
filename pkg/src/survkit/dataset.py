"""Right-censored survival data: schema, CSV ingestion, stratified splits and
a synthetic proportional-hazards generator.

Feature values are held in a float matrix where ``NaN`` marks a missing
cell. Datasets are frozen after construction so they can be shared between
workers without copying.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError


class Modality(str, Enum):
    GEN = "GEN"
    MRI = "MRI"
    CDC = "CDC"


class Kind(str, Enum):
    binary = "binary"
    categorical = "categorical"
    continuous = "continuous"


class Stratum(str, Enum):
    sNC = "sNC"
    uNC = "uNC"
    pNC = "pNC"
    sMCI = "sMCI"
    pMCI = "pMCI"

    @property
    def progressive(self) -> bool:
        return self in (Stratum.pNC, Stratum.pMCI)


STRATA = tuple(Stratum)
PROGRESSIVE_STRATA = (Stratum.pNC, Stratum.pMCI)
CENSORED_STRATA = (Stratum.sNC, Stratum.uNC, Stratum.sMCI)

LABEL_COLUMNS = ("id", "duration", "event", "stratum")


@dataclass(frozen=True)
class FeatureSchema:
    name: str
    modality: Modality
    kind: Kind


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    duration: float
    event: bool
    stratum: Stratum
    features: tuple  # floats, NaN = missing


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class SurvivalDataset:
    """Immutable collection of subjects sharing one feature schema.

    Parameters
    ----------
    schema : sequence of FeatureSchema
        One entry per feature column, in column order.
    ids, durations, events, strata : array-like of shape (n,)
        Subject labels. ``events`` is boolean (True = event observed).
    X : array-like of shape (n, p)
        Raw feature values; ``NaN`` denotes a missing value.
    """

    def __init__(self, schema, ids, durations, events, strata, X):
        self.schema = tuple(schema)
        names = [f.name for f in self.schema]
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique within a schema")
        n = len(ids)
        X = np.asarray(X, dtype=float).reshape(n, len(self.schema))
        durations = np.asarray(durations, dtype=float)
        events = np.asarray(events, dtype=bool)
        strata = np.array([Stratum(s).value for s in strata], dtype="<U4").reshape(-1)
        if not (len(durations) == len(events) == len(strata) == n):
            raise DataError("label vectors must have equal length")
        if np.any(~np.isfinite(durations)) or np.any(durations < 0):
            raise DataError("durations must be finite and non-negative")
        if np.any(np.isinf(X)):
            raise DataError("feature values must be finite or missing")
        for k, (s, e) in enumerate(zip(strata, events)):
            if Stratum(s).progressive != bool(e):
                raise DataError(
                    f"subject {ids[k]!r}: stratum {s} is inconsistent with event={int(e)}"
                )
        self.ids = _frozen(np.asarray(ids, dtype=object))
        if len(set(self.ids.tolist())) != n:
            raise DataError("subject ids must be unique")
        self.durations = _frozen(durations)
        self.events = _frozen(events)
        self.strata = _frozen(strata)
        self.X = _frozen(X)

    def __len__(self) -> int:
        return len(self.ids)

    def __repr__(self) -> str:
        return (
            f"SurvivalDataset(n={len(self)}, p={self.n_features}, "
            f"events={int(self.events.sum())})"
        )

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.schema]

    @property
    def subjects(self) -> Iterator[SubjectRecord]:
        for k in range(len(self)):
            yield SubjectRecord(
                str(self.ids[k]),
                float(self.durations[k]),
                bool(self.events[k]),
                Stratum(self.strata[k]),
                tuple(float(v) for v in self.X[k]),
            )

    def subset(self, index) -> "SurvivalDataset":
        index = np.asarray(index)
        return SurvivalDataset(
            self.schema,
            self.ids[index],
            self.durations[index],
            self.events[index],
            self.strata[index],
            self.X[index],
        )

    def with_columns(self, columns: Sequence[int]) -> "SurvivalDataset":
        columns = list(columns)
        return SurvivalDataset(
            [self.schema[c] for c in columns],
            self.ids,
            self.durations,
            self.events,
            self.strata,
            self.X[:, columns],
        )

    def with_features(self, X) -> "SurvivalDataset":
        return SurvivalDataset(
            self.schema, self.ids, self.durations, self.events, self.strata, X
        )

    def with_durations(self, durations) -> "SurvivalDataset":
        return SurvivalDataset(
            self.schema, self.ids, durations, self.events, self.strata, self.X
        )

    def require_events(self) -> None:
        if not self.events.any():
            raise DataError("dataset contains no observed events")

    def equals(self, other: "SurvivalDataset") -> bool:
        """Exact equality, with missing cells compared by position."""
        return (
            self.schema == other.schema
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.durations, other.durations)
            and np.array_equal(self.events, other.events)
            and np.array_equal(self.strata, other.strata)
            and np.array_equal(self.X, other.X, equal_nan=True)
        )


def schema_hash(schema: Sequence[FeatureSchema]) -> str:
    import hashlib

    text = "\n".join(f"{f.name},{f.modality.value},{f.kind.value}" for f in schema)
    return hashlib.sha256(text.encode()).hexdigest()


# -- CSV I/O -----------------------------------------------------------------


def load_schema(path) -> list[FeatureSchema]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["name", "modality", "kind"]:
            raise DataError(f"{path}: schema header must be name,modality,kind")
        schema = []
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}: malformed schema row {lineno}")
            name, modality, kind = (c.strip() for c in row)
            try:
                schema.append(FeatureSchema(name, Modality(modality), Kind(kind)))
            except ValueError as exc:
                raise DataError(f"{path}: schema row {lineno}: {exc}") from None
    names = [f.name for f in schema]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate feature names")
    return schema


def _format_float(v: float) -> str:
    if math.isnan(v):
        return ""
    return repr(float(v))


def load_csv(path, schema_path) -> SurvivalDataset:
    """Read a data CSV whose feature columns follow the schema file's order.

    Empty cells become missing values. Errors name the offending row, counted
    from 1 for the first data row.
    """
    schema = load_schema(schema_path)
    names = [f.name for f in schema]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if tuple(header[:4]) != LABEL_COLUMNS:
            raise DataError(f"{path}: header must start with {','.join(LABEL_COLUMNS)}")
        if header[4:] != names:
            raise DataError(f"{path}: feature columns do not match schema {schema_path}")
        width = len(header)
        ids, durations, events, strata, rows = [], [], [], [], []
        for rowno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != width:
                raise DataError(
                    f"wrong number of fields at row {rowno}: expected {width}, got {len(row)}"
                )
            sid, dur, ev, st = (c.strip() for c in row[:4])
            try:
                d = float(dur)
            except ValueError:
                raise DataError(f"non-numeric duration at row {rowno}") from None
            if not math.isfinite(d):
                raise DataError(f"non-finite duration at row {rowno}")
            if d < 0:
                raise DataError(f"duration < 0 at row {rowno}")
            if ev not in ("0", "1"):
                raise DataError(f"event must be 0 or 1 at row {rowno}")
            try:
                stratum = Stratum(st)
            except ValueError:
                raise DataError(f"unknown stratum {st!r} at row {rowno}") from None
            if stratum.progressive != (ev == "1"):
                raise DataError(
                    f"stratum {st} inconsistent with event={ev} at row {rowno}"
                )
            values = []
            for name, cell in zip(names, row[4:]):
                cell = cell.strip()
                if cell == "":
                    values.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"non-numeric value for feature {name!r} at row {rowno}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"non-finite value for feature {name!r} at row {rowno}")
                values.append(v)
            ids.append(sid)
            durations.append(d)
            events.append(ev == "1")
            strata.append(stratum)
            rows.append(values)
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate subject ids")
    X = np.array(rows, dtype=float).reshape(len(ids), len(schema))
    return SurvivalDataset(schema, ids, durations, events, strata, X)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dataset_to_csv(ds: SurvivalDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(LABEL_COLUMNS) + ds.feature_names)
    for k in range(len(ds)):
        w.writerow(
            [
                ds.ids[k],
                repr(float(ds.durations[k])),
                int(ds.events[k]),
                ds.strata[k],
            ]
            + [_format_float(v) for v in ds.X[k]]
        )
    return buf.getvalue()


def schema_to_csv(schema: Sequence[FeatureSchema]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "modality", "kind"])
    for f in schema:
        w.writerow([f.name, f.modality.value, f.kind.value])
    return buf.getvalue()


def write_csv(ds: SurvivalDataset, path, schema_path=None) -> None:
    atomic_write_text(path, dataset_to_csv(ds))
    if schema_path is not None:
        atomic_write_text(schema_path, schema_to_csv(ds.schema))


# -- splitting ---------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(ds: SurvivalDataset, train_frac: float, seed: int):
    """Split each stratum into train/test parts of ``round(train_frac * size)``.

    Strata with at least two subjects always place one subject on each side.
    A stratum with a single subject goes to train with a warning. Both parts
    keep the original subject order.

    Returns
    -------
    train, test : SurvivalDataset
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    in_train = np.zeros(len(ds), dtype=bool)
    ids = ds.ids.astype(str)
    for stratum in STRATA:
        members = np.flatnonzero(ds.strata == stratum.value)
        if len(members) == 0:
            continue
        members = members[np.argsort(ids[members], kind="stable")]
        size = len(members)
        if size == 1:
            warnings.warn(
                f"stratum {stratum.value} has a single subject; assigned to train",
                stacklevel=2,
            )
            n_train = 1
        else:
            n_train = min(max(_round_half_up(train_frac * size), 1), size - 1)
        chosen = rng.permutation(members)[:n_train]
        in_train[chosen] = True
    return ds.subset(np.flatnonzero(in_train)), ds.subset(np.flatnonzero(~in_train))


# -- synthetic data ----------------------------------------------------------


def synthetic_risk(X: np.ndarray, beta, nonlinearity: str = "linear") -> np.ndarray:
    """True log-hazard ratio g(x) used by :func:`synthesize_cox`."""
    g = X @ np.asarray(beta, dtype=float)
    if nonlinearity == "quadratic":
        g = g + 0.5 * X[:, 0] ** 2
    elif nonlinearity != "linear":
        raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
    return g


def expected_censoring_fraction(
    beta, baseline_rate, censor_rate, nonlinearity="linear", n_mc=200_000, seed=0
):
    """Monte Carlo value of P(C < T*) = E_x[c / (c + b exp(g(x)))]."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_mc, len(beta)))
    lam = baseline_rate * np.exp(synthetic_risk(X, beta, nonlinearity))
    return float(np.mean(censor_rate / (censor_rate + lam)))


def synthesize_cox(
    n: int,
    beta,
    baseline_rate: float = 0.1,
    censor_rate: float = 0.05,
    nonlinearity: str = "linear",
    seed: int = 0,
    n_noise: int = 0,
    modality: Modality = Modality.CDC,
) -> SurvivalDataset:
    """Draw a dataset from an exponential proportional-hazards model.

    Features are standard normal. Event times are exponential with rate
    ``baseline_rate * exp(g(x))`` and censoring times exponential with rate
    ``censor_rate``, independent of everything else. ``n_noise`` extra
    standard-normal columns with no effect are appended after the signal
    columns.

    Strata carry no meaning here: events cycle through pNC/pMCI and
    censored subjects through sNC/uNC/sMCI so stratified splitting works.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    if n < 1:
        raise ValueError("n must be >= 1")
    if baseline_rate <= 0 or censor_rate <= 0:
        raise ValueError("rates must be positive")
    rng = np.random.default_rng(seed)
    p = len(beta) + n_noise
    X = rng.standard_normal((n, p))
    g = synthetic_risk(X[:, : len(beta)], beta, nonlinearity)
    t_event = -np.log(rng.uniform(size=n)) / (baseline_rate * np.exp(g))
    t_censor = rng.exponential(1.0 / censor_rate, size=n)
    durations = np.minimum(t_event, t_censor)
    events = t_event <= t_censor
    strata = np.empty(n, dtype=object)
    n_ev = np.cumsum(events) - 1
    n_cens = np.cumsum(~events) - 1
    for k in range(n):
        if events[k]:
            strata[k] = PROGRESSIVE_STRATA[n_ev[k] % 2]
        else:
            strata[k] = CENSORED_STRATA[n_cens[k] % 3]
    width = len(str(n - 1))
    ids = [f"s{k:0{width}d}" for k in range(n)]
    schema = [FeatureSchema(f"x{j + 1}", modality, Kind.continuous) for j in range(len(beta))]
    schema += [
        FeatureSchema(f"noise{j + 1}", modality, Kind.continuous) for j in range(n_noise)
    ]
    return SurvivalDataset(schema, ids, durations, events, strata, X)
