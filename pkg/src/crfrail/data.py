"""
Clustered competing-risks data: units, datasets, event-type probabilities,
CSV ingestion and the weight matrices consumed by the estimating equations.

Units are kept in canonical order (cluster, then unit) so the random-effect
vector can be laid out as ``v[K * i + k]`` for cluster ``i`` and cause ``k``
(both zero-based).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class DataValidationError(ValueError):
    """Raised when input data violate the clustered competing-risks model."""


@dataclass(frozen=True)
class SurvivalUnit:
    """One observed unit (e.g. an ear) within a cluster.

    ``event_type`` is ``None`` when unknown or when the unit is censored.
    """

    cluster_id: int
    unit_id: int
    time: float
    censor_indicator: int
    event_type: Optional[int]
    covariates: tuple
    predictors: Optional[tuple] = None


@dataclass(frozen=True)
class Schema:
    """Column layout of a dataset file.

    Parameters
    ----------
    num_causes : int, optional
        Number of competing causes K. When omitted it is inferred from the
        largest observed event type.
    covariate_dim, predictor_dim : int, optional
        Expected numbers of ``x`` and ``w`` columns; checked against the
        header when given.
    """

    num_causes: Optional[int] = None
    covariate_dim: Optional[int] = None
    predictor_dim: Optional[int] = None


class StudyDataset:
    """Immutable collection of clustered survival units.

    Arrays are stored column-wise in canonical order. ``event_type`` uses 0
    for "absent" (censored or unknown); observed types are 1..K.
    """

    def __init__(self, cluster_id, unit_id, time, delta, event_type, covariates,
                 predictors=None, num_causes=None):
        cluster_id = np.asarray(cluster_id, dtype=np.int64)
        unit_id = np.asarray(unit_id, dtype=np.int64)
        time = np.asarray(time, dtype=float)
        delta = np.asarray(delta, dtype=np.int64)
        event_type = np.asarray(event_type, dtype=np.int64)
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates[:, None]
        if predictors is not None:
            predictors = np.asarray(predictors, dtype=float)
            if predictors.ndim == 1:
                predictors = predictors[:, None]

        n = len(time)
        if n == 0:
            raise DataValidationError("dataset has no units")
        for name, arr in (("cluster_id", cluster_id), ("unit_id", unit_id),
                          ("delta", delta), ("event_type", event_type)):
            if arr.shape != (n,):
                raise DataValidationError(f"{name} must have length {n}")
        if covariates.shape[0] != n:
            raise DataValidationError(f"covariates must have {n} rows")
        if predictors is not None and predictors.shape[0] != n:
            raise DataValidationError(f"predictors must have {n} rows")

        order = np.lexsort((unit_id, cluster_id))
        self.cluster_id = cluster_id[order]
        self.unit_id = unit_id[order]
        self.time = time[order]
        self.delta = delta[order]
        self.event_type = event_type[order]
        self.covariates = covariates[order]
        self.predictors = None if predictors is None else predictors[order]

        if num_causes is None:
            num_causes = int(self.event_type.max()) if self.event_type.max() > 0 else None
            if num_causes is None:
                raise DataValidationError(
                    "number of causes cannot be inferred: no observed event types")
        self.num_causes = int(num_causes)
        self._validate()

        ids, starts, sizes = np.unique(self.cluster_id, return_index=True,
                                       return_counts=True)
        self.cluster_ids = ids
        self.cluster_starts = starts
        self.cluster_sizes = sizes
        # zero-based cluster index of each unit
        self.cluster_index = np.repeat(np.arange(len(ids)), sizes)
        for arr in (self.cluster_id, self.unit_id, self.time, self.delta,
                    self.event_type, self.covariates, self.cluster_index,
                    self.cluster_starts, self.cluster_sizes, self.cluster_ids):
            arr.flags.writeable = False
        if self.predictors is not None:
            self.predictors.flags.writeable = False

    def _validate(self):
        K = self.num_causes
        if K < 1:
            raise DataValidationError("num_causes must be >= 1")
        if not np.all(np.isfinite(self.time)) or np.any(self.time <= 0):
            bad = np.flatnonzero(~(self.time > 0))[0]
            raise DataValidationError(
                f"time must be positive (cluster {self.cluster_id[bad]}, "
                f"unit {self.unit_id[bad]})")
        if np.any((self.delta != 0) & (self.delta != 1)):
            raise DataValidationError("delta must be 0 or 1")
        bad = np.flatnonzero((self.delta == 0) & (self.event_type != 0))
        if bad.size:
            b = bad[0]
            raise DataValidationError(
                f"event type present for censored unit (cluster "
                f"{self.cluster_id[b]}, unit {self.unit_id[b]})")
        if np.any((self.event_type < 0) | (self.event_type > K)):
            raise DataValidationError(f"event_type must lie in 1..{K}")
        if not np.all(np.isfinite(self.covariates)):
            raise DataValidationError("covariates must be finite")
        if self.predictors is not None and not np.all(np.isfinite(self.predictors)):
            raise DataValidationError("predictors must be finite")

        ids = np.unique(self.cluster_id)
        expected = np.arange(1, len(ids) + 1)
        if ids[0] < 1 or not np.array_equal(ids, expected):
            missing = sorted(set(range(1, int(ids.max()) + 1)) - set(ids.tolist()))
            raise DataValidationError(
                f"cluster ids must be 1..N without gaps; missing cluster ids: {missing}")
        key = self.cluster_id * (int(self.unit_id.max()) + 1) + self.unit_id
        if np.unique(key).size != key.size:
            raise DataValidationError("duplicate (cluster_id, unit_id) pair")

    # -- dimensions ---------------------------------------------------------
    @property
    def num_units(self) -> int:
        return len(self.time)

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_ids)

    @property
    def covariate_dim(self) -> int:
        return self.covariates.shape[1]

    @property
    def predictor_dim(self) -> int:
        return 0 if self.predictors is None else self.predictors.shape[1]

    @property
    def event_rows(self) -> np.ndarray:
        """Positions of units with an observed event (delta = 1)."""
        return np.flatnonzero(self.delta == 1)

    def units(self) -> list:
        """Materialize the dataset as :class:`SurvivalUnit` records."""
        out = []
        for a in range(self.num_units):
            et = int(self.event_type[a])
            out.append(SurvivalUnit(
                cluster_id=int(self.cluster_id[a]), unit_id=int(self.unit_id[a]),
                time=float(self.time[a]), censor_indicator=int(self.delta[a]),
                event_type=et if et > 0 else None,
                covariates=tuple(self.covariates[a].tolist()),
                predictors=None if self.predictors is None
                else tuple(self.predictors[a].tolist())))
        return out

    @classmethod
    def from_units(cls, units: Sequence[SurvivalUnit], num_causes=None):
        units = list(units)
        if not units:
            raise DataValidationError("dataset has no units")
        p = len(units[0].covariates)
        has_w = [u.predictors is not None for u in units]
        if any(has_w) and not all(has_w):
            raise DataValidationError("predictors must be present for all units or none")
        if any(len(u.covariates) != p for u in units):
            raise DataValidationError("all units must share the covariate dimension")
        preds = None
        if all(has_w):
            q = len(units[0].predictors)
            if any(len(u.predictors) != q for u in units):
                raise DataValidationError("all units must share the predictor dimension")
            preds = [u.predictors for u in units]
        return cls(
            cluster_id=[u.cluster_id for u in units],
            unit_id=[u.unit_id for u in units],
            time=[u.time for u in units],
            delta=[u.censor_indicator for u in units],
            event_type=[0 if u.event_type is None else u.event_type for u in units],
            covariates=np.array([u.covariates for u in units], dtype=float).reshape(len(units), p),
            predictors=preds, num_causes=num_causes)

    # -- derived datasets ---------------------------------------------------
    def _replace(self, **changes):
        kw = dict(cluster_id=self.cluster_id, unit_id=self.unit_id, time=self.time,
                  delta=self.delta, event_type=self.event_type,
                  covariates=self.covariates, predictors=self.predictors,
                  num_causes=self.num_causes)
        kw.update(changes)
        return StudyDataset(**kw)

    def mask_event_types(self) -> "StudyDataset":
        """Copy with every event type hidden (delta is kept)."""
        return self._replace(event_type=np.zeros_like(self.event_type))

    def with_event_types(self, event_type) -> "StudyDataset":
        return self._replace(event_type=np.asarray(event_type))

    def relabel_clusters(self, permutation) -> "StudyDataset":
        """Renumber clusters: old cluster ``c`` becomes ``permutation[c - 1]``."""
        perm = np.asarray(permutation)
        return self._replace(cluster_id=perm[self.cluster_id - 1])

    def __eq__(self, other):
        if not isinstance(other, StudyDataset):
            return NotImplemented
        same_w = ((self.predictors is None and other.predictors is None) or
                  (self.predictors is not None and other.predictors is not None and
                   np.array_equal(self.predictors, other.predictors)))
        return (self.num_causes == other.num_causes and same_w and
                all(np.array_equal(getattr(self, f), getattr(other, f))
                    for f in ("cluster_id", "unit_id", "time", "delta",
                              "event_type", "covariates")))

    def __repr__(self):
        return (f"StudyDataset(N={self.num_clusters}, units={self.num_units}, "
                f"K={self.num_causes}, p={self.covariate_dim}, q={self.predictor_dim})")


@dataclass(frozen=True)
class EventProbabilityMatrix:
    """Conditional event-type probabilities for the units with delta = 1.

    ``rows`` are unit positions in the owning dataset's canonical order.
    """

    rows: np.ndarray
    probs: np.ndarray
    cluster_id: np.ndarray = field(repr=False)
    unit_id: np.ndarray = field(repr=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2 or probs.shape[0] != len(self.rows):
            raise DataValidationError("probability matrix shape does not match rows")
        if np.any(~np.isfinite(probs)) or np.any(probs < 0) or np.any(probs > 1):
            raise DataValidationError("probabilities must lie in [0, 1]")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-10):
            raise DataValidationError("probability rows must sum to 1")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def for_dataset(cls, dataset: StudyDataset, probs) -> "EventProbabilityMatrix":
        rows = dataset.event_rows
        return cls(rows=rows, probs=probs, cluster_id=dataset.cluster_id[rows],
                   unit_id=dataset.unit_id[rows])

    @property
    def num_causes(self) -> int:
        return self.probs.shape[1]

    def check_matches(self, dataset: StudyDataset):
        if not np.array_equal(self.rows, dataset.event_rows):
            raise DataValidationError(
                "probability rows must be exactly the units with delta = 1")
        if self.num_causes != dataset.num_causes:
            raise DataValidationError(
                f"probability matrix has {self.num_causes} columns, dataset has "
                f"K={dataset.num_causes}")


def risk_set_indicator(dataset: StudyDataset, cluster: int, unit: int, t: float) -> int:
    """Return ``Y(t) = I(T >= t)`` for the unit identified by its file ids."""
    hit = np.flatnonzero((dataset.cluster_id == cluster) & (dataset.unit_id == unit))
    if hit.size == 0:
        raise KeyError(f"no unit ({cluster}, {unit})")
    return int(dataset.time[hit[0]] >= t)


WEIGHT_MODES = ("complete", "weighted", "imputed")


def effective_weights(dataset: StudyDataset, mode: str,
                      probs: Optional[EventProbabilityMatrix] = None,
                      imputed=None) -> np.ndarray:
    """Per-unit, per-cause weights ``w[a, k]`` replacing ``I(delta_a = k)``.

    Parameters
    ----------
    mode : {'complete', 'weighted', 'imputed'}
        ``complete`` uses the observed event types, ``weighted`` the
        probability matrix, ``imputed`` hard labels (one per delta = 1 unit,
        aligned with ``dataset.event_rows``).

    Returns
    -------
    ndarray of shape (num_units, K)
        Censored units always get a zero row.
    """
    n, K = dataset.num_units, dataset.num_causes
    w = np.zeros((n, K))
    rows = dataset.event_rows
    if mode == "complete":
        types = dataset.event_type[rows]
        if np.any(types == 0):
            bad = rows[types == 0][0]
            raise DataValidationError(
                f"complete mode needs event types for all events; missing for "
                f"cluster {dataset.cluster_id[bad]}, unit {dataset.unit_id[bad]}")
        w[rows, types - 1] = 1.0
    elif mode == "weighted":
        if probs is None:
            raise DataValidationError("weighted mode requires an event probability matrix")
        probs.check_matches(dataset)
        w[rows] = probs.probs
    elif mode == "imputed":
        if imputed is None:
            raise DataValidationError("imputed mode requires imputed event types")
        labels = np.asarray(imputed, dtype=np.int64)
        if labels.shape != rows.shape:
            raise DataValidationError(
                "imputed labels must cover exactly the units with delta = 1")
        if np.any((labels < 1) | (labels > K)):
            raise DataValidationError(f"imputed labels must lie in 1..{K}")
        w[rows, labels - 1] = 1.0
    else:
        raise ValueError(f"unknown weight mode {mode!r}; expected one of {WEIGHT_MODES}")
    return w


# -- CSV ----------------------------------------------------------------------

def _parse_header(header, schema: Schema):
    fixed = ["cluster_id", "unit_id", "time", "delta", "event_type"]
    cols = [h.strip() for h in header]
    if cols[:5] != fixed:
        raise DataValidationError(
            f"row 1: header must start with {','.join(fixed)}; got {','.join(cols[:5])}")
    rest = cols[5:]
    xs = [c for c in rest if c.startswith("x")]
    ws = [c for c in rest if c.startswith("w")]
    if rest != xs + ws or xs != [f"x{i}" for i in range(1, len(xs) + 1)] \
            or ws != [f"w{i}" for i in range(1, len(ws) + 1)]:
        raise DataValidationError(
            "row 1: covariate columns must be x1..xp followed by optional w1..wq")
    if not xs:
        raise DataValidationError("row 1: at least one covariate column x1 is required")
    if schema.covariate_dim is not None and len(xs) != schema.covariate_dim:
        raise DataValidationError(
            f"row 1: expected {schema.covariate_dim} covariate columns, found {len(xs)}")
    if schema.predictor_dim is not None and len(ws) != schema.predictor_dim:
        raise DataValidationError(
            f"row 1: expected {schema.predictor_dim} predictor columns, found {len(ws)}")
    return len(xs), len(ws)


def _num(tok, row, col, kind=float):
    tok = tok.strip()
    try:
        val = float(tok)
    except ValueError:
        raise DataValidationError(f"row {row}: non-numeric value {tok!r} in column {col}")
    if not math.isfinite(val):
        raise DataValidationError(f"row {row}: non-finite value in column {col}")
    if kind is int:
        if val != int(val):
            raise DataValidationError(f"row {row}: column {col} must be an integer")
        return int(val)
    return val


def load_dataset(path, schema: Schema = Schema()) -> StudyDataset:
    """Read a dataset CSV (``cluster_id,unit_id,time,delta,event_type,x1..,w1..``).

    A blank ``event_type`` means unknown (or censored). All errors name the
    offending file row (the header is row 1).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file")
        p, q = _parse_header(header, schema)
        width = 5 + p + q
        cid, uid, tm, dl, et, X, W = [], [], [], [], [], [], []
        for r, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DataValidationError(
                    f"row {r}: expected {width} fields, found {len(row)}")
            c = _num(row[0], r, "cluster_id", int)
            u = _num(row[1], r, "unit_id", int)
            t = _num(row[2], r, "time")
            d = _num(row[3], r, "delta", int)
            if t <= 0:
                raise DataValidationError(f"row {r}: time must be positive")
            if d not in (0, 1):
                raise DataValidationError(f"row {r}: delta must be 0 or 1")
            e = 0 if not row[4].strip() else _num(row[4], r, "event_type", int)
            if e != 0 and d == 0:
                raise DataValidationError(
                    f"event type present for censored unit at row {r}")
            if e < 0 or (e == 0 and row[4].strip()):
                raise DataValidationError(f"row {r}: event_type must be blank or >= 1")
            if schema.num_causes is not None and e > schema.num_causes:
                raise DataValidationError(
                    f"row {r}: event_type {e} exceeds K={schema.num_causes}")
            cid.append(c); uid.append(u); tm.append(t); dl.append(d); et.append(e)
            X.append([_num(v, r, f"x{j + 1}") for j, v in enumerate(row[5:5 + p])])
            if q:
                W.append([_num(v, r, f"w{j + 1}") for j, v in enumerate(row[5 + p:])])
    if not tm:
        raise DataValidationError(f"{path}: file contains a header but no data rows")
    return StudyDataset(cid, uid, tm, dl, et, np.array(X, dtype=float).reshape(len(tm), p),
                        predictors=np.array(W, dtype=float) if q else None,
                        num_causes=schema.num_causes)


def write_dataset(dataset: StudyDataset, path, include_event_types: bool = True,
                  include_predictors: bool = True):
    """Write ``dataset`` in the CSV layout read by :func:`load_dataset`."""
    p, q = dataset.covariate_dim, dataset.predictor_dim
    if not include_predictors:
        q = 0
    header = ["cluster_id", "unit_id", "time", "delta", "event_type"]
    header += [f"x{i}" for i in range(1, p + 1)] + [f"w{i}" for i in range(1, q + 1)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for a in range(dataset.num_units):
            et = int(dataset.event_type[a]) if include_event_types else 0
            row = [int(dataset.cluster_id[a]), int(dataset.unit_id[a]),
                   repr(float(dataset.time[a])), int(dataset.delta[a]),
                   "" if et == 0 else et]
            row += [repr(float(x)) for x in dataset.covariates[a]]
            if q:
                row += [repr(float(x)) for x in dataset.predictors[a]]
            wr.writerow(row)


def write_probabilities(probs: EventProbabilityMatrix, path):
    """Write ``cluster_id,unit_id,p1..pK`` with full float precision."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["cluster_id", "unit_id"] +
                    [f"p{k}" for k in range(1, probs.num_causes + 1)])
        for c, u, row in zip(probs.cluster_id, probs.unit_id, probs.probs):
            wr.writerow([int(c), int(u)] + [repr(float(x)) for x in row])


def read_probabilities(path, dataset: StudyDataset) -> EventProbabilityMatrix:
    """Read a probability CSV and align it with ``dataset``'s event rows."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        K = len(header) - 2
        table = {}
        for r, row in enumerate(reader, start=2):
            if len(row) != K + 2:
                raise DataValidationError(f"row {r}: expected {K + 2} fields")
            key = (_num(row[0], r, "cluster_id", int), _num(row[1], r, "unit_id", int))
            table[key] = [_num(v, r, f"p{j + 1}") for j, v in enumerate(row[2:])]
    rows = dataset.event_rows
    try:
        probs = [table[(int(dataset.cluster_id[a]), int(dataset.unit_id[a]))] for a in rows]
    except KeyError as exc:
        raise DataValidationError(f"no probability row for unit {exc.args[0]}")
    if len(table) != len(rows):
        raise DataValidationError("probability file has rows for units without events")
    return EventProbabilityMatrix.for_dataset(dataset, np.array(probs).reshape(len(rows), K))


def read_labels(path, dataset: StudyDataset) -> np.ndarray:
    """Read ``cluster_id,unit_id,event_type`` and align with the event rows."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        table = {(int(r[0]), int(r[1])): int(r[2]) for r in reader if r}
    return np.array([table[(int(dataset.cluster_id[a]), int(dataset.unit_id[a]))]
                     for a in dataset.event_rows], dtype=np.int64)


def write_labels(dataset: StudyDataset, labels: Iterable[int], path):
    rows = dataset.event_rows
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["cluster_id", "unit_id", "event_type"])
        for a, lab in zip(rows, labels):
            wr.writerow([int(dataset.cluster_id[a]), int(dataset.unit_id[a]), int(lab)])
