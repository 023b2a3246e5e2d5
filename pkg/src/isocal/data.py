"""Survival data model, validation, and CSV/JSON file formats."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_CLIP_FLOOR = 1e-4
MONOTONE_TOL = 1e-8
GRID_MONOTONE_TOL = 1e-12
METHODS = ("RW", "RW+", "HT", "HT+", "DR")
ESTIMATORS = ("DR", "HT", "HT+")


class ValidationError(ValueError):
    """Data violates a type invariant."""


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _readonly_view(a):
    arr = np.asarray(a)
    if arr.flags.writeable:
        arr = arr.view()
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SurvivalDataset:
    observed_time: np.ndarray
    event: np.ndarray
    subject_id: np.ndarray = None
    covariates: np.ndarray | None = None

    def __post_init__(self):
        t = _frozen(self.observed_time)
        e = np.asarray(self.event)
        if t.ndim != 1 or t.size < 1:
            raise ValidationError("observed_time must be a non-empty 1D array")
        if e.shape != t.shape:
            raise ValidationError("event and observed_time lengths differ")
        if e.dtype != bool:
            if not np.all(np.isin(e, (0, 1))):
                raise ValidationError("event must be coded 0/1 or boolean")
        e = _frozen(e, dtype=bool)
        bad = np.flatnonzero(~np.isfinite(t) | (t < 0))
        if bad.size:
            raise ValidationError(f"observed_time must be finite and >= 0 (subject index {bad[0]})")
        ids = self.subject_id
        if ids is None:
            ids = [str(i) for i in range(t.size)]
        ids = np.array([str(s) for s in ids], dtype=object)
        ids.setflags(write=False)
        if ids.shape != t.shape:
            raise ValidationError("subject_id length differs from observed_time")
        if len(set(ids.tolist())) != ids.size:
            raise ValidationError("subject_id values must be unique")
        x = self.covariates
        if x is not None:
            x = _frozen(x)
            if x.ndim == 1:
                x = _frozen(x.reshape(-1, 1))
            if x.shape[0] != t.size or x.shape[1] < 1:
                raise ValidationError("covariates must be an n x p matrix with p >= 1")
            if not np.all(np.isfinite(x)):
                raise ValidationError("covariates must be finite")
        object.__setattr__(self, "observed_time", t)
        object.__setattr__(self, "event", e)
        object.__setattr__(self, "subject_id", ids)
        object.__setattr__(self, "covariates", x)

    @property
    def n(self) -> int:
        return self.observed_time.size

    @property
    def p(self) -> int:
        return 0 if self.covariates is None else self.covariates.shape[1]

    def subset(self, index) -> "SurvivalDataset":
        index = np.asarray(index)
        return SurvivalDataset(
            observed_time=self.observed_time[index],
            event=self.event[index],
            subject_id=self.subject_id[index],
            covariates=None if self.covariates is None else self.covariates[index],
        )

    def with_complemented_events(self) -> "SurvivalDataset":
        """Same subjects with censoring treated as the event (for censoring models)."""
        return SurvivalDataset(self.observed_time, ~self.event, self.subject_id, self.covariates)

    def __eq__(self, other):
        if not isinstance(other, SurvivalDataset):
            return NotImplemented
        same_x = (self.covariates is None and other.covariates is None) or (
            self.covariates is not None and other.covariates is not None
            and np.array_equal(self.covariates, other.covariates))
        return (np.array_equal(self.observed_time, other.observed_time)
                and np.array_equal(self.event, other.event)
                and np.array_equal(self.subject_id, other.subject_id) and same_x)

    __hash__ = None


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = _frozen(self.times)
        if t.ndim != 1 or t.size < 1:
            raise ValidationError("time grid needs at least one time")
        if not np.all(np.isfinite(t)) or t[0] <= 0:
            raise ValidationError("grid times must be finite and positive")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("grid times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def K(self) -> int:
        return self.times.size

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def step_index(self, t) -> np.ndarray:
        """Index of the last grid time <= t, or -1 before the first grid time."""
        return np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right") - 1

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    __hash__ = None


@dataclass(frozen=True)
class RiskScores:
    subject_id: np.ndarray
    risk: np.ndarray

    def __post_init__(self):
        r = _frozen(self.risk)
        ids = np.array([str(s) for s in self.subject_id], dtype=object)
        ids.setflags(write=False)
        if r.ndim != 1 or ids.shape != r.shape:
            raise ValidationError("one risk score per subject is required")
        if not np.all(np.isfinite(r)):
            raise ValidationError("risk scores must be finite")
        if len(set(ids.tolist())) != ids.size:
            raise ValidationError("risk subject_id values must be unique")
        object.__setattr__(self, "risk", r)
        object.__setattr__(self, "subject_id", ids)

    def aligned_to(self, ids) -> np.ndarray:
        """Risk values reordered to match ``ids``."""
        ids = [str(s) for s in ids]
        if len(ids) == self.risk.size and all(a == b for a, b in zip(ids, self.subject_id)):
            return self.risk
        lookup = {s: i for i, s in enumerate(self.subject_id)}
        missing = [s for s in ids if s not in lookup]
        if missing:
            raise ValidationError(f"no risk score for subject {missing[0]!r}")
        return self.risk[[lookup[s] for s in ids]]


@dataclass(frozen=True)
class StepCumulativeHazard:
    jump_times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        t = _frozen(self.jump_times)
        d = _frozen(self.increments)
        if t.ndim != 1 or d.shape != t.shape:
            raise ValidationError("jump_times and increments must be equal-length 1D arrays")
        if t.size and (t[0] <= 0 or np.any(np.diff(t) <= 0) or not np.all(np.isfinite(t))):
            raise ValidationError("jump times must be positive and strictly increasing")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValidationError("hazard increments must be finite and >= 0")
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "increments", d)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(d)]))

    def __call__(self, t) -> np.ndarray:
        """Cumulative hazard at ``t`` (sum of increments with jump time <= t)."""
        idx = np.searchsorted(self.jump_times, np.asarray(t, dtype=np.float64), side="right")
        return self._cum[idx]


@dataclass(frozen=True)
class SurvivalProbabilityGrid:
    """Per-subject survival (or censoring survival) probabilities on a time grid.

    ``probs[i, k]`` is the probability for subject ``i`` at ``grid.times[k]``;
    before the first grid time the probability is 1, after the last it is
    held constant.
    """

    grid: TimeGrid
    probs: np.ndarray
    role: str = "survival"
    subject_id: np.ndarray | None = None
    clip_floor: float = 0.0

    def __post_init__(self):
        if self.role not in ("survival", "censoring"):
            raise ValidationError(f"unknown role {self.role!r}")
        p = _readonly_view(np.asarray(self.probs, dtype=np.float64))
        if p.ndim != 2 or p.shape[1] != self.grid.K:
            raise ValidationError("probs must be n x K with K matching the grid")
        if not np.all(np.isfinite(p)):
            raise ValidationError("probabilities must be finite")
        if p.size and (p.min() < self.clip_floor or p.max() > 1.0):
            raise ValidationError(f"probabilities must lie in [{self.clip_floor}, 1]")
        if p.shape[1] > 1:
            rise = np.diff(p, axis=1).max(initial=-np.inf)
            if rise > GRID_MONOTONE_TOL:
                row = int(np.argmax(np.diff(p, axis=1).max(axis=1)))
                raise ValidationError(f"row {row} increases in time by {rise:.3g}")
        ids = self.subject_id
        if ids is None:
            ids = [str(i) for i in range(p.shape[0])]
        ids = np.array([str(s) for s in ids], dtype=object)
        ids.setflags(write=False)
        if ids.size != p.shape[0]:
            raise ValidationError("subject_id length differs from number of rows")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "subject_id", ids)

    @classmethod
    def from_values(cls, grid, values, role="survival", subject_id=None,
                    clip_floor=DEFAULT_CLIP_FLOOR):
        """Build from raw model output, clipping below at ``clip_floor``."""
        p = np.clip(np.asarray(values, dtype=np.float64), clip_floor, 1.0)
        return cls(grid, p, role=role, subject_id=subject_id, clip_floor=clip_floor)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    def at_times(self, t) -> np.ndarray:
        """Step evaluation: row ``i`` at time ``t[i]``."""
        t = np.asarray(t, dtype=np.float64)
        idx = self.grid.step_index(t)
        out = np.ones(t.shape)
        inside = idx >= 0
        rows = np.arange(self.n)[inside]
        out[inside] = self.probs[rows, idx[inside]]
        return out

    def rows_for(self, ids) -> "SurvivalProbabilityGrid":
        ids = [str(s) for s in ids]
        if len(ids) == self.n and all(a == b for a, b in zip(ids, self.subject_id)):
            return self
        lookup = {s: i for i, s in enumerate(self.subject_id)}
        missing = [s for s in ids if s not in lookup]
        if missing:
            raise ValidationError(f"grid has no row for subject {missing[0]!r}")
        take = [lookup[s] for s in ids]
        return SurvivalProbabilityGrid(self.grid, self.probs[take], self.role, ids, self.clip_floor)


@dataclass(frozen=True)
class PseudoOutcomeMatrix:
    grid: TimeGrid
    values: np.ndarray  # K x n
    estimator: str = "DR"

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {self.estimator!r}")
        v = _readonly_view(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 2 or v.shape[0] != self.grid.K:
            raise ValidationError("pseudo-outcomes must be K x n")
        if not np.all(np.isfinite(v)):
            raise ValidationError("pseudo-outcomes must be finite")
        object.__setattr__(self, "values", v)


def _clamped_lerp(v0, v1, a):
    """Interpolate from ``v0`` (a=0) toward ``v1`` (a=1), kept inside [v1, v0]."""
    return np.minimum(v0, np.maximum(v1, v0 + a * (v1 - v0)))


@dataclass(frozen=True)
class CalibratedSurface:
    """Calibrated survival as a function of (risk, time).

    ``surface[i, k]`` is the survival probability at ``sorted_risks[i]`` and
    ``grid.times[k]``. Rows sharing a risk value are averaged for prediction.
    """

    sorted_risks: np.ndarray
    grid: TimeGrid
    surface: np.ndarray
    method: str = "DR"
    interpolation: str = "bilinear"
    t_max: float | None = None
    _nodes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.interpolation not in ("step", "bilinear"):
            raise ValidationError(f"unknown interpolation {self.interpolation!r}")
        r = _frozen(self.sorted_risks)
        s = _readonly_view(np.asarray(self.surface, dtype=np.float64))
        if r.ndim != 1 or r.size < 1 or not np.all(np.isfinite(r)):
            raise ValidationError("sorted_risks must be a non-empty finite 1D array")
        if np.any(np.diff(r) < 0):
            raise ValidationError("sorted_risks must be non-decreasing")
        if s.shape != (r.size, self.grid.K):
            raise ValidationError(f"surface must be {r.size} x {self.grid.K}, got {s.shape}")
        if not np.all(np.isfinite(s)) or s.min() < 0 or s.max() > 1:
            raise ValidationError("surface entries must lie in [0, 1]")
        if r.size > 1 and np.diff(s, axis=0).max() > MONOTONE_TOL:
            raise ValidationError("surface increases with risk")
        if self.grid.K > 1 and np.diff(s, axis=1).max() > MONOTONE_TOL:
            raise ValidationError("surface increases in time")
        t_max = self.grid.t_max if self.t_max is None else float(self.t_max)
        object.__setattr__(self, "sorted_risks", r)
        object.__setattr__(self, "surface", s)
        object.__setattr__(self, "t_max", t_max)
        nodes, start = np.unique(r, return_index=True)
        if nodes.size == r.size:
            rows = s
        else:
            counts = np.diff(np.append(start, r.size))
            rows = np.add.reduceat(s, start, axis=0) / counts[:, None]
            rows = np.minimum.accumulate(rows, axis=0)
        object.__setattr__(self, "_nodes", (nodes, rows))

    @property
    def n(self) -> int:
        return self.sorted_risks.size

    def node_table(self) -> np.ndarray:
        """Rows actually interpolated: one per distinct risk, in risk order."""
        return self._nodes[1]

    def restricted(self, columns) -> "CalibratedSurface":
        """The surface on the sub-grid ``grid.times[columns]``."""
        columns = np.asarray(columns, dtype=np.intp)
        return CalibratedSurface(self.sorted_risks, TimeGrid(self.grid.times[columns]),
                                 self.surface[:, columns], self.method, self.interpolation,
                                 self.t_max)

    def _risk_cells(self, risk):
        nodes = self._nodes[0]
        r = np.clip(np.asarray(risk, dtype=np.float64), nodes[0], nodes[-1])
        if nodes.size == 1:
            zero = np.zeros(r.shape, dtype=np.intp)
            return zero, zero, np.zeros(r.shape)
        i = np.clip(np.searchsorted(nodes, r, side="right") - 1, 0, nodes.size - 2)
        a = (r - nodes[i]) / (nodes[i + 1] - nodes[i])
        return i, i + 1, a

    def predict_grid(self, risk) -> np.ndarray:
        """Predicted survival at every grid time for each risk; shape (len(risk), K)."""
        risk = np.atleast_1d(np.asarray(risk, dtype=np.float64))
        rows = self._nodes[1]
        if self.interpolation == "step":
            idx = np.searchsorted(self._nodes[0], risk, side="right") - 1
            return rows[np.clip(idx, 0, rows.shape[0] - 1)].copy()
        lo, hi, a = self._risk_cells(risk)
        return _clamped_lerp(rows[lo], rows[hi], a[:, None])

    def predict(self, risk, t) -> np.ndarray:
        """Predicted survival at (risk, t) pairs; inputs broadcast together."""
        risk, t = np.broadcast_arrays(np.asarray(risk, dtype=np.float64),
                                      np.asarray(t, dtype=np.float64))
        shape = risk.shape
        risk, t = risk.ravel(), t.ravel()
        if np.any(t < 0):
            raise ValueError("t must be >= 0")
        nodes, rows = self._nodes
        K = self.grid.K
        # column 0 of the padded table is S=1 at t=0
        padded = np.concatenate([np.ones((rows.shape[0], 1)), rows], axis=1)
        ptimes = np.concatenate([[0.0], self.grid.times])
        k = np.clip(np.searchsorted(ptimes, t, side="right") - 1, 0, K)
        if self.interpolation == "step":
            idx = np.clip(np.searchsorted(nodes, risk, side="right") - 1, 0, nodes.size - 1)
            return padded[idx, k].reshape(shape)
        lo, hi, a = self._risk_cells(risk)
        k1 = np.minimum(k + 1, K)
        span = ptimes[k1] - ptimes[k]
        b = np.where(span > 0, (t - ptimes[k]) / np.where(span > 0, span, 1.0), 0.0)
        b = np.clip(b, 0.0, 1.0)
        g_lo = _clamped_lerp(padded[lo, k], padded[lo, k1], b)
        g_hi = _clamped_lerp(padded[hi, k], padded[hi, k1], b)
        return _clamped_lerp(g_lo, g_hi, a).reshape(shape)

    def __eq__(self, other):
        if not isinstance(other, CalibratedSurface):
            return NotImplemented
        return (np.array_equal(self.sorted_risks, other.sorted_risks)
                and self.grid == other.grid
                and np.array_equal(self.surface, other.surface)
                and self.method == other.method
                and self.interpolation == other.interpolation
                and self.t_max == other.t_max)

    __hash__ = None


# --------------------------------------------------------------------------
# file formats

def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_float(text, row, column):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"column {column!r}: cannot parse {text!r} as a number", row) from None
    return value


_TRUE = {"1", "true", "True", "TRUE", "1.0"}
_FALSE = {"0", "false", "False", "FALSE", "0.0"}


def load_dataset(path, schema: dict | None = None) -> SurvivalDataset:
    """Read a dataset CSV (``id,time,event,x1..xp``; header required).

    ``schema`` may rename columns: keys ``id``, ``time``, ``event`` and
    ``covariates`` (a list). By default every other column is a covariate.
    Row numbers in errors count the header as row 1.
    """
    schema = dict(schema or {})
    id_col = schema.get("id", "id")
    time_col = schema.get("time", "time")
    event_col = schema.get("event", "event")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file") from None
        header = [h.strip() for h in header]
        for col in (time_col, event_col):
            if col not in header:
                raise ParseError(f"missing required column {col!r}", 1)
        cov_cols = schema.get("covariates")
        if cov_cols is None:
            cov_cols = [h for h in header if h not in (id_col, time_col, event_col)]
        pos = {h: i for i, h in enumerate(header)}
        for col in cov_cols:
            if col not in pos:
                raise ParseError(f"missing covariate column {col!r}", 1)
        ids, times, events, covs = [], [], [], []
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", rownum)
            t_txt = row[pos[time_col]].strip()
            e_txt = row[pos[event_col]].strip()
            if t_txt == "" or e_txt == "":
                raise ParseError("missing time or event value", rownum)
            t = _parse_float(t_txt, rownum, time_col)
            if not math.isfinite(t) or t < 0:
                raise ValidationError(f"row {rownum}: observed time must be finite and >= 0, got {t_txt}")
            if e_txt in _TRUE:
                e = True
            elif e_txt in _FALSE:
                e = False
            else:
                raise ParseError(f"event must be 0/1 or true/false, got {e_txt!r}", rownum)
            ids.append(row[pos[id_col]].strip() if id_col in pos else str(rownum - 2))
            times.append(t)
            events.append(e)
            covs.append([_parse_float(row[pos[c]].strip(), rownum, c) for c in cov_cols])
    if not times:
        raise ParseError("no data rows")
    x = np.array(covs, dtype=np.float64) if cov_cols else None
    try:
        return SurvivalDataset(np.array(times), np.array(events, dtype=bool), ids, x)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def save_dataset(data: SurvivalDataset, path) -> None:
    """Write a dataset CSV with shortest round-trip float formatting."""
    header = ["id", "time", "event"] + [f"x{j + 1}" for j in range(data.p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [data.subject_id[i], _fmt(data.observed_time[i]), int(data.event[i])]
            if data.p:
                row.extend(_fmt(v) for v in data.covariates[i])
            w.writerow(row)


def load_risks(path) -> RiskScores:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "risk"} <= set(reader.fieldnames):
            raise ParseError("risk CSV needs columns id,risk", 1)
        ids, risks = [], []
        for rownum, row in enumerate(reader, start=2):
            ids.append(row["id"].strip())
            risks.append(_parse_float(row["risk"], rownum, "risk"))
    return RiskScores(ids, np.array(risks))


def save_risks(scores: RiskScores, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "risk"])
        for s, r in zip(scores.subject_id, scores.risk):
            w.writerow([s, _fmt(r)])


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None


def _write_json(doc, path):
    # json writes floats with repr(), which round-trips exactly
    Path(path).write_text(json.dumps(doc, separators=(",", ":"), allow_nan=False))


def save_grid(grid: SurvivalProbabilityGrid, path) -> None:
    _write_json({
        "role": grid.role,
        "times": grid.grid.times.tolist(),
        "subjects": grid.subject_id.tolist(),
        "probs": grid.probs.tolist(),
        "clip_floor": grid.clip_floor,
    }, path)


def load_grid(path, clip_floor: float | None = None) -> SurvivalProbabilityGrid:
    doc = _read_json(path)
    for key in ("role", "times", "subjects", "probs"):
        if key not in doc:
            raise ParseError(f"{path}: probability grid JSON lacks {key!r}")
    floor = doc.get("clip_floor", 0.0) if clip_floor is None else clip_floor
    probs = np.array(doc["probs"], dtype=np.float64)
    return SurvivalProbabilityGrid(TimeGrid(doc["times"]), probs, doc["role"],
                                   doc["subjects"], float(floor))


def save_surface(surface: CalibratedSurface, path) -> None:
    _write_json({
        "method": surface.method,
        "risks": surface.sorted_risks.tolist(),
        "times": surface.grid.times.tolist(),
        "surface": surface.surface.tolist(),
        "interpolation": surface.interpolation,
        "t_max": surface.t_max,
    }, path)


def load_surface(path) -> CalibratedSurface:
    doc = _read_json(path)
    for key in ("method", "risks", "times", "surface"):
        if key not in doc:
            raise ParseError(f"{path}: surface JSON lacks {key!r}")
    return CalibratedSurface(
        np.array(doc["risks"], dtype=np.float64),
        TimeGrid(doc["times"]),
        np.array(doc["surface"], dtype=np.float64),
        method=doc["method"],
        interpolation=doc.get("interpolation", "bilinear"),
        t_max=doc.get("t_max"),
    )


def risk_scores(ids: Sequence, risk) -> RiskScores:
    return RiskScores(np.asarray(list(ids), dtype=object), np.asarray(risk, dtype=np.float64))
