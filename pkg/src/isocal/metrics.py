"""Discrimination and calibration metrics for survival curves.

Predicted curves are right-continuous step functions on a time grid: 1
before the first grid time, ``probs[:, k]`` on ``[t_k, t_{k+1})`` and
constant after the last grid time. Integrals over time are evaluated exactly
segment by segment.

Three estimator modes are supported:

``ipcw``
    observed ``(Y, delta)`` with inverse-probability-of-censoring weights
    from a censoring survival curve ``G``.
``naive``
    observed ``(Y, delta)`` with ``G = 1`` (censoring ignored).
``oracle``
    latent event times (simulation only), every subject uncensored, ``G = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import TimeGrid

MODES = ("ipcw", "oracle", "naive")
DEFAULT_TAUS = tuple(round(0.1 * k, 1) for k in range(1, 10))
_CHUNK = 512


class UndefinedMetricError(ValueError):
    """The metric has no value for these inputs (e.g. no comparable pairs)."""


@dataclass(frozen=True)
class CurvePredictor:
    """Step survival curves for ``n`` subjects on ``grid``, produced in row blocks.

    ``rows(a, b)`` returns the ``(b - a) x K`` probabilities of subjects
    ``a..b-1``; large predictors never need to be held in memory at once.

    ``breaks`` optionally lists the grid columns where any curve may change
    (column 0 included). Columns between breaks repeat their left neighbour,
    so the curves are the same step functions on the sub-grid of break times.
    ``restrict`` builds that sub-grid predictor directly; without it the full
    rows are computed and sliced.
    """

    grid: TimeGrid
    n: int
    rows: Callable[[int, int], np.ndarray]
    breaks: np.ndarray | None = None
    restrict: Callable[[np.ndarray], "CurvePredictor"] | None = field(default=None, repr=False)

    @classmethod
    def from_array(cls, grid: TimeGrid, probs) -> "CurvePredictor":
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != grid.K:
            raise ValueError("probs must be n x K")
        return cls(grid, probs.shape[0], lambda a, b: probs[a:b])

    def restricted(self, columns) -> "CurvePredictor":
        """The same curves on ``grid.times[columns]``.

        Exact only when ``columns`` starts at 0 and contains every break.
        """
        columns = np.asarray(columns, dtype=np.intp)
        if columns.size == self.grid.K:
            return self
        if self.restrict is not None:
            return self.restrict(columns)
        rows = self.rows
        return CurvePredictor(TimeGrid(self.grid.times[columns]), self.n,
                              lambda a, b: rows(a, b)[:, columns])

    def at_times(self, t) -> np.ndarray:
        """Row ``i`` evaluated at ``t[i]``."""
        t = np.asarray(t, dtype=np.float64)
        out = np.ones(self.n)
        idx = self.grid.step_index(t)
        for a in range(0, self.n, _CHUNK):
            b = min(a + _CHUNK, self.n)
            block = self.rows(a, b)
            ii = idx[a:b]
            inside = ii >= 0
            out[a:b][inside] = block[np.flatnonzero(inside), ii[inside]]
        return out


@dataclass(frozen=True)
class EvalTarget:
    """Test outcomes and censoring weights for one metric mode.

    ``G`` is None when no reweighting applies (naive and oracle modes).
    """

    time: np.ndarray
    event: np.ndarray
    mode: str = "ipcw"
    G: CurvePredictor | None = None
    clip_floor: float = 1e-4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        t = np.asarray(self.time, dtype=np.float64)
        e = np.asarray(self.event, dtype=bool)
        if t.shape != e.shape or t.ndim != 1:
            raise ValueError("time and event must be equal-length 1D arrays")
        if self.mode == "ipcw" and self.G is None:
            raise ValueError("ipcw mode needs a censoring curve G")
        if self.G is not None and self.G.n != t.size:
            raise ValueError("G has a different number of subjects")
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", e)

    @classmethod
    def ipcw(cls, time, event, G: CurvePredictor, clip_floor=1e-4):
        return cls(time, event, "ipcw", G, clip_floor)

    @classmethod
    def naive(cls, time, event):
        return cls(time, event, "naive")

    @classmethod
    def oracle(cls, true_time):
        t = np.asarray(true_time, dtype=np.float64)
        return cls(t, np.ones(t.size, dtype=bool), "oracle")

    @property
    def n(self):
        return self.time.size

    def G_at_observed(self) -> np.ndarray:
        if self.G is None:
            return np.ones(self.n)
        return np.maximum(self.G.at_times(self.time), self.clip_floor)

    def G_rows(self, a, b, K) -> np.ndarray:
        if self.G is None:
            return np.ones((b - a, K))
        return np.maximum(self.G.rows(a, b), self.clip_floor)


# ---------------------------------------------------------------- C-index

def c_index(risk, time, event) -> float:
    """Harrell's concordance between risk scores and observed times.

    A pair is comparable when the subject with the shorter time had an
    event; it is concordant when that subject has the higher risk. Risk ties
    count one half; time ties are not comparable.
    """
    r = np.asarray(risk, dtype=np.float64)
    t = np.asarray(time, dtype=np.float64)
    e = np.asarray(event, dtype=bool)
    if r.size < 2:
        raise UndefinedMetricError("C-index needs at least two subjects")
    conc = 0.0
    total = 0
    ev = np.flatnonzero(e)
    for a in range(0, ev.size, _CHUNK):
        i = ev[a:a + _CHUNK]
        comparable = t[i][:, None] < t[None, :]
        ri = r[i][:, None]
        total += int(comparable.sum())
        conc += float(np.sum(comparable & (ri > r[None, :])))
        conc += 0.5 * float(np.sum(comparable & (ri == r[None, :])))
    if total == 0:
        raise UndefinedMetricError("no comparable pairs")
    return conc / total


# ---------------------------------------------------------------- AUPIT

def _area_to_uniform(values, weights) -> float:
    """``int_0^1 |F(u) - u| du`` for the weighted step CDF ``F`` of ``values``."""
    order = np.argsort(values, kind="stable")
    v = np.clip(values[order], 0.0, 1.0)
    w = weights[order] / weights.sum()
    # breakpoints and the CDF level on each interval between them
    pts, idx = np.unique(v, return_index=True)
    cum = np.cumsum(w)
    last = np.r_[idx[1:] - 1, v.size - 1]
    levels = np.r_[0.0, cum[last]]
    levels[-1] = 1.0
    edges = np.r_[0.0, pts, 1.0]
    lo, hi = edges[:-1], edges[1:]
    c = levels
    below = c <= lo
    above = c >= hi
    mid = ~(below | above)
    area = np.where(below, ((hi - c) ** 2 - (lo - c) ** 2) / 2.0, 0.0)
    area += np.where(above, ((c - lo) ** 2 - (c - hi) ** 2) / 2.0, 0.0)
    area += np.where(mid, ((c - lo) ** 2 + (hi - c) ** 2) / 2.0, 0.0)
    return float(area.sum())


def pit_values(S: CurvePredictor, target: EvalTarget) -> np.ndarray:
    """``1 - S(Y_i | X_i)`` for every subject."""
    return 1.0 - S.at_times(target.time)


def aupit(S: CurvePredictor, target: EvalTarget) -> float:
    """Unsigned area between the PIT CDF and the uniform CDF.

    Only uncensored subjects contribute; in ipcw mode each carries mass
    ``1 / G(Y_i | X_i)`` before normalization.
    """
    if not target.event.any():
        raise UndefinedMetricError("AUPIT needs at least one uncensored subject")
    pit = pit_values(S, target)[target.event]
    w = 1.0 / target.G_at_observed()[target.event]
    return aupit_from_pit(pit, w)


def aupit_from_pit(pit, weights=None) -> float:
    pit = np.asarray(pit, dtype=np.float64)
    if pit.size == 0:
        raise UndefinedMetricError("no PIT values")
    w = np.ones(pit.size) if weights is None else np.asarray(weights, dtype=np.float64)
    return _area_to_uniform(pit, w)


# ---------------------------------------------------------------- integrals

def _segments(grid: TimeGrid, t_max: float):
    """Left edges and lengths of the step segments covering ``[0, t_max]``."""
    left = np.r_[0.0, grid.times]
    right = np.r_[grid.times, max(t_max, grid.t_max)]
    lo = np.minimum(left, t_max)
    hi = np.minimum(right, t_max)
    return lo, hi - lo


def _cum_integral(values, lengths):
    """Cumulative integral at each segment's left edge; shape (m, K+2)."""
    out = np.zeros((values.shape[0], values.shape[1] + 1))
    np.cumsum(values * lengths[None, :], axis=1, out=out[:, 1:])
    return out


def _integral_to(x, cum, values, left, seg_index):
    """``int_0^x f`` for step ``f`` with per-row ``x`` in segment ``seg_index``."""
    rows = np.arange(x.size)
    return cum[rows, seg_index] + values[rows, seg_index] * (x - left[seg_index])


def _padded(block):
    return np.concatenate([np.ones((block.shape[0], 1)), block], axis=1)


def _check_tmax(t_max):
    if not (t_max > 0 and math.isfinite(t_max)):
        raise ValueError("t_max must be positive and finite")


def ibs(S: CurvePredictor, target: EvalTarget, t_max: float) -> float:
    """Integrated Brier score on ``[0, t_max]`` with censoring weights.

    Per subject: ``delta 1[Y <= t] S(t)^2 / G(Y) + 1[Y > t] (1 - S(t))^2 / G(t)``
    integrated over time and divided by ``t_max``; averaged over subjects.
    """
    _check_tmax(t_max)
    _check_grids(S, target)
    grid = S.grid
    left, length = _segments(grid, t_max)
    Y = np.minimum(target.time, t_max)
    seg = np.searchsorted(grid.times, Y, side="right")  # segment of each Y
    G_Y = target.G_at_observed()
    total = 0.0
    for a in range(0, target.n, _CHUNK):
        b = min(a + _CHUNK, target.n)
        s = _padded(S.rows(a, b))
        g = _padded(target.G_rows(a, b, grid.K))
        sq = s * s
        under = (1.0 - s) ** 2 / g
        cum_sq = _cum_integral(sq, length)
        cum_under = _cum_integral(under, length)
        y, k = Y[a:b], seg[a:b]
        before = _integral_to(y, cum_under, under, left, k)
        after = cum_sq[:, -1] - _integral_to(y, cum_sq, sq, left, k)
        w = np.where(target.event[a:b], 1.0 / G_Y[a:b], 0.0)
        total += float(np.sum(before + w * after))
    return total / (target.n * t_max)


@dataclass(frozen=True)
class QuantileScore:
    tau: float
    score: float | None
    included: np.ndarray
    reason: str | None = None

    @property
    def n_included(self) -> int:
        return int(self.included.sum())

    @property
    def n_excluded(self) -> int:
        return int(self.included.size - self.included.sum())


def predicted_quantile(S: CurvePredictor, tau: float, t_max: float) -> np.ndarray:
    """Smallest grid time with ``S <= 1 - tau``; NaN when not reached by ``t_max``."""
    return predicted_quantiles(S, [tau], t_max)[0]


def predicted_quantiles(S: CurvePredictor, taus, t_max: float) -> np.ndarray:
    """``predicted_quantile`` for several levels at once; shape (len(taus), n)."""
    taus = np.asarray(taus, dtype=np.float64)
    q = np.full((taus.size, S.n), np.nan)
    for a in range(0, S.n, _CHUNK):
        b = min(a + _CHUNK, S.n)
        block = S.rows(a, b)
        for j, tau in enumerate(taus):
            # rows are non-increasing, so the first hit follows the entries above the level
            first = np.count_nonzero(block > 1.0 - tau, axis=1)
            ok = first < S.grid.K
            vals = np.full(b - a, np.nan)
            vals[ok] = S.grid.times[first[ok]]
            vals[vals > t_max] = np.nan
            q[j, a:b] = vals
    return q


def _check_grids(S: CurvePredictor, target: EvalTarget):
    if target.G is not None and target.G.grid != S.grid:
        raise ValueError("censoring curves must share the prediction grid")


def _quantile_terms(q, tau, target: EvalTarget, t_max, grid: TimeGrid):
    """Per-subject IPCW pinball terms for predicted quantiles ``q`` (finite)."""
    n = target.n
    Y = target.time
    G_Y = target.G_at_observed()
    over = np.where(target.event, np.maximum(q - Y, 0.0) / G_Y, 0.0)
    if target.G is None:
        under = np.maximum(np.minimum(Y, t_max) - q, 0.0)
    else:
        left, length = _segments(grid, t_max)
        under = np.empty(n)
        y = np.minimum(Y, t_max)
        sy = np.searchsorted(grid.times, y, side="right")
        sq = np.searchsorted(grid.times, q, side="right")
        for a in range(0, n, _CHUNK):
            b = min(a + _CHUNK, n)
            inv = 1.0 / _padded(target.G_rows(a, b, grid.K))
            cum = _cum_integral(inv, length)
            hi = _integral_to(y[a:b], cum, inv, left, sy[a:b])
            lo = _integral_to(q[a:b], cum, inv, left, sq[a:b])
            under[a:b] = np.maximum(hi - lo, 0.0)
    return (1.0 - tau) * over + tau * under


def quantile_scores(S: CurvePredictor, target: EvalTarget, taus, t_max: float,
                    include: np.ndarray | None = None, quantiles=None) -> list[QuantileScore]:
    """IPCW pinball loss at each level in ``taus``.

    Subjects whose predicted curve does not reach ``1 - tau`` by ``t_max``
    are excluded. ``include`` (shape (len(taus), n)) further restricts the
    evaluated subjects, e.g. to the intersection across compared methods.
    """
    _check_tmax(t_max)
    _check_grids(S, target)
    taus = [float(t) for t in taus]
    for tau in taus:
        if not 0.0 < tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
    q = predicted_quantiles(S, taus, t_max) if quantiles is None else quantiles
    out = []
    for j, tau in enumerate(taus):
        mask = np.isfinite(q[j])
        if include is not None:
            mask &= include[j]
        if not mask.any():
            out.append(QuantileScore(tau, None, mask, "no subject with a defined quantile"))
            continue
        qq = np.where(mask, q[j], 0.0)
        terms = _quantile_terms(qq, tau, target, t_max, S.grid)
        out.append(QuantileScore(tau, float(terms[mask].mean()), mask))
    return out


def quantile_score(S: CurvePredictor, target: EvalTarget, tau: float, t_max: float,
                   include=None) -> tuple[float, np.ndarray]:
    """Single-level pinball loss; returns ``(score, inclusion mask)``."""
    inc = None if include is None else np.asarray(include, dtype=bool)[None, :]
    res = quantile_scores(S, target, [tau], t_max, include=inc)[0]
    if res.score is None:
        raise UndefinedMetricError(f"no subject has a defined {tau} quantile")
    return res.score, res.included


# ---------------------------------------------------------------- report

@dataclass
class MetricReport:
    method: str
    mode: str
    c_index: float | None
    aupit: float | None
    ibs: float | None
    quantile_scores: dict = field(default_factory=dict)  # tau -> (score, n_in, n_out)
    seed: int | None = None
    dataset: str | None = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "mode": self.mode, "seed": self.seed,
            "dataset": self.dataset, "c_index": self.c_index, "aupit": self.aupit,
            "ibs": self.ibs,
            "quantile_scores": {f"{t:g}": {"score": s, "n_included": i, "n_excluded": e}
                                for t, (s, i, e) in self.quantile_scores.items()},
            "notes": self.notes,
        }

    def csv_row(self) -> dict:
        row = {"dataset": self.dataset or "", "seed": "" if self.seed is None else self.seed,
               "method": self.method, "mode": self.mode,
               "c_index": _cell(self.c_index), "aupit": _cell(self.aupit), "ibs": _cell(self.ibs)}
        for t, (s, _, _) in sorted(self.quantile_scores.items()):
            row[f"qs_{t:g}"] = _cell(s)
        return row


def _cell(v):
    return "" if v is None else repr(float(v))


def _safe(fn, notes, key):
    try:
        return fn()
    except UndefinedMetricError as exc:
        notes[key] = str(exc)
        return None


def _compress(predictors: dict, target: EvalTarget):
    """Move every curve to the union of their break columns when all are known."""
    curves = list(predictors.values()) + ([target.G] if target.G is not None else [])
    if not curves or any(c.breaks is None for c in curves):
        return predictors, target
    grid = curves[0].grid
    if any(c.grid != grid for c in curves):
        return predictors, target
    cols = np.unique(np.concatenate([[0]] + [c.breaks for c in curves]))
    if cols.size == grid.K:
        return predictors, target
    out = {m: p.restricted(cols) for m, p in predictors.items()}
    if target.G is not None:
        target = EvalTarget(target.time, target.event, target.mode,
                            target.G.restricted(cols), target.clip_floor)
    return out, target


def evaluate_methods(predictors: dict, risk: np.ndarray, target: EvalTarget,
                     t_max: float, taus=DEFAULT_TAUS, seed=None, dataset=None) -> list[MetricReport]:
    """Score several methods on the same test set.

    Quantile scores use the intersection of every method's inclusion set, so
    all methods are scored on the same subjects at each level.
    """
    taus = list(taus)
    predictors, target = _compress(predictors, target)
    quantiles = {m: predicted_quantiles(p, taus, t_max) for m, p in predictors.items()}
    include = np.ones((len(taus), target.n), dtype=bool)
    for q in quantiles.values():
        include &= np.isfinite(q)
    cidx_notes = {}
    cidx = _safe(lambda: c_index(risk, target.time, target.event), cidx_notes, "c_index")
    reports = []
    for m, pred in predictors.items():
        notes = dict(cidx_notes)
        a = _safe(lambda: aupit(pred, target), notes, "aupit")
        b = ibs(pred, target, t_max)
        qs = quantile_scores(pred, target, taus, t_max, include=include, quantiles=quantiles[m])
        qmap = {}
        for r in qs:
            qmap[r.tau] = (r.score, r.n_included, r.n_excluded)
            if r.reason:
                notes[f"qs_{r.tau:g}"] = r.reason
        reports.append(MetricReport(m, target.mode, cidx, a, b, qmap, seed, dataset, notes))
    return reports
