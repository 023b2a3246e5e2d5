"""Isotonic survival recalibration.

Five estimators turn a calibration set into a surface that is monotone in
both risk and time: reweighted isotonic regression (RW, RW+) and projections
of pointwise pseudo-outcomes (HT, HT+, DR) onto doubly monotone matrices.
"""

from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass

import numpy as np

from .data import (
    DEFAULT_CLIP_FLOOR,
    CalibratedSurface,
    PseudoOutcomeMatrix,
    RiskScores,
    SurvivalDataset,
    SurvivalProbabilityGrid,
    TimeGrid,
    ValidationError,
)
from .isotonic import (
    DegenerateProblemError,
    enforce_doubly_monotone,
    pava_rows,
    project_doubly_monotone,
)

logger = logging.getLogger(__name__)

DEFAULT_GRID_DENSITY = 10_000
_CHUNK = 256


class GridAlignmentError(ValueError):
    """An observed time needed on the grid is missing from it."""


@dataclass(frozen=True)
class CalibrationInputs:
    """Calibration subjects with their risks and nuisance survival grids.

    ``S_hat`` is only needed for the doubly robust estimator. Both grids must
    use ``grid`` and list subjects in the order of ``cal_data``.
    """

    cal_data: SurvivalDataset
    cal_risks: RiskScores
    G_hat: SurvivalProbabilityGrid
    S_hat: SurvivalProbabilityGrid | None = None
    grid: TimeGrid | None = None
    clip_floor: float = DEFAULT_CLIP_FLOOR

    def __post_init__(self):
        grid = self.grid if self.grid is not None else self.G_hat.grid
        object.__setattr__(self, "grid", grid)
        ids = self.cal_data.subject_id
        object.__setattr__(self, "cal_risks",
                           RiskScores(ids, self.cal_risks.aligned_to(ids)))
        for name in ("G_hat", "S_hat"):
            g = getattr(self, name)
            if g is None:
                continue
            if g.grid != grid:
                raise ValidationError(f"{name} is not on the calibration time grid")
            object.__setattr__(self, name, g.rows_for(ids))
        if self.G_hat.role != "censoring":
            raise ValidationError("G_hat must have the censoring role")
        if self.S_hat is not None and self.S_hat.role != "survival":
            raise ValidationError("S_hat must have the survival role")

    @property
    def risk(self) -> np.ndarray:
        return self.cal_risks.risk

    def G_floor(self, values):
        return np.maximum(values, self.clip_floor)

    def G_at_observed(self) -> np.ndarray:
        """``G_hat(Y_i | X_i)`` by step evaluation, floored at ``clip_floor``."""
        return self.G_floor(self.G_hat.at_times(self.cal_data.observed_time))


def build_time_grid(train: SurvivalDataset, cal: SurvivalDataset,
                    n_dense: int = DEFAULT_GRID_DENSITY) -> TimeGrid:
    """Even lattice up to the largest calibration time, plus every observed time.

    Returns the sorted, de-duplicated union of ``k * t_max / n_dense`` for
    ``k = 1..n_dense`` (``t_max`` the largest calibration time) with all
    positive observed times of ``train`` and ``cal``.
    """
    if n_dense < 1:
        raise ValueError("n_dense must be >= 1")
    t_max = float(cal.observed_time.max())
    if t_max <= 0:
        raise ValueError("largest calibration time is 0; cannot build a grid")
    lattice = np.arange(1, n_dense + 1) * (t_max / n_dense)
    lattice[-1] = t_max
    observed = np.concatenate([train.observed_time, cal.observed_time])
    times = np.unique(np.concatenate([lattice, observed[observed > 0]]))
    return TimeGrid(times)


def rw_weights(cal: SurvivalDataset, G_hat: SurvivalProbabilityGrid,
               clip_floor: float = DEFAULT_CLIP_FLOOR) -> np.ndarray:
    """``delta_i / max(G_hat(Y_i | X_i), clip_floor)``."""
    G = np.maximum(G_hat.at_times(cal.observed_time), clip_floor)
    return np.where(cal.event, 1.0 / G, 0.0)


def rw_plus_weights(cal: SurvivalDataset, G_hat: SurvivalProbabilityGrid, t,
                    clip_floor: float = DEFAULT_CLIP_FLOOR) -> np.ndarray:
    """``1[Y > t] / G_hat(t | X) + delta * 1[Y <= t] / G_hat(Y | X)``.

    ``t`` is a scalar time (weights of shape (n,)) or a 1D array of times
    (shape (len(t), n)).
    """
    t = np.asarray(t, dtype=np.float64)
    Y = cal.observed_time
    G_Y = np.maximum(G_hat.at_times(Y), clip_floor)
    idx = G_hat.grid.step_index(np.atleast_1d(t))
    G_t = np.ones((G_hat.n, idx.size))
    inside = idx >= 0
    G_t[:, inside] = G_hat.probs[:, idx[inside]]
    G_t = np.maximum(G_t, clip_floor).T  # (len(t), n)
    tt = np.atleast_1d(t)[:, None]
    w = np.where(Y[None, :] > tt, 1.0 / G_t, np.where(cal.event[None, :], 1.0 / G_Y[None, :], 0.0))
    return w[0] if t.ndim == 0 else w


def _grid_positions(Y, grid: TimeGrid, snap: bool) -> np.ndarray:
    """Grid index of each observed time (K when beyond the grid)."""
    pos = np.searchsorted(grid.times, Y, side="left")
    within = pos < grid.K
    exact = np.zeros(Y.shape, dtype=bool)
    exact[within] = grid.times[pos[within]] == Y[within]
    missing = within & ~exact
    if missing.any() and not snap:
        j = int(np.flatnonzero(missing)[0])
        raise GridAlignmentError(
            f"observed time {Y[j]!r} of calibration subject {j} is not a grid time")
    return pos


def dr_pseudo_outcomes(inputs: CalibrationInputs, snap_to_grid: bool = False,
                       chunk: int = _CHUNK) -> PseudoOutcomeMatrix:
    """Doubly robust pointwise survival estimates, one column per subject.

    With ``dLambda(t_i) = 1 - S(t_i) / S(t_{i-1})`` and the martingale
    increment ``dM(t_k) = 1[Y = t_k, delta = 1] - 1[Y > t_k] dLambda(t_k)``,
    the estimate at ``t_i`` is
    ``S(t_i) * (1 - sum_{k <= i} dM(t_k) / (S(t_k) G(t_k)))``.

    Observed times inside the grid must be grid points. With
    ``snap_to_grid`` an off-grid time is moved to the next grid point
    instead of raising.
    """
    if inputs.S_hat is None:
        raise ValidationError("the doubly robust estimator needs S_hat")
    grid = inputs.grid
    data = inputs.cal_data
    n, K = data.n, grid.K
    pos = _grid_positions(data.observed_time, grid, snap_to_grid)
    out = np.empty((n, K))  # subject-major; exposed transposed as K x n
    cols = np.arange(K)
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        S = inputs.S_hat.probs[a:b]
        G = inputs.G_floor(inputs.G_hat.probs[a:b])
        prev = np.empty_like(S)
        prev[:, 0] = 1.0
        prev[:, 1:] = S[:, :-1]
        dlam = 1.0 - S / prev
        p = pos[a:b, None]
        dM = np.where(cols[None, :] < p, -dlam, 0.0)
        ev = data.event[a:b] & (pos[a:b] < K)
        rows = np.flatnonzero(ev)
        dM[rows, pos[a:b][rows]] = 1.0
        np.cumsum(dM / (S * G), axis=1, out=out[a:b])
        np.subtract(1.0, out[a:b], out=out[a:b])
        out[a:b] *= S
    return PseudoOutcomeMatrix(grid, out.T, "DR")


def ht_pseudo_outcomes(inputs: CalibrationInputs) -> PseudoOutcomeMatrix:
    """``delta * 1[Y > t] / G_hat(Y | X)``."""
    Y = inputs.cal_data.observed_time
    scale = np.where(inputs.cal_data.event, 1.0 / inputs.G_at_observed(), 0.0)
    vals = np.where(Y[:, None] > inputs.grid.times[None, :], scale[:, None], 0.0)
    return PseudoOutcomeMatrix(inputs.grid, vals.T, "HT")


def ht_plus_pseudo_outcomes(inputs: CalibrationInputs) -> PseudoOutcomeMatrix:
    """``1[Y > t] / G_hat(t | X)``."""
    Y = inputs.cal_data.observed_time
    vals = np.where(Y[:, None] > inputs.grid.times[None, :],
                    1.0 / inputs.G_floor(inputs.G_hat.probs), 0.0)
    return PseudoOutcomeMatrix(inputs.grid, vals.T, "HT+")


def _risk_order(inputs):
    return np.argsort(inputs.risk, kind="stable")


def _package(inputs, order, S, method, interpolation):
    np.clip(S, 0.0, 1.0, out=S)
    t_max = float(inputs.cal_data.observed_time.max())
    return CalibratedSurface(inputs.risk[order], inputs.grid, S, method=method,
                             interpolation=interpolation, t_max=t_max)


def fit_rw_isr(inputs: CalibrationInputs, variant: str = "RW",
               interpolation: str = "bilinear", tol: float = 1e-9,
               max_iter: int = 10_000, check_every: int = 1) -> CalibratedSurface:
    """Reweighted isotonic regression of ``1[Y > t]`` on risk at every grid time.

    RW uses the time-constant weights ``delta / G(Y)``; its fits are already
    non-increasing in time. RW+ uses the time-varying weights and is passed
    through the doubly monotone projection afterwards.
    """
    if variant not in ("RW", "RW+"):
        raise ValueError(f"unknown RW variant {variant!r}")
    order = _risk_order(inputs)
    data = inputs.cal_data.subset(order)
    Y = data.observed_time
    times = inputs.grid.times
    # targets: rows = grid times, columns = subjects in risk order
    targets = (Y[None, :] > times[:, None]).astype(np.float64)
    if variant == "RW":
        w = rw_weights(data, inputs.G_hat.rows_for(data.subject_id), inputs.clip_floor)
        if not np.any(w > 0):
            raise DegenerateProblemError("no uncensored calibration subject: RW weights are all zero")
        fit_t = pava_rows(targets, w)
        del targets
        S = np.ascontiguousarray(fit_t.T)
        del fit_t
        rise = np.diff(S, axis=1).max(initial=0.0)
        if rise > 1e-8:
            raise AssertionError(f"RW fit increases in time by {rise:.3g}")
        enforce_doubly_monotone(S, out=S)
        return _package(inputs, order, S, "RW", interpolation)
    G = inputs.G_hat.rows_for(data.subject_id)
    w = np.empty_like(targets)
    for a in range(0, times.size, _CHUNK):
        w[a:a + _CHUNK] = rw_plus_weights(data, G, times[a:a + _CHUNK], inputs.clip_floor)
    zero = np.flatnonzero(~np.any(w > 0, axis=1))
    if zero.size:
        raise DegenerateProblemError(
            f"all RW+ weights are zero at grid time {times[zero[0]]!r}")
    fit_t = pava_rows(targets, w)
    del targets, w
    S = project_doubly_monotone(fit_t.T, tol=tol, max_iter=max_iter, check_every=check_every)
    del fit_t
    return _package(inputs, order, S, "RW+", interpolation)


def fit_pseudo_isr(inputs: CalibrationInputs, variant: str = "DR",
                   interpolation: str = "bilinear", tol: float = 1e-9,
                   max_iter: int = 10_000, pseudo: PseudoOutcomeMatrix | None = None,
                   snap_to_grid: bool = False, check_every: int = 1) -> CalibratedSurface:
    """Project HT, HT+ or DR pseudo-outcomes onto doubly monotone surfaces.

    The projection acts on raw pseudo-outcomes; entries are clamped to
    ``[0, 1]`` afterwards.
    """
    builders = {"DR": lambda: dr_pseudo_outcomes(inputs, snap_to_grid=snap_to_grid),
                "HT": lambda: ht_pseudo_outcomes(inputs),
                "HT+": lambda: ht_plus_pseudo_outcomes(inputs)}
    if variant not in builders:
        raise ValueError(f"unknown pseudo-outcome variant {variant!r}")
    if pseudo is None:
        pseudo = builders[variant]()
    elif pseudo.estimator != variant:
        raise ValueError(f"pseudo-outcomes are {pseudo.estimator}, not {variant}")
    order = _risk_order(inputs)
    started = _time.perf_counter()
    S, state = project_doubly_monotone(pseudo.values.T[order], tol=tol, max_iter=max_iter,
                                       return_state=True, overwrite_input=True,
                                       check_every=check_every)
    logger.info("%s projection: %d x %d, %d iterations, %.2fs", variant, S.shape[0],
                S.shape[1], state.iterations, _time.perf_counter() - started)
    return _package(inputs, order, S, variant, interpolation)


def fit_surface(inputs: CalibrationInputs, method: str, **kwargs) -> CalibratedSurface:
    """Dispatch on the method tag (RW, RW+, HT, HT+, DR; case-insensitive)."""
    method = method.upper()
    if method in ("RW", "RW+"):
        return fit_rw_isr(inputs, method, **kwargs)
    return fit_pseudo_isr(inputs, method, **kwargs)


def predict(surface: CalibratedSurface, risk, t) -> np.ndarray:
    """Calibrated survival at (risk, t); see ``CalibratedSurface.predict``."""
    return surface.predict(risk, t)
