"""Linear Cox proportional-hazards fits with Breslow ties and baseline."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import (
    DEFAULT_CLIP_FLOOR,
    RiskScores,
    StepCumulativeHazard,
    SurvivalDataset,
    SurvivalProbabilityGrid,
    TimeGrid,
    ParseError,
    ValidationError,
)

logger = logging.getLogger(__name__)

SEPARATION_BOUND = 50.0
_LL_ROUNDING = 1e-13


class CoxFitError(RuntimeError):
    """Base class for Cox fitting failures."""


class NoEventsError(CoxFitError, ValueError):
    """The data contain no events to fit."""


class SeparationError(CoxFitError):
    """Coefficients diverge; the partial likelihood has no finite maximizer."""


class CoxConvergenceError(CoxFitError):
    def __init__(self, message, last_iterate, grad_norm):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class CoxConfig:
    max_iter: int = 100
    tol: float = 1e-8
    ridge: float = 0.0

    def __post_init__(self):
        if self.max_iter < 1 or self.tol <= 0 or self.ridge < 0:
            raise ValueError("need max_iter >= 1, tol > 0, ridge >= 0")


@dataclass(frozen=True)
class CoxModel:
    coefficients: np.ndarray
    baseline: StepCumulativeHazard
    loglik: float
    iterations: int
    grad_norm: float
    std_errors: np.ndarray = None
    ridge: float = 0.0
    role: str = "event"
    loglik_trace: tuple = field(default=(), compare=False)

    def risk(self, covariates) -> np.ndarray:
        x = np.asarray(covariates, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if self.coefficients.size == 1 else x.reshape(1, -1)
        if x.shape[1] != self.coefficients.size:
            raise ValidationError(
                f"model has {self.coefficients.size} coefficients, data has {x.shape[1]} covariates")
        return x @ self.coefficients

    def risk_scores(self, data: SurvivalDataset) -> RiskScores:
        if data.covariates is None:
            raise ValidationError("dataset has no covariates")
        return RiskScores(data.subject_id, self.risk(data.covariates))

    def to_dict(self) -> dict:
        return {
            "coef": self.coefficients.tolist(),
            "baseline_times": self.baseline.jump_times.tolist(),
            "baseline_increments": self.baseline.increments.tolist(),
            "role": self.role,
            "ridge": self.ridge,
            "loglik": self.loglik,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "std_errors": None if self.std_errors is None else self.std_errors.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CoxModel":
        for key in ("coef", "baseline_times", "baseline_increments"):
            if key not in doc:
                raise ParseError(f"model JSON lacks {key!r}")
        se = doc.get("std_errors")
        return cls(
            coefficients=np.asarray(doc["coef"], dtype=np.float64),
            baseline=StepCumulativeHazard(doc["baseline_times"], doc["baseline_increments"]),
            loglik=float(doc.get("loglik", np.nan)),
            iterations=int(doc.get("iterations", 0)),
            grad_norm=float(doc.get("grad_norm", np.nan)),
            std_errors=None if se is None else np.asarray(se, dtype=np.float64),
            ridge=float(doc.get("ridge", 0.0)),
            role=doc.get("role", "event"),
        )


def save_model(model: CoxModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, separators=(",", ":"))


def load_model(path) -> CoxModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    return CoxModel.from_dict(doc)


class _RiskSetSums:
    """Breslow partial likelihood pieces for a fixed dataset."""

    def __init__(self, x, time, event):
        order = np.argsort(-time, kind="stable")  # descending time
        self.x = x[order]
        t = time[order]
        self.event = event[order]
        # last index (in descending order) of each tie group = full risk set size
        ends = np.flatnonzero(np.r_[t[1:] != t[:-1], True])
        group = np.r_[0, np.cumsum(t[1:] != t[:-1])]
        last = ends[group]
        self.risk_end = last[self.event]
        self.x_event_sum = self.x[self.event].sum(axis=0)
        self.n_events = int(self.event.sum())

    def evaluate(self, theta, ridge, need_hessian=True):
        eta = self.x @ theta
        shift = eta.max()
        w = np.exp(eta - shift)
        r0 = np.cumsum(w)[self.risk_end]
        wx = w[:, None] * self.x
        r1 = np.cumsum(wx, axis=0)[self.risk_end]
        loglik = float(eta[self.event].sum() - np.sum(np.log(r0) + shift) - ridge * theta @ theta)
        xbar = r1 / r0[:, None]
        grad = self.x_event_sum - xbar.sum(axis=0) - 2.0 * ridge * theta
        if not need_hessian:
            return loglik, grad, None
        p = theta.size
        outer = (wx[:, :, None] * self.x[:, None, :]).reshape(-1, p * p)
        r2 = np.cumsum(outer, axis=0)[self.risk_end].reshape(-1, p, p)
        info = (r2 / r0[:, None, None]).sum(axis=0) - xbar.T @ xbar
        hess = -info - 2.0 * ridge * np.eye(p)
        return loglik, grad, hess


def _newton(sums: _RiskSetSums, p: int, config: CoxConfig):
    theta = np.zeros(p)
    loglik, grad, hess = sums.evaluate(theta, config.ridge)
    trace = [loglik]
    it = 0
    gnorm = float(np.max(np.abs(grad)))
    while gnorm >= config.tol:
        if it >= config.max_iter:
            raise CoxConvergenceError(
                f"Newton did not converge in {config.max_iter} iterations "
                f"(gradient norm {gnorm:.3e})", theta, gnorm)
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise CoxFitError("singular information matrix; a covariate may be constant "
                              "over all risk sets, use ridge > 0") from None
        scale = 1.0
        for _ in range(60):
            cand = theta + scale * step
            ll_c, g_c, h_c = sums.evaluate(cand, config.ridge)
            if np.isfinite(ll_c) and ll_c >= loglik:
                break
            # near the optimum the two values differ only by rounding; a smaller
            # gradient is then the better signal
            if (abs(ll_c - loglik) <= _LL_ROUNDING * (1.0 + abs(loglik))
                    and np.max(np.abs(g_c)) < gnorm):
                break
            scale *= 0.5
        else:
            # no ascent possible at machine precision; accept current point
            logger.debug("step halving exhausted at gradient norm %.3e", gnorm)
            if gnorm < 1e3 * config.tol:
                break
            raise CoxConvergenceError(
                f"line search failed (gradient norm {gnorm:.3e})", theta, gnorm)
        theta, loglik, grad, hess = cand, ll_c, g_c, h_c
        trace.append(loglik)
        it += 1
        gnorm = float(np.max(np.abs(grad)))
        if np.max(np.abs(theta)) > SEPARATION_BOUND:
            raise SeparationError(
                f"coefficient magnitude exceeds {SEPARATION_BOUND:g}; the data look "
                "separable, refit with ridge > 0")
    return theta, loglik, hess, it, gnorm, tuple(trace)


def fit_cox(data: SurvivalDataset, config: CoxConfig | None = None, role: str = "event") -> CoxModel:
    """Maximize the Breslow partial likelihood by Newton-Raphson.

    Parameters
    ----------
    data : SurvivalDataset
        Must carry covariates and at least one event.
    config : CoxConfig, optional
        ``max_iter`` (100), gradient infinity-norm ``tol`` (1e-8) and ridge
        penalty ``ridge * ||theta||^2`` (0).

    Raises
    ------
    NoEventsError, SeparationError, CoxConvergenceError
    """
    config = config or CoxConfig()
    if data.covariates is None:
        raise ValidationError("Cox fit needs covariates")
    if not data.event.any():
        raise NoEventsError("no observed events: the model cannot be fit")
    x = data.covariates
    sums = _RiskSetSums(x, data.observed_time, data.event)
    theta, loglik, hess, it, gnorm, trace = _newton(sums, x.shape[1], config)
    try:
        se = np.sqrt(np.diag(np.linalg.inv(-hess)))
    except np.linalg.LinAlgError:
        se = np.full(theta.size, np.nan)
    risks = RiskScores(data.subject_id, x @ theta)
    baseline = breslow_baseline(data, risks)
    logger.debug("cox fit (%s): %d iterations, loglik %.6f", role, it, loglik)
    return CoxModel(theta, baseline, loglik, it, gnorm, se, config.ridge, role, trace)


def fit_censoring(data: SurvivalDataset, config: CoxConfig | None = None) -> CoxModel:
    """Cox model for the censoring time: same fit with the event indicator flipped."""
    return fit_cox(data.with_complemented_events(), config, role="censoring")


def breslow_baseline(data: SurvivalDataset, risks: RiskScores) -> StepCumulativeHazard:
    """Breslow cumulative baseline hazard with tied event times pooled.

    The increment at each distinct event time is the number of events there
    divided by the sum of ``exp(risk)`` over subjects still at risk.
    """
    r = risks.aligned_to(data.subject_id)
    time, event = data.observed_time, data.event
    if not event.any():
        return StepCumulativeHazard(np.empty(0), np.empty(0))
    shift = r.max()
    w = np.exp(r - shift)
    order = np.argsort(time, kind="stable")
    t_sorted = time[order]
    # at-risk sum for time s = sum of w over Y >= s
    tail = np.cumsum(w[order][::-1])[::-1]
    ev_times, d = np.unique(time[event], return_counts=True)
    first = np.searchsorted(t_sorted, ev_times, side="left")
    inc = d / tail[first] * np.exp(-shift)
    pos = ev_times > 0
    if not pos.all():
        # events at time zero have no positive jump time; fold them into the first jump
        extra = inc[~pos].sum()
        ev_times, inc = ev_times[pos], inc[pos]
        if inc.size:
            inc = inc.copy()
            inc[0] += extra
    return StepCumulativeHazard(ev_times, inc)


def predict_survival(model: CoxModel, risk, grid: TimeGrid,
                     clip_floor: float = DEFAULT_CLIP_FLOOR) -> np.ndarray:
    """Survival ``exp(-Lambda0(t) * exp(risk))`` on ``grid``, clipped below at ``clip_floor``.

    Returns shape (K,) for a scalar risk and (n, K) for an array of risks.
    """
    r = np.asarray(risk, dtype=np.float64)
    cum = model.baseline(grid.times)
    out = np.exp(-np.multiply.outer(np.exp(r), cum))
    np.maximum(out, clip_floor, out=out)
    return out


def survival_grid(model: CoxModel, data: SurvivalDataset, grid: TimeGrid,
                  clip_floor: float = DEFAULT_CLIP_FLOOR, risk=None) -> SurvivalProbabilityGrid:
    """Probability grid for every subject of ``data``; role follows the model."""
    r = model.risk(data.covariates) if risk is None else risk
    probs = predict_survival(model, r, grid, clip_floor)
    return SurvivalProbabilityGrid(grid, probs, role=model.role if model.role == "censoring"
                                   else "survival", subject_id=data.subject_id,
                                   clip_floor=clip_floor)
