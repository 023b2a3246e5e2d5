"""Order-restricted least squares: weighted 1D PAVA and 2D doubly monotone
projection by Dykstra's alternating projections.

The kernels come from the compiled ``_core`` extension when it is importable,
otherwise from ``_pyfallback``. Set ``ISOCAL_PURE_PYTHON=1`` to force the
fallback.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

if os.environ.get("ISOCAL_PURE_PYTHON"):
    from . import _pyfallback as _kernels

    BACKEND = "python"
else:
    try:
        from . import _core as _kernels

        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _pyfallback as _kernels

        BACKEND = "python"


class DegenerateProblemError(ValueError):
    """Isotonic problem with no positive weight."""


class ConvergenceError(RuntimeError):
    """Dykstra iterations hit ``max_iter`` before the change norm fell below ``tol``."""

    def __init__(self, message, last_iterate, change_norm, iterations):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.change_norm = change_norm
        self.iterations = iterations


@dataclass(frozen=True)
class IsotonicProblem1D:
    targets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        y = np.ascontiguousarray(self.targets, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if y.ndim != 1 or w.shape != y.shape:
            raise ValueError("targets and weights must be 1D arrays of equal length")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(w)):
            raise ValueError("targets and weights must be finite")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if y.size and not np.any(w > 0):
            raise DegenerateProblemError("at least one weight must be positive")
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "weights", w)


@dataclass
class DykstraState:
    """Iterate and residuals of the alternating projection.

    ``S = target - eps_risk - eps_time`` at every cycle boundary.
    """

    S: np.ndarray
    eps_time: np.ndarray
    eps_risk: np.ndarray
    iterations: int = 0
    change_norm: float = np.inf


def pava_nonincreasing(targets, weights=None) -> np.ndarray:
    """Weighted least-squares non-increasing fit.

    Pooled blocks take the weighted mean of their targets. Zero-weight entries
    sit in the block to their left (the first block if they lead) and do not
    move its value.

    Parameters
    ----------
    targets : array_like, shape (m,)
    weights : array_like, shape (m,), optional
        Nonnegative; defaults to ones.

    Returns
    -------
    numpy.ndarray, shape (m,)
    """
    if isinstance(targets, IsotonicProblem1D):
        problem = targets
    else:
        y = np.asarray(targets, dtype=np.float64)
        w = np.ones_like(y) if weights is None else weights
        problem = IsotonicProblem1D(y, w)
    fit = _kernels.pava_weighted(problem.targets, problem.weights)
    if fit is None:  # pragma: no cover - guarded by IsotonicProblem1D
        raise DegenerateProblemError("all weights are zero")
    return fit


def pava_rows(a, weights=None) -> np.ndarray:
    """Non-increasing fit of every row of a 2D array. Returns a new array.

    ``weights`` may be None (unit), a 1D array shared by all rows, or an array
    shaped like ``a``.
    """
    out = np.array(a, dtype=np.float64, order="C", copy=True)
    if out.ndim != 2:
        raise ValueError("expected a 2D array")
    if weights is None:
        _kernels.pava_rows_inplace(out)
        return out
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w.reshape(1, -1)
    w = np.ascontiguousarray(w)
    if w.shape[1] != out.shape[1] or w.shape[0] not in (1, out.shape[0]):
        raise ValueError("weights do not match the array shape")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    bad = _kernels.pava_rows_weighted_inplace(out, w)
    if bad >= 0:
        raise DegenerateProblemError(f"row {bad} has no positive weight")
    return out


def enforce_doubly_monotone(a: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Running minimum down the risk axis, then along the time axis.

    The time pass keeps the risk ordering, so the result is exactly monotone
    in both directions. Used to remove sub-tolerance residue after Dykstra.
    """
    out = np.minimum.accumulate(a, axis=0, out=out)
    np.minimum.accumulate(out, axis=1, out=out)
    return out


def duplicate_column_runs(a: np.ndarray) -> np.ndarray:
    """Start index of each run of identical adjacent columns."""
    if a.shape[1] <= 1:
        return np.zeros(min(a.shape[1], 1), dtype=np.intp)
    same = np.ones(a.shape[1] - 1, dtype=bool)
    for r0 in range(0, a.shape[0], 256):
        block = a[r0:r0 + 256]
        same &= np.all(block[:, 1:] == block[:, :-1], axis=0)
    return np.flatnonzero(np.r_[True, ~same])


def project_doubly_monotone(matrix, tol: float = 1e-9, max_iter: int = 10_000,
                           return_state: bool = False, overwrite_input: bool = False,
                           merge_columns: bool = True, check_every: int = 1):
    """Euclidean projection onto matrices non-increasing down columns and along rows.

    Rows are subjects sorted by non-decreasing risk, columns are increasing
    grid times. Each Dykstra cycle projects the columns (risk direction) and
    then the rows (time direction); iteration stops once the Frobenius norm of
    the change across a cycle drops below ``tol``. A final running-minimum pass
    makes both orderings exact.

    Runs of identical adjacent columns have identical columns in the
    projection, so with ``merge_columns`` each run is solved as one column
    carrying its multiplicity as weight (same iterates, same stopping norm)
    and expanded afterwards.

    ``check_every > 1`` measures the change only on every ``check_every``-th
    cycle, which skips forming the iterate on the other cycles; the stopping
    rule is unchanged but may fire up to ``check_every - 1`` cycles late.

    With ``overwrite_input`` a C-contiguous float64 ``matrix`` may be reused
    as output storage.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` cycles run without meeting ``tol``.
    """
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("expected a 2D array")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix must be finite")
    starts = duplicate_column_runs(M) if merge_columns else None
    weighted = starts is not None and starts.size < M.shape[1]
    if weighted:
        colw = np.diff(np.r_[starts, M.shape[1]]).astype(np.float64)
        Y = np.ascontiguousarray(M[:, starts])
    else:
        colw = None
        Y = np.ascontiguousarray(M)
    if check_every < 1:
        raise ValueError("check_every must be >= 1")
    P = np.zeros_like(Y)
    Q = np.zeros_like(Y)
    X_prev = None
    iterations = 0
    change = np.inf
    while iterations < max_iter:
        track = (iterations + 1) % check_every == 0 or iterations + 1 == max_iter
        if track:
            if X_prev is None:
                X_prev = np.empty_like(Y)
            np.subtract(Y, P, out=X_prev)
            X_prev -= Q
        change_sq = _kernels.dykstra_cycle(Y, P, Q, colw, X_prev if track else None)
        iterations += 1
        if track:
            change = float(np.sqrt(change_sq))
            if change < tol:
                break
    else:
        X = Y - P - Q
        raise ConvergenceError(
            f"Dykstra projection did not converge in {max_iter} iterations "
            f"(last change {change:.3e})",
            last_iterate=X,
            change_norm=change,
            iterations=iterations,
        )
    logger.debug("dykstra converged: %d iterations, change %.3e, %d of %d columns",
                 iterations, change, Y.shape[1], M.shape[1])
    X = X_prev if X_prev is not None else np.empty_like(Y)
    np.subtract(Y, P, out=X)
    X -= Q
    enforce_doubly_monotone(X, out=X)
    state = DykstraState(S=X, eps_time=Q, eps_risk=P, iterations=iterations, change_norm=change)
    if weighted:
        if overwrite_input and M is matrix and M.flags.c_contiguous and M.flags.writeable:
            out = M
        else:
            out = np.empty(M.shape)
        reps = colw.astype(np.intp)
        for r0 in range(0, M.shape[0], 256):
            out[r0:r0 + 256] = np.repeat(X[r0:r0 + 256], reps, axis=1)
    else:
        out = X
    if return_state:
        return out, state
    return out
