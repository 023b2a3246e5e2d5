"""Seeded generators for the six synthetic log-normal survival settings.

Event times are log-normal with setting-specific ``mu(x)`` and ``sigma(x)``
(``sigma`` is the standard deviation of ``log T``); covariates are uniform
on ``[0, 4]^p``. Randomness comes from numpy's PCG64 generator. The seed is
expanded with ``SeedSequence(seed).spawn(3)`` into one stream each for the
covariates, the event times and the censoring times, drawn in that order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .data import SurvivalDataset, ParseError, _fmt

SETTINGS = (1, 2, 3, 4, 5, 6)
DEFAULT_SPLIT = (2500, 2500, 5000)


class InvalidSettingError(ValueError):
    pass


def _check(setting):
    if setting not in SETTINGS:
        raise InvalidSettingError(f"setting must be one of 1..6, got {setting!r}")


def n_covariates(setting: int) -> int:
    _check(setting)
    return 1 if setting <= 4 else 10


def event_params(setting: int, x) -> tuple[np.ndarray, np.ndarray]:
    """``(mu(x), sigma(x))`` of ``log T`` for rows of ``x`` (n x p, or length-n for p=1)."""
    _check(setting)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 and setting <= 4:
        x = x[:, None]
    if x.ndim == 1:
        x = x[None, :]
    if setting == 1:
        mu = 0.632 * x[:, 0]
        sigma = np.full(mu.shape, 2.0)
    elif setting in (2, 3, 4):
        x0 = x[:, 0]
        high, slope = {2: (3.0, 1.0), 3: (2.0, 1.0), 4: (3.0, 1.5)}[setting]
        mu = np.where(x0 > 2, high, slope * x0)
        sigma = np.full(mu.shape, 0.5)
    else:
        mu = 0.126 * (x[:, 0] + np.sqrt(x[:, 2] * x[:, 4])) + 1.0
        sigma = np.ones(mu.shape) if setting == 5 else (x[:, 1] + 2.0) / 4.0
    return mu, sigma


def censoring_survival(setting: int, x, t) -> np.ndarray:
    """True censoring survival ``P(C > t | x)``; broadcasts ``t`` against rows of ``x``."""
    _check(setting)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 and setting <= 4:
        x = x[:, None]
    t = np.asarray(t, dtype=np.float64)
    if setting in (1, 2):
        rate = np.full(x.shape[0], 0.1)
    elif setting == 3:
        rate = 0.25 + (6.0 + x[:, 0]) / 100.0
    elif setting == 4:
        m = 2.0 + (2.0 - x[:, 0]) / 50.0
        return _lognormal_sf(t, _col(m, t), 0.5)
    else:
        rate = x[:, 9] / 10.0 + 1.0 / 20.0
    return np.exp(-_col(rate, t) * t)


def _col(v, t):
    # per-row parameter shaped to broadcast against t of shape (n,) or (n, K)
    return v if t.ndim <= 1 else v[:, None]


def _lognormal_sf(t, mu, sigma):
    t = np.asarray(t, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = (np.log(t) - mu) / sigma
    return ndtr(-z)


def oracle_survival(setting: int, x, t) -> np.ndarray:
    """True ``S0(t | x) = 1 - Phi((log t - mu(x)) / sigma(x))``.

    ``t`` may be shape (n,) (one time per row) or (n, K).
    """
    mu, sigma = event_params(setting, x)
    t = np.asarray(t, dtype=np.float64)
    return _lognormal_sf(t, _col(mu, t), _col(sigma, t))


def _draw_censoring(setting, x, rng):
    n = x.shape[0]
    if setting in (1, 2):
        return rng.exponential(1.0 / 0.1, size=n)
    if setting == 3:
        return rng.exponential(1.0 / (0.25 + (6.0 + x[:, 0]) / 100.0))
    if setting == 4:
        return np.exp(2.0 + (2.0 - x[:, 0]) / 50.0 + 0.5 * rng.standard_normal(n))
    return rng.exponential(1.0 / (x[:, 9] / 10.0 + 1.0 / 20.0))


@dataclass(frozen=True)
class SyntheticSample:
    """A simulated dataset plus the latent quantities behind it."""

    setting: int
    data: SurvivalDataset
    true_time: np.ndarray
    censor_time: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def subset(self, index) -> "SyntheticSample":
        return SyntheticSample(self.setting, self.data.subset(index), self.true_time[index],
                               self.censor_time[index], self.mu[index], self.sigma[index])

    def split(self, sizes=DEFAULT_SPLIT) -> tuple["SyntheticSample", ...]:
        """Consecutive row blocks of the given sizes (train, calibration, test)."""
        if sum(sizes) != self.data.n:
            raise ValueError(f"split sizes {sizes} do not add up to n={self.data.n}")
        bounds = np.cumsum((0,) + tuple(sizes))
        return tuple(self.subset(np.arange(a, b)) for a, b in zip(bounds[:-1], bounds[1:]))


def generate(setting: int, n: int, seed: int) -> SyntheticSample:
    """Draw ``n`` subjects from a setting, deterministically in ``seed``."""
    _check(setting)
    if n < 1:
        raise ValueError("n must be >= 1")
    cov_ss, time_ss, cens_ss = np.random.SeedSequence(seed).spawn(3)
    p = n_covariates(setting)
    x = np.random.Generator(np.random.PCG64(cov_ss)).uniform(0.0, 4.0, size=(n, p))
    mu, sigma = event_params(setting, x)
    z = np.random.Generator(np.random.PCG64(time_ss)).standard_normal(n)
    T = np.exp(mu + sigma * z)
    C = _draw_censoring(setting, x, np.random.Generator(np.random.PCG64(cens_ss)))
    Y = np.minimum(T, C)
    data = SurvivalDataset(Y, T <= C, [str(i) for i in range(n)], x)
    return SyntheticSample(setting, data, T, C, mu, sigma)


def save_truths(sample: SyntheticSample, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "true_time", "censor_time", "mu", "sigma"])
        for i in range(sample.data.n):
            w.writerow([sample.data.subject_id[i], _fmt(sample.true_time[i]),
                        _fmt(sample.censor_time[i]), _fmt(sample.mu[i]), _fmt(sample.sigma[i])])


def load_truths(path) -> dict:
    """Read a truths CSV into ``{"id": ..., "true_time": ..., ...}`` arrays."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"id", "true_time"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ParseError("truths CSV needs at least id,true_time", 1)
        rows = list(reader)
    out = {"id": np.array([r["id"].strip() for r in rows], dtype=object)}
    for key in ("true_time", "censor_time", "mu", "sigma"):
        if key in reader.fieldnames:
            try:
                out[key] = np.array([float(r[key]) for r in rows])
            except ValueError as exc:
                raise ParseError(f"truths column {key!r}: {exc}") from None
    return out
