"""Isotonic recalibration of right-censored survival predictions.

Submodules
----------
data       datasets, grids, surfaces and their file formats
coxfit     linear Cox models with Breslow baseline
isotonic   PAVA and doubly monotone projection kernels
calibrate  RW, RW+, HT, HT+ and DR isotonic calibrators
metrics    C-index, AUPIT, IPCW quantile score, integrated Brier score
simgen     seeded synthetic log-normal settings
pipeline   per-seed experiment runner
cli        command line entry point (``isocal``)
"""

from .calibrate import (
    CalibrationInputs,
    build_time_grid,
    dr_pseudo_outcomes,
    fit_pseudo_isr,
    fit_rw_isr,
    fit_surface,
    ht_plus_pseudo_outcomes,
    ht_pseudo_outcomes,
    predict,
    rw_plus_weights,
    rw_weights,
)
from .coxfit import CoxConfig, CoxModel, breslow_baseline, fit_censoring, fit_cox, predict_survival
from .data import (
    CalibratedSurface,
    PseudoOutcomeMatrix,
    RiskScores,
    StepCumulativeHazard,
    SurvivalDataset,
    SurvivalProbabilityGrid,
    TimeGrid,
    load_dataset,
    load_surface,
    save_dataset,
    save_surface,
)
from .isotonic import BACKEND, pava_nonincreasing, project_doubly_monotone

__version__ = "0.1.0"

__all__ = [
    "CalibrationInputs",
    "build_time_grid",
    "dr_pseudo_outcomes",
    "fit_pseudo_isr",
    "fit_rw_isr",
    "fit_surface",
    "ht_plus_pseudo_outcomes",
    "ht_pseudo_outcomes",
    "predict",
    "rw_plus_weights",
    "rw_weights",
    "CoxConfig",
    "CoxModel",
    "breslow_baseline",
    "fit_censoring",
    "fit_cox",
    "predict_survival",
    "CalibratedSurface",
    "PseudoOutcomeMatrix",
    "RiskScores",
    "StepCumulativeHazard",
    "SurvivalDataset",
    "SurvivalProbabilityGrid",
    "TimeGrid",
    "load_dataset",
    "load_surface",
    "save_dataset",
    "save_surface",
    "BACKEND",
    "pava_nonincreasing",
    "project_doubly_monotone",
]
