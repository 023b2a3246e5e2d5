"""Setting 2 over 100 seeds: published-scale checks on the quantile score,
AUPIT and IBS of the DR-calibrated surface against uncalibrated Cox."""

import numpy as np
import pytest

from isocal.pipeline import ExperimentConfig, run_seed

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def setting2_100():
    cfg = ExperimentConfig(setting=2, seeds=tuple(range(100)), estimators=("cox", "dr"),
                           modes=("oracle",), taus=(0.5,))
    out = {}
    for seed in cfg.seeds:
        for r in run_seed(cfg, seed):
            out.setdefault(r.method, []).append(r)
    return out


def test_dr_median_quantile_score(setting2_100):
    scores = np.array([r.quantile_scores[0.5][0] for r in setting2_100["dr"]])
    assert abs(scores.mean() - 2.10) <= 0.30, scores.mean()


def test_dr_improves_aupit_and_ibs(setting2_100):
    for metric in ("aupit", "ibs"):
        dr = np.mean([getattr(r, metric) for r in setting2_100["dr"]])
        cox = np.mean([getattr(r, metric) for r in setting2_100["cox"]])
        assert dr < cox, (metric, dr, cox)
