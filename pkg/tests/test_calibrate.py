import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isocal.calibrate import (
    CalibrationInputs,
    GridAlignmentError,
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
from isocal.data import (
    PseudoOutcomeMatrix,
    RiskScores,
    SurvivalDataset,
    SurvivalProbabilityGrid,
    TimeGrid,
    ValidationError,
)
from isocal.isotonic import DegenerateProblemError, pava_nonincreasing, pava_rows
from isocal.pipeline import ExperimentConfig, run_seed
from isocal.simgen import censoring_survival, generate, oracle_survival

from _oracles import qp_projection


def const_grid(grid, n, value, role):
    return SurvivalProbabilityGrid(grid, np.full((n, grid.K), value), role)


def inputs_for(times, events, risks, grid, S=1.0, G=1.0):
    d = SurvivalDataset(times, events)
    n = d.n
    S_hat = S if isinstance(S, SurvivalProbabilityGrid) else const_grid(grid, n, S, "survival")
    G_hat = G if isinstance(G, SurvivalProbabilityGrid) else const_grid(grid, n, G, "censoring")
    return CalibrationInputs(d, RiskScores(d.subject_id, risks), G_hat, S_hat, grid)


def true_nuisance_inputs(sample, grid):
    x = sample.data.covariates
    n = sample.data.n
    tt = np.broadcast_to(grid.times, (n, grid.K))
    S = SurvivalProbabilityGrid.from_values(grid, oracle_survival(sample.setting, x, tt))
    G = SurvivalProbabilityGrid.from_values(grid, censoring_survival(sample.setting, x, tt),
                                            role="censoring")
    # higher x means longer survival, so the risk score is -x
    risks = RiskScores(sample.data.subject_id, -x[:, 0])
    return CalibrationInputs(sample.data, risks, G, S, grid)


# ---------------------------------------------------------------- grid

def test_build_time_grid_examples():
    cal = SurvivalDataset([1.0, 2.0], [1, 1])
    train = SurvivalDataset([1.5], [0])
    np.testing.assert_array_equal(build_time_grid(train, cal, 4).times, [0.5, 1.0, 1.5, 2.0])
    train = SurvivalDataset([0.3, 0.0], [0, 1])
    np.testing.assert_array_equal(build_time_grid(train, cal, 1).times, [0.3, 1.0, 2.0])
    with pytest.raises(ValueError):
        build_time_grid(train, SurvivalDataset([0.0], [1]), 10)


def test_setting2_grid_size():
    train, cal, _ = generate(2, 10_000, 0).split()
    grid = build_time_grid(train.data, cal.data)
    t_max = cal.data.observed_time.max()
    lattice = np.arange(1, 10_001) * (t_max / 10_000)
    lattice[-1] = t_max
    observed = np.unique(np.concatenate([train.data.observed_time, cal.data.observed_time]))
    assert grid.K == 10_000 + np.setdiff1d(observed, lattice).size


# ---------------------------------------------------------------- weights

def test_rw_weights():
    grid = TimeGrid([1.0, 2.0, 3.0])
    d = SurvivalDataset([1.0, 2.0, 3.0], [0, 1, 1])
    G = SurvivalProbabilityGrid(grid, [[1.0, 1.0, 1.0], [0.9, 0.5, 0.5], [0.5, 1e-6, 1e-6]],
                                "censoring")
    np.testing.assert_allclose(rw_weights(d, G), [0.0, 2.0, 1e4])


def test_rw_plus_weights():
    grid = TimeGrid([1.0, 2.0, 3.0])
    d = SurvivalDataset([3.0, 1.0, 1.0], [0, 0, 1])
    G = SurvivalProbabilityGrid(grid, [[0.9, 0.8, 0.7], [0.5, 0.5, 0.5], [0.25, 0.2, 0.2]],
                                "censoring")
    np.testing.assert_allclose(rw_plus_weights(d, G, 2.0), [1.25, 0.0, 4.0])
    both = rw_plus_weights(d, G, np.array([0.5, 2.0]))
    np.testing.assert_allclose(both, [[1.0, 1.0, 1.0], [1.25, 0.0, 4.0]])


# ---------------------------------------------------------------- pseudo-outcomes

def dr_by_loops(S, G, Y, delta, times):
    """Direct transcription of the doubly robust sum, one subject at a time."""
    K, n = times.size, Y.size
    out = np.empty((K, n))
    for j in range(n):
        prev = 1.0
        total = 0.0
        for k in range(K):
            dlam = 1.0 - S[j, k] / prev
            prev = S[j, k]
            dM = (1.0 if (Y[j] == times[k] and delta[j]) else 0.0) - (Y[j] > times[k]) * dlam
            total += dM / (S[j, k] * G[j, k])
            out[k, j] = S[j, k] * (1.0 - total)
    return out


def test_dr_matches_loop_transcription():
    rng = np.random.default_rng(0)
    n, times = 12, np.sort(rng.uniform(0.1, 5.0, size=15))
    Y = rng.choice(times, size=n)
    delta = rng.uniform(size=n) < 0.6
    S = np.minimum.accumulate(rng.uniform(0.2, 1.0, size=(n, 15)), axis=1)
    G = np.minimum.accumulate(rng.uniform(0.3, 1.0, size=(n, 15)), axis=1)
    grid = TimeGrid(times)
    inp = inputs_for(Y, delta, rng.normal(size=n), grid,
                     SurvivalProbabilityGrid(grid, S), SurvivalProbabilityGrid(grid, G, "censoring"))
    np.testing.assert_allclose(dr_pseudo_outcomes(inp).values, dr_by_loops(S, G, Y, delta, times),
                               rtol=1e-12, atol=1e-12)
    # chunking does not matter
    np.testing.assert_array_equal(dr_pseudo_outcomes(inp, chunk=5).values,
                                  dr_pseudo_outcomes(inp).values)


def test_dr_trivial_cases():
    grid = TimeGrid([1.0, 2.0, 3.0])
    inp = inputs_for([3.0, 2.0, 2.0], [0, 1, 0], [0.0, 1.0, 2.0], grid)
    V = dr_pseudo_outcomes(inp).values
    # S = 1 means no hazard: survivors keep 1, an event at t_k drops to 0 from t_k on
    np.testing.assert_array_equal(V[:, 0], [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(V[:, 1], [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(V[:, 2], [1.0, 1.0, 1.0])


def test_dr_alignment_and_snapping():
    grid = TimeGrid([1.0, 2.0, 3.0])
    inp = inputs_for([1.5, 3.0], [1, 0], [0.0, 1.0], grid)
    with pytest.raises(GridAlignmentError):
        dr_pseudo_outcomes(inp)
    snapped = dr_pseudo_outcomes(inp, snap_to_grid=True).values
    ref = dr_pseudo_outcomes(inputs_for([2.0, 3.0], [1, 0], [0.0, 1.0], grid)).values
    np.testing.assert_array_equal(snapped, ref)
    no_s = CalibrationInputs(inp.cal_data, inp.cal_risks, inp.G_hat)
    with pytest.raises(ValidationError):
        dr_pseudo_outcomes(no_s)


def test_ht_pseudo_outcomes():
    grid = TimeGrid([3.0, 5.0, 6.0])
    G = SurvivalProbabilityGrid(grid, [[0.5, 0.5, 0.5], [0.9, 0.8, 0.7]], "censoring")
    inp = inputs_for([4.0, 5.0], [0, 1], [0.0, 1.0], grid, G=G)
    np.testing.assert_array_equal(ht_pseudo_outcomes(inp).values[:, 0], 0.0)
    np.testing.assert_allclose(ht_pseudo_outcomes(inp).values[:, 1], [1.25, 0.0, 0.0])
    np.testing.assert_allclose(ht_plus_pseudo_outcomes(inp).values[:, 0], [2.0, 0.0, 0.0])


# ---------------------------------------------------------------- RW

def test_rw_hand_pava_without_censoring():
    grid = TimeGrid([1.0, 1.5, 2.0, 3.0])
    # risks order the subjects as (Y=1, Y=3, Y=2) from low to high risk
    inp = inputs_for([1.0, 2.0, 3.0], [1, 1, 1], [0.0, 2.0, 1.0], grid)
    surf = fit_rw_isr(inp)
    np.testing.assert_allclose(surf.surface[:, 1], pava_nonincreasing([0.0, 1.0, 1.0]))
    np.testing.assert_allclose(surf.surface[:, 1], [2 / 3, 2 / 3, 2 / 3])


def test_rw_single_subject():
    grid = TimeGrid([1.0, 2.0, 3.0])
    surf = fit_rw_isr(inputs_for([2.0], [1], [0.0], grid))
    np.testing.assert_array_equal(surf.surface, [[1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(predict(surf, 0.0, [1.0, 2.0, 3.0]), [1.0, 0.0, 0.0])


def test_rw_needs_an_event():
    grid = TimeGrid([1.0, 2.0])
    with pytest.raises(DegenerateProblemError):
        fit_rw_isr(inputs_for([1.0, 2.0], [0, 0], [0.0, 1.0], grid))
    with pytest.raises(DegenerateProblemError):
        fit_rw_isr(inputs_for([1.0, 2.0], [0, 0], [0.0, 1.0], grid), "RW+")


# ---------------------------------------------------------------- projections

def test_valid_pseudo_outcomes_are_a_fixed_point():
    grid = TimeGrid([1.0, 2.0, 3.0])
    inp = inputs_for([1.0, 2.0, 3.0], [1, 1, 1], [0.0, 1.0, 2.0], grid)
    vals = np.array([[1.2, 0.8, 0.5], [0.9, 0.8, 0.2], [0.3, 0.1, -0.4]])  # K x n
    surf = fit_pseudo_isr(inp, "DR", pseudo=PseudoOutcomeMatrix(grid, vals, "DR"), tol=1e-12)
    np.testing.assert_allclose(surf.surface, np.clip(vals.T, 0, 1), atol=1e-12)


def test_two_subject_toy_matches_qp():
    grid = TimeGrid([1.0, 2.0])
    inp = inputs_for([1.0, 2.0], [1, 1], [0.0, 1.0], grid)
    vals = np.array([[1.0, 0.0], [0.0, 1.0]])
    surf = fit_pseudo_isr(inp, "DR", pseudo=PseudoOutcomeMatrix(grid, vals, "DR"), tol=1e-12)
    np.testing.assert_allclose(surf.surface, qp_projection(vals.T), atol=1e-6)
    with pytest.raises(ValueError):
        fit_pseudo_isr(inp, "HT", pseudo=PseudoOutcomeMatrix(grid, vals, "DR"))


@pytest.fixture(scope="module")
def setting2_seed0():
    cfg = ExperimentConfig(setting=2, estimators=("cox", "rw", "dr"))
    return run_seed(cfg, 0, keep=True)[1]


def test_setting2_rw_monotone_in_time_without_repair(setting2_seed0):
    art = setting2_seed0
    risk = art.event_model.risk(art.cal.data.covariates)
    order = np.argsort(risk, kind="stable")
    data = art.cal.data.subset(order)
    w = rw_weights(data, art.G_cal.rows_for(data.subject_id))
    targets = (data.observed_time[None, :] > art.grid.times[:, None]).astype(float)
    raw = pava_rows(targets, w)  # K x n, before any repair
    assert np.diff(raw, axis=0).max() <= 1e-12


def test_setting2_surfaces_are_valid(setting2_seed0):
    for surf in setting2_seed0.surfaces.values():
        S = surf.surface
        assert np.diff(S, axis=0).max() <= 1e-8 and np.diff(S, axis=1).max() <= 1e-8
        assert S.min() >= 0 and S.max() <= 1


def test_predict_rules(setting2_seed0):
    surf = setting2_seed0.surfaces["dr"]
    nodes = surf.node_table()
    r = np.unique(surf.sorted_risks)
    assert np.all(predict(surf, r[:50], 0.0) == 1.0)
    np.testing.assert_allclose(predict(surf, r[7], surf.grid.times[11]), nodes[7, 11], atol=1e-15)
    np.testing.assert_allclose(predict(surf, r[0] - 5.0, surf.grid.t_max), nodes[0, -1])
    np.testing.assert_allclose(predict(surf, r[-1], 10 * surf.grid.t_max), nodes[-1, -1])


def test_predict_monotone_on_random_pairs(setting2_seed0):
    surf = setting2_seed0.surfaces["dr"]
    rng = np.random.default_rng(0)
    lo, hi = surf.sorted_risks[0] - 0.5, surf.sorted_risks[-1] + 0.5
    r1, r2 = np.sort(rng.uniform(lo, hi, size=(2, 10_000)), axis=0)
    t = rng.uniform(0, 1.1 * surf.grid.t_max, size=10_000)
    assert np.all(predict(surf, r1, t) >= predict(surf, r2, t))
    t1, t2 = np.sort(rng.uniform(0, 1.1 * surf.grid.t_max, size=(2, 10_000)), axis=0)
    r = rng.uniform(lo, hi, size=10_000)
    assert np.all(predict(surf, r, t1) >= predict(surf, r, t2))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=30), st.integers(0, 2**31 - 1))
def test_rankings_refine_risk_order(risks, seed):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(np.arange(1.0, 9.0))
    n = 25
    inp = inputs_for(rng.integers(1, 9, size=n).astype(float), rng.uniform(size=n) < 0.7,
                     rng.normal(size=n), grid, S=0.5, G=0.8)
    risks = np.asarray(risks)
    for method in ("DR", "HT+"):
        surf = fit_surface(inp, method, tol=1e-10)
        for t in grid.times[1:-1]:
            p = predict(surf, risks, np.full(risks.size, t))
            hi = risks[:, None] > risks[None, :]
            assert np.all((p[:, None] <= p[None, :] + 1e-12) | ~hi)
            eq = risks[:, None] == risks[None, :]
            assert np.all((p[:, None] == p[None, :]) | ~eq)


# ---------------------------------------------------------------- consistency

def test_dr_sup_error_shrinks_with_calibration_size():
    # true nuisances on a coarse even grid with snapped observed times;
    # snapping up keeps 1[Y > t] exact at every grid time
    times = TimeGrid(np.linspace(0.25, 25.0, 100))
    check = np.searchsorted(times.times, [1.0, 3.0, 8.0])
    x_eval = np.linspace(0.5, 3.5, 61)
    truth = oracle_survival(1, x_eval[:, None], np.broadcast_to(times.times[check], (61, 3)))
    means = []
    for n_cal in (500, 5_000, 50_000):
        errs = []
        for seed in range(20):
            inp = true_nuisance_inputs(generate(1, n_cal, 1000 + seed), times)
            surf = fit_pseudo_isr(inp, "DR", snap_to_grid=True, tol=1e-4, check_every=5)
            pred = surf.predict_grid(-x_eval)[:, check]
            errs.append(np.abs(pred - truth).max())
        means.append(np.mean(errs))
    assert means[0] > means[1] > means[2], means
