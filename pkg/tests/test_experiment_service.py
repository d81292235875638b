import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from src.models.densities import (
    ExponentialDensity,
    GammaDensity,
    MixtureSpec,
    NormalDensity,
    PositiveTruncNormalDensity,
    UniformDensity,
    sample_mixture,
)
from src.models.schemas import (
    CvBandwidth,
    CvConfig,
    ExperimentSpec,
    FixedBandwidth,
    GridSpec,
    MmConfig,
    SilvermanBandwidth,
    SimulationFile,
    StopReason,
)
from src.services.bandwidth_service import candidate_bandwidths, silverman
from src.services.experiment_service import (
    ANC_SHIFT,
    ANC_SURROGATE,
    ExperimentService,
    aggregate,
    aggregate_table,
    generate_anc_surrogate,
    per_rep_table,
    rep_seed,
    spearman_trend,
)

FAST_MM = MmConfig(p_init=0.2, f_init=GammaDensity(alpha=4.0, beta=2.0), tol=1e-4, max_iters=300)


def _spec(mixture, **overrides):
    fields = dict(name="unit", mixture=mixture, n=150, reps=4, master_seed=42, bandwidth=FixedBandwidth(h=0.6), mm=FAST_MM)
    fields.update(overrides)
    return ExperimentSpec(**fields)


def test_rep_seeds_are_derived_deterministically():
    seeds = [rep_seed(42, rep) for rep in range(5)]
    assert seeds == [rep_seed(42, rep) for rep in range(5)]
    assert len(set(seeds)) == 5
    assert rep_seed(43, 0) != seeds[0]


def test_run_experiment_is_deterministic_across_workers(normal_gamma):
    spec = _spec(normal_gamma)
    serial = ExperimentService(max_workers=1).run_experiment(spec)
    parallel = ExperimentService(max_workers=3).run_experiment(spec)
    assert serial.rows == parallel.rows
    assert [row.rep for row in serial.rows] == [0, 1, 2, 3]
    assert serial.n_failed == 0


def test_aggregates_recompute_from_rows(normal_gamma):
    summary = ExperimentService(max_workers=2).run_experiment(_spec(normal_gamma))
    recomputed = aggregate(summary.rows, normal_gamma.p)
    for key, value in recomputed.items():
        assert getattr(summary, key) == value
    p_hat = np.array([row.p_hat for row in summary.rows])
    assert summary.mse_p == pytest.approx(float(np.mean((p_hat - 0.6) ** 2)), abs=1e-12)
    assert summary.p_sd == pytest.approx(float(np.std(p_hat, ddof=1)), abs=1e-12)
    assert all(row.ise is not None and row.ise >= 0 for row in summary.rows)
    assert all(row.stop_reason in (StopReason.CONVERGED, StopReason.MAX_ITERS) for row in summary.rows)


def test_single_rep_mse_is_squared_error(normal_gamma):
    summary = ExperimentService(max_workers=1).run_experiment(_spec(normal_gamma, reps=1))
    row = summary.rows[0]
    assert summary.mse_p == (row.p_hat - 0.6) ** 2
    assert summary.p_sd == 0.0
    assert summary.mu_sd == 0.0


def test_failed_reps_are_recorded_and_excluded(normal_gamma):
    """A bandwidth far below the grid step fails every replication"""
    spec = _spec(normal_gamma, reps=3, bandwidth=FixedBandwidth(h=1e-6))
    summary = ExperimentService(max_workers=2).run_experiment(spec)
    assert summary.n_failed == 3
    assert all(row.error for row in summary.rows)
    assert summary.mse_p is None
    assert summary.mise is None
    assert any("failed" in note for note in summary.notes)


def test_outputs_select_statistics(normal_gamma):
    summary = ExperimentService(max_workers=1).run_experiment(_spec(normal_gamma, reps=2, outputs=["p_hat"]))
    assert all(row.ise is None and row.mu_hat is None for row in summary.rows)
    assert summary.mise is None
    assert summary.mse_p is not None


def test_bandwidth_mode_is_noted(normal_gamma):
    summary = ExperimentService(max_workers=1).run_experiment(_spec(normal_gamma, reps=1, bandwidth=SilvermanBandwidth()))
    assert "bandwidth mode: silverman" in summary.notes
    data = sample_mixture(normal_gamma, 150, summary.rows[0].seed)
    assert summary.rows[0].h == silverman(data)


def test_all_known_sample_gives_small_p():
    """p = 0 with disjoint supports: the unknown component never gains weight"""
    mixture = MixtureSpec(p=0.0, known=UniformDensity(a=0.0, b=1.0), unknown=UniformDensity(a=5.0, b=6.0))
    mm = MmConfig(p_init=0.3, f_init=NormalDensity(mu=6.0, sigma=1.0), grid=GridSpec(lo=-2.0, hi=10.0, n_points=1024), tol=1e-5)
    spec = _spec(mixture, n=200, reps=3, bandwidth=SilvermanBandwidth(), mm=mm)
    summary = ExperimentService(max_workers=1).run_experiment(spec)
    assert summary.n_failed == 0
    assert summary.p_mean < 0.05


def test_cv_bandwidth_mode(normal_gamma):
    cv = CvConfig(folds=4, half_range=0.1, grid_steps=1, warmup=2)
    spec = _spec(normal_gamma, n=120, reps=2, bandwidth=CvBandwidth(cv=cv))
    summary = ExperimentService(max_workers=2).run_experiment(spec)
    assert summary.n_failed == 0
    for row in summary.rows:
        data = sample_mixture(normal_gamma, 120, row.seed)
        assert np.any(np.isclose(candidate_bandwidths(silverman(data), cv), row.h, rtol=0, atol=1e-15))


def test_mse_curve_singleton_matches_run_experiment(normal_gamma):
    service = ExperimentService(max_workers=2)
    spec = _spec(normal_gamma, reps=2)
    table, summaries = service.mse_curve(spec, [0.6])
    direct = service.run_experiment(spec)
    assert len(table) == 1
    assert table.loc[0, "mse_p"] == direct.mse_p
    assert table.loc[0, "mise"] == direct.mise
    assert summaries[0].rows == direct.rows


def test_run_file_sweeps_p_and_n(normal_gamma):
    simulation = SimulationFile(experiment=_spec(normal_gamma, reps=1), p_values=[0.4, 0.6], sample_sizes=[100, 150])
    table, summaries = ExperimentService(max_workers=2).run_file(simulation)
    assert list(zip(table["n"], table["p"])) == [(100, 0.4), (100, 0.6), (150, 0.4), (150, 0.6)]
    assert len(summaries) == 4


def test_tables(normal_gamma):
    summary = ExperimentService(max_workers=1).run_experiment(_spec(normal_gamma, reps=2))
    reps = per_rep_table(summary)
    assert list(reps.columns[:7]) == ["p", "n", "rep", "seed", "p_hat", "ise", "mu_hat"]
    assert len(reps) == 2
    aggregates = aggregate_table([summary])
    assert aggregates.loc[0, "p_mean"] == summary.p_mean


def test_spearman_trend():
    table = pd.DataFrame({"p": [0.2, 0.4, 0.6, 0.8], "mise": [0.04, 0.03, 0.02, 0.01]})
    assert spearman_trend(table) == pytest.approx(-1.0)
    assert math.isnan(spearman_trend(table.iloc[:1]))


def test_spearman_trend_matches_scipy_with_ties_and_gaps():
    table = pd.DataFrame(
        {
            "p": [0.2, 0.2, 0.4, 0.4, 0.6, 0.8, 0.8],
            "mise": [0.05, 0.02, 0.04, np.nan, 0.01, 0.03, 0.001],
        }
    )
    complete = table.dropna()
    expected = stats.spearmanr(complete["p"], complete["mise"]).correlation
    assert spearman_trend(table) == pytest.approx(expected, abs=1e-12)


def test_anc_surrogate():
    data = generate_anc_surrogate(155, seed=3)
    assert data.n == 155
    assert np.all(data.points > -ANC_SHIFT)
    log_scale = sample_mixture(ANC_SURROGATE, 155, 3)
    assert np.allclose(np.log(data.points + ANC_SHIFT), log_scale.points, rtol=1e-12)
    assert np.array_equal(generate_anc_surrogate(155, seed=3).points, data.points)


@pytest.mark.slow
def test_headline_normal_gamma_band():
    """n = 500, p = 0.6, p0 = 0.2, Gamma(4, 2) start, Silverman h, 30 master seeds"""
    mixture = MixtureSpec(p=0.6, known=PositiveTruncNormalDensity(mu=6.0, sigma=1.0), unknown=GammaDensity(alpha=2.0, beta=1.0))
    mm = MmConfig(p_init=0.2, f_init=GammaDensity(alpha=4.0, beta=2.0), tol=1e-5, max_iters=2000)
    service = ExperimentService()
    p_hats = []
    for master_seed in range(30):
        spec = ExperimentSpec(mixture=mixture, n=500, reps=1, master_seed=master_seed, mm=mm)
        row = service.run_experiment(spec).rows[0]
        assert row.stop_reason == StopReason.CONVERGED
        p_hats.append(row.p_hat)
    assert 0.58 <= float(np.mean(p_hats)) <= 0.72


@pytest.mark.slow
def test_normal_normal_table_cells():
    """Mean p_hat and mu_hat over 50 reps within 3 sd / sqrt(50) of the reference cells"""
    cells = {
        (0.3, 500): (0.315, 0.024, 5.772, 0.238),
        (0.3, 1000): (0.312, 0.018, 5.818, 0.178),
        (0.5, 500): (0.516, 0.026, 5.855, 0.155),
        (0.5, 1000): (0.512, 0.018, 5.883, 0.117),
    }
    service = ExperimentService()
    for (p, n), (p_mean, p_sd, mu_mean, mu_sd) in cells.items():
        mixture = MixtureSpec(p=p, known=NormalDensity(mu=0.0, sigma=1.0), unknown=NormalDensity(mu=6.0, sigma=1.0))
        spec = ExperimentSpec(mixture=mixture, n=n, reps=50, master_seed=2024, mm=MmConfig(p_init=0.2))
        summary = service.run_experiment(spec)
        assert summary.n_failed == 0
        assert abs(summary.p_mean - p_mean) <= 3 * p_sd / math.sqrt(50) + 0.01
        assert abs(summary.mu_mean - mu_mean) <= 3 * mu_sd / math.sqrt(50) + 0.05


@pytest.mark.slow
def test_normal_exponential_mise_decreases_with_p():
    mixture = MixtureSpec(p=0.6, known=NormalDensity(mu=6.0, sigma=1.0), unknown=ExponentialDensity(rate=0.5))
    spec = ExperimentSpec(mixture=mixture, n=500, reps=30, master_seed=11, mm=MmConfig(p_init=0.2, f_init=GammaDensity(alpha=4.0, beta=2.0)))
    table, _ = ExperimentService().mse_curve(spec, [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    assert spearman_trend(table, "mise") < 0


@pytest.mark.slow
def test_normal_gamma_mse_at_p_06():
    mixture = MixtureSpec(p=0.6, known=PositiveTruncNormalDensity(mu=6.0, sigma=1.0), unknown=GammaDensity(alpha=2.0, beta=1.0))
    spec = ExperimentSpec(mixture=mixture, n=500, reps=30, master_seed=7, mm=MmConfig(p_init=0.2, f_init=GammaDensity(alpha=4.0, beta=2.0)))
    assert ExperimentService().run_experiment(spec).mse_p < 0.01
