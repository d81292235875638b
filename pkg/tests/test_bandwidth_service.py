import math
from fractions import Fraction

import numpy as np
import pytest
from scipy.integrate import trapezoid

import src.services.bandwidth_service as bandwidth_module
from src.models.densities import GammaDensity, MixtureSpec, NormalDensity, PositiveTruncNormalDensity, Sample, sample_mixture
from src.models.errors import ConfigError
from src.models.schemas import CvConfig, MmConfig
from src.services.bandwidth_service import (
    BandwidthService,
    candidate_bandwidths,
    cv_bandwidth,
    fold_partition,
    silverman,
)
from src.services.mm_service import default_f_init, fit, iterate
from src.services.smoothing import Kernel, kernel_eval


def _type7(sorted_values, q):
    position = (len(sorted_values) - 1) * q
    lo = math.floor(position)
    frac = position - lo
    if lo + 1 >= len(sorted_values):
        return sorted_values[lo]
    return sorted_values[lo] + frac * (sorted_values[lo + 1] - sorted_values[lo])


def _silverman_oracle(values):
    """Rational arithmetic up to the final square root and power"""
    xs = sorted(Fraction(v) for v in values)
    n = len(xs)
    mean = sum(xs) / n
    variance = sum((x - mean) ** 2 for x in xs) / (n - 1)
    iqr = _type7(xs, Fraction(3, 4)) - _type7(xs, Fraction(1, 4))
    scale = min(math.sqrt(variance), float(iqr / Fraction(134, 100)))
    return 0.9 * scale * n ** (-0.2)


def test_silverman_matches_oracle():
    rng = np.random.default_rng(11)
    samples = [
        np.arange(1.0, 6.0),
        rng.normal(0.0, 1.0, 50),
        np.array([1.0, 1.0, 2.0, 2.0, 2.0, 7.0, 9.0]),
        rng.exponential(2.0, 101),
        np.concatenate([np.zeros(10), np.ones(10)]),
    ]
    for values in samples:
        assert silverman(Sample(values)) == pytest.approx(_silverman_oracle(values), rel=1e-12)


def test_silverman_unit_sd_example():
    """IQR / 1.34 exceeds SD for evenly spread data, so h = 0.9 n^(-1/5) when SD = 1"""
    x = np.linspace(0.0, 1.0, 500)
    x = x / np.std(x, ddof=1)
    assert silverman(Sample(x)) == pytest.approx(0.9 * 500 ** (-0.2), rel=1e-12)


def test_silverman_scale_equivariant(small_sample):
    h = silverman(small_sample)
    assert h > 0
    assert silverman(Sample(2.0 * small_sample.points)) == pytest.approx(2.0 * h, rel=1e-12)


def test_silverman_rejects_degenerate_samples():
    with pytest.raises(ConfigError):
        silverman(Sample(np.full(10, 3.0)))
    with pytest.raises(ConfigError):
        silverman(Sample(np.array([1.0])))


def test_candidate_bandwidths():
    cfg = CvConfig(half_range=0.4, grid_steps=10)
    hs = candidate_bandwidths(0.7, cfg)
    assert hs.size == 21
    assert hs[10] == pytest.approx(0.7)
    assert hs[0] == pytest.approx(0.3)
    assert hs[-1] == pytest.approx(1.1)
    assert np.allclose(np.diff(hs), 0.04)
    assert candidate_bandwidths(0.7, CvConfig(grid_steps=0)).tolist() == [0.7]


def test_fold_partition():
    folds = fold_partition(103, CvConfig(folds=10, fold_seed=4))
    assert len(folds) == 10
    assert sorted(len(fold) for fold in folds) == [10] * 7 + [11] * 3
    assert np.array_equal(np.sort(np.concatenate(folds)), np.arange(103))
    again = fold_partition(103, CvConfig(folds=10, fold_seed=4))
    assert all(np.array_equal(a, b) for a, b in zip(folds, again))
    with pytest.raises(ConfigError):
        fold_partition(5, CvConfig(folds=10))


def test_cv_rejects_half_range_beyond_silverman(small_sample, normal_gamma):
    h_s = silverman(small_sample)
    with pytest.raises(ConfigError):
        cv_bandwidth(small_sample, normal_gamma.known, MmConfig(), CvConfig(folds=5, half_range=h_s + 0.01))


def test_cv_singleton_grid_returns_silverman(small_sample, normal_gamma):
    h_star, curve = cv_bandwidth(small_sample, normal_gamma.known, MmConfig(p_init=0.2), CvConfig(folds=5, grid_steps=0, warmup=2))
    assert len(curve.points) == 1
    assert h_star == silverman(small_sample)
    assert curve.h_silverman == h_star


def test_cv_leave_one_out_matches_brute_force(normal_gamma):
    """K = n, T = 1: CV(h) equals ||f||^2 - (2/n) sum_i f_{-i}(x_i) computed point by point"""
    data = sample_mixture(normal_gamma, 20, seed=8)
    known = normal_gamma.known
    h_s = silverman(data)
    cfg_mm = MmConfig(p_init=0.3)
    cfg_cv = CvConfig(folds=20, half_range=0.25 * h_s, grid_steps=2, warmup=1)
    selection = BandwidthService(max_workers=2).select(data, known, cfg_mm, cfg_cv)
    grid = selection.grid
    step = grid.step

    for point in selection.curve.points:
        h = point.h
        states = iterate(data, known, cfg_mm.with_bandwidth(h), grid=grid)
        next(states)
        full = next(states)
        norm = float(trapezoid(full.f.values**2, dx=step))
        held_out = 0.0
        for i in range(data.n):
            keep = np.delete(np.arange(data.n), i)
            training = data.subset(keep)
            states = iterate(training, known, cfg_mm.with_bandwidth(h), grid=grid)
            next(states)
            state = next(states)
            total = 0.0
            for x, w in zip(training.points, state.weights):
                m0 = int(math.floor((x - grid.lo) / step))
                reach = int(math.ceil(h / step)) + 2
                z = sum(step * kernel_eval(Kernel.TRIANGULAR, (x - grid.lo - m * step) / h) / h for m in range(m0 - reach, m0 + reach + 1))
                total += w * kernel_eval(Kernel.TRIANGULAR, (data.points[i] - x) / h) / h / z
            held_out += state.alpha / training.n * total
        assert point.cv == pytest.approx(norm - 2.0 / data.n * held_out, abs=1e-10)


def test_cv_is_deterministic_and_picks_the_minimum(small_sample, normal_gamma):
    cfg_cv = CvConfig(folds=5, half_range=0.2, grid_steps=3, warmup=2, fold_seed=1)
    service = BandwidthService(max_workers=3)
    first = service.select(small_sample, normal_gamma.known, MmConfig(p_init=0.2), cfg_cv)
    second = service.select(small_sample, normal_gamma.known, MmConfig(p_init=0.2), cfg_cv)
    assert first.curve == second.curve
    values = [point.cv for point in first.curve.points]
    assert len(values) == 7
    best = min(values)
    assert first.h_star == min(point.h for point in first.curve.points if point.cv == best)
    assert first.warm_state.t == 2
    assert abs(first.warm_state.f.mass() - 1.0) <= 1e-6


def test_cv_warm_state_continues_at_h_star(small_sample, normal_gamma):
    cfg_mm = MmConfig(p_init=0.2, tol=1e-4)
    selection = BandwidthService().select(small_sample, normal_gamma.known, cfg_mm, CvConfig(folds=5, half_range=0.2, grid_steps=2, warmup=3))
    result = fit(small_sample, normal_gamma.known, cfg_mm.with_bandwidth(selection.h_star), start=selection.warm_state, grid=selection.grid)
    assert result.trace[0].t == 3
    assert result.bandwidth == selection.h_star


@pytest.mark.slow
def test_cv_selects_interior_bandwidth_on_matched_setup():
    """n = 500, p = 0.5 normal-gamma, K = 50, l = 0.4, M = 10, T = 5"""
    spec = MixtureSpec(p=0.5, known=PositiveTruncNormalDensity(mu=6.0, sigma=1.0), unknown=GammaDensity(alpha=2.0, beta=1.0))
    cfg_mm = MmConfig(p_init=0.2, f_init=GammaDensity(alpha=4.0, beta=2.0))
    hits = 0
    for seed in range(10):
        data = sample_mixture(spec, 500, seed=seed)
        h_star, curve = cv_bandwidth(data, spec.known, cfg_mm, CvConfig(fold_seed=seed))
        interior = curve.points[0].h < h_star < curve.points[-1].h
        hits += int(interior and 0.53 <= h_star <= 0.83)
    assert hits >= 8


def test_cv_warmups_share_the_full_sample_start(monkeypatch, normal_normal):
    """Without f_init every (h, fold) warm-up starts from the initializer of the full sample"""
    data = sample_mixture(normal_normal, 120, seed=6)
    known = normal_normal.known
    starts = []
    original_iterate = bandwidth_module.iterate

    def recording_iterate(sample, f0, cfg, start=None, grid=None):
        states = original_iterate(sample, f0, cfg, start=start, grid=grid)
        first = next(states)
        starts.append((cfg.f_init, first.p, first.f.values))
        yield first
        yield from states

    monkeypatch.setattr(bandwidth_module, "iterate", recording_iterate)
    cfg_cv = CvConfig(folds=4, half_range=0.1, grid_steps=1, warmup=1)
    BandwidthService(max_workers=2).select(data, known, MmConfig(p_init=0.3), cfg_cv)

    expected = default_f_init(data, known)
    assert isinstance(expected, NormalDensity)
    assert len(starts) == 3 * (4 + 1)
    for f_init, p, values in starts:
        assert f_init == expected
        assert p == 0.3
        assert np.array_equal(values, starts[0][2])
