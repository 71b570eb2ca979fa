"""Density, choice-probability, and sampler checks for the diffusion core."""

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import kstest

from shiftfit.errors import InvalidParameterError
from shiftfit.wiener import (
    DdmStateParams,
    HorizonResampleWarning,
    choice_probability,
    sample_ddm,
    sample_ddm_many,
    wfpt_log_density,
    wfpt_log_density_arrays,
)

# Parameter grid exercised by the normalization / consistency checks.
BOUNDARIES = (0.4, 1.1, 1.5, 2.0)
STARTS = (0.3, 0.5, 0.55)
DRIFTS = (-2.0, 0.0, 1.25, 4.5)
NDT = 0.14

# Frozen output of oracles.euler_choice_probability(2.0, 0.5, 1.0) with
# 10^6 paths, dt = 1e-4, seed 20240817.
MC_CHOICE_PROB_A2_B05_V1 = 0.881512


def grid_params():
    return [
        DdmStateParams(a, w, v, NDT)
        for a in BOUNDARIES for w in STARTS for v in DRIFTS
    ]


class TestDensityBasics:
    def test_rt_at_or_below_nondecision_is_log_zero(self):
        p = DdmStateParams(1.5, 0.5, 1.0, NDT)
        assert wfpt_log_density(0.10, 1, p) == -np.inf
        assert wfpt_log_density(NDT, 0, p) == -np.inf

    def test_density_finite_above_nondecision(self):
        p = DdmStateParams(1.5, 0.5, 1.0, NDT)
        for t in (0.15, 0.3, 1.0, 5.0):
            for c in (0, 1):
                val = wfpt_log_density(t, c, p)
                assert np.isfinite(val), f"log density not finite at t={t}, c={c}: {val}"

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(boundary=0.0, start_frac=0.5, drift=1.0, nondecision=0.1),
            dict(boundary=-1.0, start_frac=0.5, drift=1.0, nondecision=0.1),
            dict(boundary=1.0, start_frac=0.0, drift=1.0, nondecision=0.1),
            dict(boundary=1.0, start_frac=1.0, drift=1.0, nondecision=0.1),
            dict(boundary=1.0, start_frac=0.5, drift=np.nan, nondecision=0.1),
            dict(boundary=1.0, start_frac=0.5, drift=1.0, nondecision=0.0),
            dict(boundary=np.inf, start_frac=0.5, drift=1.0, nondecision=0.1),
        ],
    )
    def test_invalid_parameters_raise(self, kwargs):
        with pytest.raises(InvalidParameterError):
            DdmStateParams(**kwargs)

    def test_nonfinite_rt_raises(self):
        p = DdmStateParams(1.0, 0.5, 0.0, 0.1)
        with pytest.raises(InvalidParameterError):
            wfpt_log_density(np.nan, 1, p)
        with pytest.raises(InvalidParameterError):
            wfpt_log_density(np.inf, 0, p)

    def test_bad_choice_raises(self):
        p = DdmStateParams(1.0, 0.5, 0.0, 0.1)
        with pytest.raises(InvalidParameterError):
            wfpt_log_density(0.5, 2, p)


class TestReflectionSymmetry:
    def test_exact_reflection_identity(self):
        # Upper-boundary density must equal the reflected lower-boundary
        # density bit for bit, for every grid point and time.
        times = np.linspace(0.15, 4.0, 37)
        for p in grid_params():
            reflected = DdmStateParams(p.boundary, 1.0 - p.start_frac, -p.drift, p.nondecision)
            for t in times:
                assert wfpt_log_density(t, 1, p) == wfpt_log_density(t, 0, reflected)


class TestNormalization:
    def test_density_integrates_to_one_on_grid(self):
        for p in grid_params():
            total = 0.0
            for c in (0, 1):
                val, _ = quad(
                    lambda t: np.exp(wfpt_log_density(t, c, p)), p.nondecision, np.inf,
                    limit=200,
                )
                total += val
            assert abs(total - 1.0) < 1e-6, f"mass {total} for {p}"

    def test_upper_integral_matches_choice_probability(self):
        for p in grid_params():
            mass, _ = quad(
                lambda t: np.exp(wfpt_log_density(t, 1, p)), p.nondecision, np.inf,
                limit=200,
            )
            assert abs(mass - choice_probability(p)) < 1e-6, f"mismatch for {p}"

    def test_spec_point_normalization(self):
        p = DdmStateParams(2.0, 0.5, 1.0, NDT)
        total = sum(
            quad(lambda t: np.exp(wfpt_log_density(t, c, p)), NDT, np.inf, limit=200)[0]
            for c in (0, 1)
        )
        assert abs(total - 1.0) < 1e-6


class TestSeriesTruncation:
    def test_tightening_tolerance_changes_little(self):
        times = np.linspace(0.16, 3.5, 23)
        for p in grid_params():
            for t in times:
                for c in (0, 1):
                    loose = wfpt_log_density(t, c, p, eps=1e-10)
                    tight = wfpt_log_density(t, c, p, eps=1e-13)
                    assert abs(loose - tight) < 1e-8, (
                        f"eps sensitivity {abs(loose - tight)} at t={t}, {p}"
                    )


class TestChoiceProbability:
    def test_zero_drift_gives_start_fraction(self):
        assert choice_probability(DdmStateParams(2.0, 0.5, 0.0, NDT)) == 0.5
        assert choice_probability(DdmStateParams(1.3, 0.37, 0.0, NDT)) == 0.37

    def test_against_frozen_monte_carlo_oracle(self):
        p = choice_probability(DdmStateParams(2.0, 0.5, 1.0, NDT))
        assert abs(p - MC_CHOICE_PROB_A2_B05_V1) < 0.002

    def test_infinite_drift_limits(self):
        assert choice_probability(DdmStateParams(2.0, 0.25, 50.0, NDT)) == pytest.approx(1.0, abs=1e-12)
        assert choice_probability(DdmStateParams(2.0, 0.25, 1e6, NDT)) == pytest.approx(1.0, abs=1e-15)
        assert choice_probability(DdmStateParams(2.0, 0.75, -1e6, NDT)) == pytest.approx(0.0, abs=1e-15)

    def test_no_cancellation_near_zero_drift(self):
        base = DdmStateParams(2.0, 0.37, 0.0, NDT)
        for v in (1e-14, 1e-10, 1e-6, -1e-14, -1e-6):
            p = choice_probability(DdmStateParams(2.0, 0.37, v, NDT))
            assert abs(p - choice_probability(base)) < 1e-5
            assert 0.0 < p < 1.0


class TestSampler:
    def test_fixed_seed_reproduces_sequence(self):
        p = DdmStateParams(2.0, 0.5, 1.0, NDT)
        rng_a, rng_b = np.random.default_rng(123), np.random.default_rng(123)
        seq1 = [sample_ddm(p, rng_a) for _ in range(20)]
        seq2 = [sample_ddm(p, rng_b) for _ in range(20)]
        assert seq1 == seq2

    def test_all_times_exceed_nondecision(self):
        p = DdmStateParams(1.1, 0.3, -1.0, NDT)
        _, ts, _ = sample_ddm_many(p, 500, np.random.default_rng(5))
        assert np.all(ts > NDT)

    def test_upper_fraction_matches_choice_probability(self):
        p = DdmStateParams(2.0, 0.5, 1.0, NDT)
        choices, _, _ = sample_ddm_many(p, 100_000, np.random.default_rng(17))
        frac = choices.mean()
        assert abs(frac - 0.8808) < 0.01, f"upper fraction {frac}"

    def test_sampled_rts_match_density(self):
        # Kolmogorov-Smirnov distance between sampled upper-boundary RTs and
        # the numerically integrated analytic CDF.
        p = DdmStateParams(2.0, 0.5, 1.0, NDT)
        choices, ts, _ = sample_ddm_many(p, 100_000, np.random.default_rng(31))
        upper = np.sort(ts[choices == 1])

        grid = np.linspace(NDT, 12.0, 24_000)
        logf = wfpt_log_density_arrays(
            grid - NDT,
            np.ones(grid.size, dtype=np.int8),
            np.full(grid.size, p.boundary),
            np.full(grid.size, p.start_frac),
            np.full(grid.size, p.drift),
        )
        dens = np.exp(logf)
        cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) / 2 * np.diff(grid))])
        cdf /= cdf[-1]
        stat = kstest(upper, lambda t: np.interp(t, grid, cdf)).statistic
        assert stat < 0.01, f"KS distance {stat}"

    def test_horizon_resample_warns(self):
        # Mean decision time here is 1 s, so a 0.5 s horizon forces redraws
        # while still letting every draw eventually succeed.
        p = DdmStateParams(2.0, 0.5, 0.0, NDT)
        with pytest.warns(HorizonResampleWarning):
            _, ts, n = sample_ddm_many(p, 50, np.random.default_rng(2), max_horizon=0.5)
        assert n > 0
        assert np.all(ts <= NDT + 0.5 + 1e-12)
