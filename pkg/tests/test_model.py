import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from ltem.model import (
    PROFILE_T,
    BandwidthModel,
    CsqValue,
    GaussianComponent,
    ModelError,
    OperatorProfile,
    RttMixtureModel,
    SeededGenerator,
    bandwidth_params,
    csq_to_rssi,
    fixed_profile,
    load_profile,
    mixture_moments,
    profile_from_text,
    profile_to_text,
    read_series_csv,
    rtt_mixture_params,
    rtt_moments,
    sample_bandwidth_series,
    sample_loss,
    sample_rtt_series,
    truncated_moments,
    with_widened_stds,
    write_series_csv,
)

# Linear weight fits of the built-in operator-T profile, (slope, intercept).
T_WEIGHT_FITS = [(0.0079, -0.1285), (0.0430, -0.3834), (-0.0059, 0.3244), (-0.0096, 0.2937)]


def truncated_mean_by_quadrature(mean, std):
    """Mean of N(mean, std) conditioned on x >= 0, by numerical integration."""
    pdf = lambda x: math.exp(-0.5 * ((x - mean) / std) ** 2)
    upper = mean + 40 * std
    mass, _ = integrate.quad(pdf, 0, upper, limit=200)
    first, _ = integrate.quad(lambda x: x * pdf(x), 0, upper, limit=200)
    return first / mass


class TestCsq:
    def test_range(self):
        assert CsqValue(0).value == 0
        assert CsqValue(31).value == 31
        for bad in (-1, 32, 99):
            with pytest.raises(ModelError):
                CsqValue(bad)

    def test_extrapolated_flag(self):
        assert CsqValue(5).extrapolated
        assert not CsqValue(10).extrapolated
        assert not CsqValue(31).extrapolated

    def test_rejects_non_integers(self):
        with pytest.raises(ModelError):
            CsqValue(12.5)

    @pytest.mark.parametrize("csq, dbm", [(0, -113), (31, -51), (15, -83)])
    def test_rssi(self, csq, dbm):
        assert csq_to_rssi(csq) == dbm

    def test_rssi_affine_increasing(self):
        vals = [csq_to_rssi(c) for c in range(32)]
        assert all(b - a == 2 for a, b in zip(vals, vals[1:]))


class TestMixtureParams:
    def test_csq19(self):
        m = rtt_mixture_params(PROFILE_T, 19)
        np.testing.assert_allclose(m.raw_weights, [0.0216, 0.4336, 0.2123, 0.1113], atol=1e-12)
        np.testing.assert_allclose(m.weights, [0.0277, 0.5568, 0.2726, 0.1429], atol=1e-4)

    def test_csq31_clamps_fourth(self):
        m = rtt_mixture_params(PROFILE_T, 31)
        np.testing.assert_allclose(m.raw_weights, [0.1164, 0.9496, 0.1415, -0.0039], atol=1e-12)
        np.testing.assert_allclose(m.weights, [0.0964, 0.7864, 0.1172, 0.0], atol=1e-4)
        assert m.weights[3] == 0.0

    def test_means_from_mu1(self):
        m = rtt_mixture_params(PROFILE_T, 19, mu1=35.0)
        np.testing.assert_allclose(m.means, [35.0, 44.6, 54.4, 63.5])

    def test_default_mu1(self):
        assert rtt_mixture_params(PROFILE_T, 25).mu1 == 35.0

    @given(csq=st.integers(10, 31), mu1=st.floats(20, 60))
    def test_invariants(self, csq, mu1):
        m = rtt_mixture_params(PROFILE_T, csq, mu1)
        assert abs(m.weights.sum() - 1) < 1e-9
        assert np.all((m.weights >= 0) & (m.weights <= 1))
        np.testing.assert_allclose(np.diff(m.means), [9.6, 9.8, 9.1], atol=1e-9)

    def test_degenerate(self):
        neg = OperatorProfile("neg", [(0, -1)] * 4, (0, 1, 2, 3), (1, 1, 1, 1), 35.0, (1, 0), (1, 0),
                              PROFILE_T.rtt_moment_fit)
        with pytest.raises(ModelError, match="degenerate"):
            rtt_mixture_params(neg, 20)

    def test_mixture_type_checks(self):
        comps = [GaussianComponent(0.25, m, 1.0) for m in (1, 2, 3, 4)]
        with pytest.raises(ModelError):
            RttMixtureModel(comps[:3], 1.0, CsqValue(20))
        with pytest.raises(ModelError):
            RttMixtureModel([GaussianComponent(0.25, m, 1.0) for m in (1, 3, 2, 4)], 1.0, CsqValue(20))
        with pytest.raises(ModelError):
            GaussianComponent(1.5, 0, 1)


class TestMoments:
    def test_rtt_moments(self):
        fit = PROFILE_T.rtt_moment_fit
        mean, std = rtt_moments(fit, 31)
        assert mean == pytest.approx(47.118, abs=1e-9)
        assert std == 0.0
        mean, std = rtt_moments(fit, 19)
        assert mean == pytest.approx(61.638, abs=1e-9)
        assert std == pytest.approx(36.98, abs=1e-9)
        assert rtt_moments(fit, 0) == (177.69, 97.21)

    def test_mixture_moments_point_mass(self):
        m = RttMixtureModel([GaussianComponent(1, 35, 0.02), GaussianComponent(0, 44.6, 0.03),
                             GaussianComponent(0, 54.4, 0.04), GaussianComponent(0, 63.5, 0.04)], 35.0, CsqValue(20))
        mean, std = mixture_moments(m)
        assert mean == pytest.approx(35.0)
        assert std == pytest.approx(0.02)

    def test_mixture_moments_equal_weights(self):
        m = RttMixtureModel([GaussianComponent(0.25, mu, 0.0) for mu in (35, 44.6, 54.4, 63.5)], 35.0, CsqValue(20))
        assert mixture_moments(m)[0] == pytest.approx(49.375)

    def test_mixture_moments_csq19(self):
        m = rtt_mixture_params(PROFILE_T, 19, 35.0)
        raw = [a * 19 + b for a, b in T_WEIGHT_FITS]
        w = [r / sum(raw) for r in raw]
        expected = 35 + w[1] * 9.6 + w[2] * 19.4 + w[3] * 28.5
        assert mixture_moments(m)[0] == pytest.approx(expected, abs=1e-12)
        assert mixture_moments(m)[0] == pytest.approx(49.71, abs=0.01)

    def test_mixture_moments_against_quadrature(self):
        m = rtt_mixture_params(with_widened_stds(PROFILE_T, 2.0), 22)
        dens = lambda x: sum(w * stats.norm.pdf(x, mu, s) for w, mu, s in zip(m.weights, m.means, m.stds))
        mean = integrate.quad(lambda x: x * dens(x), 0, 150, limit=200)[0]
        second = integrate.quad(lambda x: x * x * dens(x), 0, 150, limit=200)[0]
        got = mixture_moments(m)
        assert got[0] == pytest.approx(mean, rel=1e-8)
        assert got[1] == pytest.approx(math.sqrt(second - mean**2), rel=1e-6)


class TestRttSampling:
    def test_empty(self):
        assert sample_rtt_series(rtt_mixture_params(PROFILE_T, 19), 0, 1).size == 0

    def test_deterministic(self):
        m = rtt_mixture_params(PROFILE_T, 19)
        a = sample_rtt_series(m, 500, SeededGenerator(42))
        b = sample_rtt_series(m, 500, SeededGenerator(42))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, sample_rtt_series(m, 500, SeededGenerator(43)))

    def test_mean_matches_moments(self):
        m = rtt_mixture_params(PROFILE_T, 19)
        x = sample_rtt_series(m, 100_000, 5)
        mean, std = mixture_moments(m)
        assert abs(x.mean() - mean) / mean < 0.005
        assert abs(x.mean() - mean) < 5 * std / math.sqrt(x.size)

    def test_zero_weight_component_never_drawn(self):
        m = rtt_mixture_params(PROFILE_T, 31)
        x = sample_rtt_series(m, 50_000, 9)
        assert np.all(np.abs(x - (35.0 + 28.5)) > 1.0)

    def test_non_negative(self):
        wide = with_widened_stds(PROFILE_T, 40.0)
        x = sample_rtt_series(rtt_mixture_params(wide, 19), 20_000, 3)
        assert x.min() >= 0

    @settings(max_examples=25, deadline=None)
    @given(csq=st.integers(10, 31), seed=st.integers(0, 2**32))
    def test_within_five_standard_errors(self, csq, seed):
        m = rtt_mixture_params(with_widened_stds(PROFILE_T, 1.0), csq)
        x = sample_rtt_series(m, 100_000, seed)
        mean, std = mixture_moments(m)
        assert abs(x.mean() - mean) < 5 * std / math.sqrt(x.size)


class TestBandwidth:
    def test_params(self):
        bm = bandwidth_params(PROFILE_T, 31)
        assert bm.mean == pytest.approx(17.18)
        assert bm.std == pytest.approx(8.44)
        bm = bandwidth_params(PROFILE_T, 15)
        assert bm.mean == pytest.approx(8.38)
        assert bm.std == pytest.approx(3.48)
        assert bandwidth_params(PROFILE_T, 3).std == 0.0

    def test_mean_nondecreasing(self):
        means = [bandwidth_params(PROFILE_T, c).mean for c in range(10, 32)]
        assert all(b >= a for a, b in zip(means, means[1:]))

    def test_degenerate_sampler(self):
        x = sample_bandwidth_series(BandwidthModel(10.0, 0.0), 5, 1)
        assert x.tolist() == [10.0] * 5
        assert sample_bandwidth_series(BandwidthModel(10.0, 1.0), 0, 1).size == 0

    def test_truncated_mean(self):
        bm = bandwidth_params(PROFILE_T, 31)
        x = sample_bandwidth_series(bm, 100_000, 11)
        assert x.min() >= 0
        oracle = truncated_mean_by_quadrature(bm.mean, bm.std)
        assert abs(x.mean() - oracle) / oracle < 0.01

    @pytest.mark.parametrize("mean, std", [(17.18, 8.44), (2.0, 3.0), (10.0, 1.0)])
    def test_closed_form_truncated_mean(self, mean, std):
        bm = BandwidthModel(mean, std)
        assert truncated_moments(bm)[0] == pytest.approx(truncated_mean_by_quadrature(mean, std), rel=1e-9)

    def test_low_dispersion_has_negligible_bias(self):
        bm = BandwidthModel(10.0, 1.9)
        assert abs(truncated_mean_by_quadrature(bm.mean, bm.std) - bm.mean) / bm.mean < 1e-4

    def test_batch_equals_sequential(self):
        bm = BandwidthModel(1.0, 2.0)
        whole = sample_bandwidth_series(bm, 200, SeededGenerator(3))
        g = SeededGenerator(3)
        one_by_one = np.concatenate([sample_bandwidth_series(bm, 1, g) for _ in range(200)])
        assert np.array_equal(whole, one_by_one)

    def test_clamped_at_construction(self):
        bm = BandwidthModel(-1.0, -2.0)
        assert (bm.mean, bm.std) == (0.0, 0.0)


class TestLoss:
    def test_extremes(self):
        assert not sample_loss(fixed_profile(10, 50, 0.0), 1000, 1).any()
        assert sample_loss(fixed_profile(10, 50, 1.0), 10, 1).all()

    def test_binomial_interval(self):
        drops = int(sample_loss(PROFILE_T, 100_000, 2).sum())
        lo, hi = stats.binom.interval(0.99, 100_000, 0.0035)
        assert lo <= drops <= hi


class TestPersistence:
    def test_profile_round_trip(self, tmp_path):
        text = profile_to_text(PROFILE_T)
        assert profile_from_text(text) == PROFILE_T
        path = tmp_path / "t.profile"
        path.write_text(text)
        assert load_profile(str(path)) == PROFILE_T
        assert load_profile("builtin:T") is PROFILE_T

    def test_profile_errors(self, tmp_path):
        with pytest.raises(ModelError):
            load_profile("builtin:M")
        with pytest.raises(ModelError, match="missing key"):
            profile_from_text("name = x\n")
        with pytest.raises(ModelError):
            load_profile(str(tmp_path / "nope"))

    def test_profile_validation(self):
        with pytest.raises(ModelError):
            fixed_profile(10, 50, loss_rate=1.5)
        with pytest.raises(ModelError):
            OperatorProfile("x", T_WEIGHT_FITS, (1, 2, 3, 4), (0, 0, 0, 0), 35, (0, 1), (0, 1),
                            PROFILE_T.rtt_moment_fit)

    def test_series_csv(self, tmp_path):
        path = tmp_path / "s.csv"
        vals = sample_rtt_series(rtt_mixture_params(PROFILE_T, 19), 50, 1)
        write_series_csv(path, vals, 50.0)
        lines = path.read_text().splitlines()
        assert lines[0] == "index,time_ms,value"
        assert lines[2].startswith("1,50.0,")
        assert np.array_equal(read_series_csv(path), vals)
