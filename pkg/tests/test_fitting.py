import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltem.fitting import (
    ConstantSeries,
    FitError,
    InsufficientSupport,
    autocorrelation,
    detect_period,
    fit_gmm,
    fit_poly,
    loss_rate,
    rebuild_profile,
    write_fit_report,
)
from ltem.model import (
    PROFILE_T,
    bandwidth_params,
    mixture_moments,
    rtt_mixture_params,
    sample_rtt_series,
    with_widened_stds,
)


def naive_acf(x, k):
    """Biased sample autocorrelation at lag k, straight from the definition."""
    x = np.asarray(x, float)
    d = x - x.mean()
    return float(np.sum(d[: len(d) - k] * d[k:]) / np.sum(d * d))


@pytest.fixture(scope="module")
def widened_csq19():
    m = rtt_mixture_params(with_widened_stds(PROFILE_T, 1.0), 19)
    return m, sample_rtt_series(m, 50_000, 2024)


class TestGmm:
    def test_recovers_widened_mixture(self, widened_csq19):
        truth, x = widened_csq19
        res = fit_gmm(x, k=4, gen=1)
        assert res.converged
        assert np.max(np.abs(res.means - truth.means)) < 0.5
        assert np.max(np.abs(res.weights - truth.weights)) < 0.02
        assert np.all(np.diff(res.ll_history) >= -1e-9 * abs(res.ll_history[-1]))

    def test_constrained_fit(self, widened_csq19):
        truth, x = widened_csq19
        res = fit_gmm(x, k=4, constrained=True, gen=1)
        np.testing.assert_allclose(np.diff(res.means), [9.6, 9.8, 9.1], atol=1e-9)
        assert abs(res.means[0] - 35.0) < 0.5
        assert np.max(np.abs(res.weights - truth.weights)) < 0.02
        assert np.all(np.diff(res.ll_history) >= -1e-9 * abs(res.ll_history[-1]))

    def test_point_mass(self):
        res = fit_gmm(np.full(200, 35.0), k=1)
        assert res.k == 1
        assert res.means[0] == pytest.approx(35.0)
        assert res.stds[0] == 0.0
        assert res.weights[0] == pytest.approx(1.0)

    def test_two_clusters(self):
        rng = np.random.default_rng(8)
        a = rng.normal(35, 1, 3000)
        b = rng.normal(65, 1, 7000)
        res = fit_gmm(np.concatenate([a, b]), k=2)
        np.testing.assert_allclose(res.weights, [0.3, 0.7], atol=1e-3)
        np.testing.assert_allclose(res.means, [a.mean(), b.mean()], atol=1e-3)

    def test_degenerate_component_removed(self):
        rng = np.random.default_rng(1)
        x = rng.normal(50, 1, 400)
        res = fit_gmm(x, k=4)
        assert res.k + res.removed_components == 4
        assert abs(res.weights.sum() - 1) < 1e-12

    def test_min_samples(self):
        with pytest.raises(InsufficientSupport):
            fit_gmm(np.arange(39.0), k=4)

    def test_non_finite(self):
        x = np.arange(100.0)
        x[3] = np.nan
        with pytest.raises(FitError):
            fit_gmm(x, k=2)

    def test_deterministic(self, widened_csq19):
        x = widened_csq19[1][:5000]
        a, b = fit_gmm(x, gen=3), fit_gmm(x, gen=3)
        assert a.ll_history == b.ll_history
        assert np.array_equal(a.means, b.means)

    def test_report(self, tmp_path, widened_csq19):
        res = fit_gmm(widened_csq19[1][:5000], gen=3)
        path = tmp_path / "r.csv"
        write_fit_report(path, {19: res})
        head, row = path.read_text().splitlines()
        assert head == "csq,w1,w2,w3,w4,mu1,sigma1,sigma2,sigma3,sigma4,loglik"
        assert row.startswith("19,")


class TestPoly:
    def test_linear_bandwidth(self):
        xs = list(range(10, 32))
        p = fit_poly(xs, [0.55 * x + 0.13 for x in xs], 1)
        np.testing.assert_allclose(p.coefficients, [0.13, 0.55], atol=1e-9)
        assert p.residual_rms < 1e-9

    def test_quadratic_rtt_mean(self):
        xs = list(range(10, 32))
        p = fit_poly(xs, [177.69 - 9.11 * x + 0.158 * x * x for x in xs], 2)
        np.testing.assert_allclose(p.coefficients, [177.69, -9.11, 0.158], atol=1e-9)
        assert p.residual_rms <= 1e-9

    def test_constant(self):
        p = fit_poly([10, 20, 30], [5.0, 5.0, 5.0], 1)
        assert p.coefficients[1] == pytest.approx(0.0, abs=1e-12)
        assert p.coefficients[0] == pytest.approx(5.0)

    def test_rank_deficient(self):
        with pytest.raises(InsufficientSupport):
            fit_poly([19, 19, 19], [1.0, 2.0, 3.0], 1)
        with pytest.raises(InsufficientSupport):
            fit_poly([19, 20], [1.0, 2.0], 2)

    def test_callable(self):
        p = fit_poly([0, 1, 2], [1.0, 3.0, 5.0], 1)
        assert p(10) == pytest.approx(21.0)


class TestAcf:
    def test_lag_zero_and_bounds(self):
        x = np.random.default_rng(0).normal(size=500)
        acf = autocorrelation(x, 30)
        assert acf.values[0] == 1.0
        assert np.all(np.abs(acf.values) <= 1.0)
        assert list(acf.lags) == list(range(31))

    def test_alternating(self):
        acf = autocorrelation(np.tile([1.0, -1.0], 500), 5)
        assert acf.values[1] == pytest.approx(-1.0, abs=2e-3)

    def test_white_noise(self):
        acf = autocorrelation(np.random.default_rng(5).normal(size=100_000), 20)
        assert np.max(np.abs(acf.values[1:])) < 0.02

    @pytest.mark.parametrize("max_lag", [10, 100])
    def test_matches_definition(self, max_lag):
        x = np.random.default_rng(2).normal(size=1000).cumsum()
        acf = autocorrelation(x, max_lag)
        for k in (1, 7, max_lag):
            assert acf.values[k] == pytest.approx(naive_acf(x, k), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(0.1, 100), b=st.floats(-1e3, 1e3), seed=st.integers(0, 1000))
    def test_affine_invariance(self, a, b, seed):
        x = np.random.default_rng(seed).normal(size=300)
        np.testing.assert_allclose(autocorrelation(a * x + b, 20).values,
                                   autocorrelation(x, 20).values, atol=1e-12)

    def test_constant(self):
        with pytest.raises(ConstantSeries, match="constant series"):
            autocorrelation(np.full(100, 3.0), 10)

    def test_too_short(self):
        with pytest.raises(FitError):
            autocorrelation(np.arange(5.0), 10)


class TestPeriod:
    def test_sine_period_ten(self):
        t = np.arange(1000)
        assert detect_period(autocorrelation(np.sin(2 * np.pi * t / 10), 50)) == 10

    def test_noisy_sine(self):
        t = np.arange(5000)
        x = np.sin(2 * np.pi * t / 10) + np.random.default_rng(3).normal(0, 0.5, t.size)
        assert detect_period(autocorrelation(x, 50)) == 10

    def test_noise_has_no_period(self):
        x = np.random.default_rng(5).normal(size=100_000)
        assert detect_period(autocorrelation(x, 50)) is None

    def test_period_two(self):
        assert detect_period(autocorrelation(7.0 + np.tile([1.0, -1.0], 200), 20)) == 2


class TestLossRate:
    @pytest.mark.parametrize("sent, got, rate", [(10, 10, 0.0), (1000, 997, 0.003), (10000, 9965, 0.0035)])
    def test_values(self, sent, got, rate):
        assert loss_rate(sent, got) == pytest.approx(rate, abs=1e-15)

    def test_errors(self):
        with pytest.raises(FitError, match="no samples"):
            loss_rate(0, 0)
        with pytest.raises(FitError):
            loss_rate(5, 6)


class TestRebuild:
    CSQS = (15, 19, 23, 27, 31)

    def _bw(self):
        return {c: (bandwidth_params(PROFILE_T, c).mean, bandwidth_params(PROFILE_T, c).std) for c in self.CSQS}

    def test_weight_fits_from_raw_weights(self):
        fits = {c: rtt_mixture_params(PROFILE_T, c).raw_weights for c in self.CSQS}
        prof = rebuild_profile(fits, self._bw())
        np.testing.assert_allclose(np.array(prof.weight_fits), np.array(PROFILE_T.weight_fits), atol=1e-6)

    def test_bandwidth_fit(self):
        bw = {c: (0.55 * c + 0.13, 0.31 * c - 1.17) for c in self.CSQS}
        fits = {c: rtt_mixture_params(PROFILE_T, c).raw_weights for c in self.CSQS}
        prof = rebuild_profile(fits, bw)
        np.testing.assert_allclose(prof.bandwidth_mean_fit, [0.13, 0.55], atol=1e-9)
        np.testing.assert_allclose(prof.bandwidth_std_fit, [-1.17, 0.31], atol=1e-9)

    def test_from_gmm_fits(self):
        # every component has positive weight on these bins (CSQ 15 drops the first peak)
        wide = with_widened_stds(PROFILE_T, 1.0)
        fits = {}
        for c in (19, 21, 23, 25):
            m = rtt_mixture_params(wide, c)
            fits[c] = fit_gmm(sample_rtt_series(m, 20_000, c), gen=c)
        prof = rebuild_profile(fits, self._bw())
        np.testing.assert_allclose(prof.mean_offsets, PROFILE_T.mean_offsets, atol=0.3)
        assert abs(prof.default_mu1 - 35.0) < 0.3
        for c in (19, 21, 23, 25):
            rebuilt = rtt_mixture_params(prof, c)
            assert abs(mixture_moments(rebuilt)[0] - mixture_moments(rtt_mixture_params(wide, c))[0]) < 0.5

    def test_single_csq(self):
        with pytest.raises(InsufficientSupport):
            rebuild_profile({19: [0.1, 0.4, 0.3, 0.2]}, {19: (10.0, 3.0)})

    def test_wrong_component_count(self):
        x = np.random.default_rng(0).normal(50, 1, 500)
        two = fit_gmm(x, k=2)
        with pytest.raises(FitError):
            rebuild_profile({c: two for c in (15, 19, 23)}, self._bw())
