import logging
import math

import numpy as np
import pytest
from scipy import integrate, stats

from distributions import (
    LOG_PROB_FLOOR,
    CountPmf,
    ReadoutParams,
    bright_sum_pmf,
    convolve,
    convolve_power,
    dark_sum_pmf_with_decay,
    load_empirical_pmf,
    parse_count_records,
    poisson_pmf,
    save_empirical_histogram,
    sub_bin_models,
    synthetic_detector_records,
)
from errors import InvalidParameterError, ParseError


def _padded(probs, size):
    out = np.zeros(size)
    out[: len(probs)] = probs
    return out


class TestPoissonPmf:
    def test_zero_mean_is_point_mass(self):
        pmf = poisson_pmf(0.0)
        assert list(pmf.probs) == [1.0]

    def test_closed_form_entries(self):
        assert poisson_pmf(0.558).probs[0] == pytest.approx(math.exp(-0.558), rel=1e-12)
        assert poisson_pmf(1.0).probs[1] == pytest.approx(math.exp(-1.0), rel=1e-12)

    def test_default_support_rule(self):
        assert poisson_pmf(0.558).n_max == 50
        assert poisson_pmf(400.0).n_max == 600

    @pytest.mark.parametrize('mean', [1e-4, 0.5, 10.0, 1000.0])
    def test_mean_and_variance(self, mean):
        pmf = poisson_pmf(mean)
        assert pmf.total() == pytest.approx(1.0, abs=1e-9)
        assert pmf.mean() == pytest.approx(mean, rel=1e-6)
        assert pmf.variance() == pytest.approx(mean, rel=1e-6)

    def test_large_mean_is_stable(self):
        pmf = poisson_pmf(1e4)
        assert np.all(np.isfinite(pmf.probs))
        assert pmf.total() == pytest.approx(1.0, abs=1e-9)

    def test_rejects_negative_mean(self):
        with pytest.raises(InvalidParameterError):
            poisson_pmf(-0.1)

    def test_rejects_tiny_support(self):
        with pytest.raises(InvalidParameterError):
            poisson_pmf(1.0, n_max=0)


class TestCountPmf:
    def test_rejects_negative_entries(self):
        with pytest.raises(InvalidParameterError):
            CountPmf([1.2, -0.2])

    def test_rejects_unnormalized(self):
        with pytest.raises(InvalidParameterError):
            CountPmf([0.5, 0.4])

    def test_cdf_and_tail(self):
        pmf = CountPmf([0.5, 0.25, 0.125, 0.125])
        assert pmf.cdf(1) == pytest.approx(0.75)
        assert pmf.cdf(-1) == 0.0
        assert pmf.tail_mass(1.5) == pytest.approx(0.25)
        assert pmf.tail_mass(-0.5) == pytest.approx(1.0)

    def test_poisson_log_prob_beyond_support(self):
        pmf = poisson_pmf(1.0)
        assert float(pmf.log_prob(80)) == pytest.approx(stats.poisson.logpmf(80, 1.0), rel=1e-9)

    def test_empirical_log_prob_beyond_support_is_floor(self):
        pmf = CountPmf([0.75, 0.25])
        assert float(pmf.log_prob(7)) == LOG_PROB_FLOOR

    def test_zero_entry_never_gives_minus_infinity(self):
        pmf = CountPmf([0.5, 0.0, 0.5])
        values = pmf.log_prob(np.array([0, 1, 2]))
        assert np.all(np.isfinite(values))
        assert values[1] == LOG_PROB_FLOOR

    def test_sample_matches_mean(self):
        pmf = CountPmf([0.25, 0.75])
        draws = pmf.sample(np.random.default_rng(3), 100_000)
        assert draws.min() >= 0 and draws.max() <= 1
        assert draws.mean() == pytest.approx(0.75, abs=0.01)


class TestConvolve:
    def test_identity(self, small_pmfs):
        _, _, detector = small_pmfs
        result = convolve(CountPmf([1.0]), detector)
        assert np.allclose(result.probs, detector.probs, rtol=1e-15, atol=1e-15)

    def test_poisson_additivity(self):
        result = convolve(poisson_pmf(0.3), poisson_pmf(1.2))
        expected = poisson_pmf(1.5, n_max=result.n_max)
        assert np.allclose(result.probs, expected.probs, atol=1e-9)
        assert result.poisson_mean == pytest.approx(1.5)

    def test_mean_additivity_with_detector(self):
        detector = poisson_pmf(8.2 * 10e-6)
        result = convolve(poisson_pmf(0.554), detector)
        assert result.mean() == pytest.approx(0.554 + 8.2e-5, rel=1e-9)

    def test_commutative_and_associative(self):
        rng = np.random.default_rng(11)
        a, b, c = (CountPmf(rng.dirichlet(np.ones(5))) for _ in range(3))
        assert np.allclose(convolve(a, b).probs, convolve(b, a).probs, atol=1e-12)
        left = convolve(convolve(a, b), c).probs
        right = convolve(a, convolve(b, c)).probs
        assert np.allclose(left, right, atol=1e-12)

    def test_power_matches_repeated_convolution(self, small_pmfs):
        _, _, detector = small_pmfs
        expected = convolve(convolve(detector, detector), detector)
        assert np.allclose(convolve_power(detector, 3).probs, expected.probs, atol=1e-12)
        assert list(convolve_power(detector, 0).probs) == [1.0]


class TestEmpiricalPmf:
    def test_direct_normalization(self):
        pmf = load_empirical_pmf(['0', '0', '0', '1'])
        assert pmf.probs[:2] == pytest.approx([0.75, 0.25])
        assert pmf.probs[2:].sum() == 0.0
        assert pmf.n_max >= 50

    def test_all_zero_records(self):
        pmf = load_empirical_pmf(['0'] * 10)
        assert pmf.probs[0] == 1.0

    def test_comments_and_blank_lines(self):
        pmf = load_empirical_pmf(['# detector run 3', '', '2', '  ', '0'])
        assert pmf.probs[:3] == pytest.approx([0.5, 0.0, 0.5])

    def test_bad_record_names_line(self):
        with pytest.raises(ParseError) as excinfo:
            load_empirical_pmf(['0', '1', 'x2', '0'])
        assert excinfo.value.line_number == 3
        assert ':3:' in str(excinfo.value)

    def test_negative_record(self):
        with pytest.raises(ParseError):
            load_empirical_pmf(['0', '-1'])

    @pytest.mark.parametrize('record', ['²', '٣', '７'])
    def test_non_ascii_digits(self, record):
        with pytest.raises(ParseError) as excinfo:
            parse_count_records(['1', record])
        assert excinfo.value.line_number == 2

    def test_empty_source(self):
        with pytest.raises(ParseError):
            load_empirical_pmf(['# nothing here'])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_empirical_pmf(tmp_path / 'absent.txt')

    def test_file_written_by_save(self, tmp_path):
        path = tmp_path / 'hist.txt'
        save_empirical_histogram([0, 0, 1, 3], path, comment='bench test')
        assert path.read_text().startswith('# bench test\n')
        pmf = load_empirical_pmf(path)
        assert pmf.probs[:4] == pytest.approx([0.5, 0.25, 0.0, 0.25])

    def test_shipped_detector_histogram(self, data_dir):
        pmf = load_empirical_pmf(data_dir / 'pmt_dark_synthetic.txt')
        assert pmf.mean() == pytest.approx(39 / 200_000, rel=1e-9)
        assert pmf.probs[9] > 0

    def test_poisson_records_within_multinomial_bands(self):
        n = 1_000_000
        records = np.random.default_rng(5).poisson(0.5, size=n)
        pmf = load_empirical_pmf(str(r) for r in records)
        exact = poisson_pmf(0.5).probs
        for k in range(6):
            sigma = math.sqrt(exact[k] * (1 - exact[k]) / n)
            assert abs(pmf.probs[k] - exact[k]) <= 4 * sigma + 1e-12


class TestReadoutParams:
    def test_derived_means(self, default_params):
        assert default_params.bright_mean == pytest.approx(0.558)
        assert default_params.background_mean == pytest.approx(0.00442)
        assert default_params.bin_time == pytest.approx(2e-3)

    def test_bin_longer_than_lifetime(self):
        with pytest.raises(InvalidParameterError) as excinfo:
            ReadoutParams.defaults(shelf_lifetime=1e-3)
        assert excinfo.value.field == 'shelf_lifetime'

    def test_dark_above_bright(self):
        with pytest.raises(InvalidParameterError) as excinfo:
            ReadoutParams.defaults(dark_rate=6e4)
        assert excinfo.value.field == 'bright_rate'

    def test_long_bin_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger='distributions'):
            ReadoutParams.defaults(shelf_lifetime=0.015)
        assert 'tenth of the shelf lifetime' in caplog.text

    def test_with_efficiency(self, default_params):
        scaled = default_params.with_efficiency(2 * 0.19e-2)
        assert scaled.bright_rate == pytest.approx(2 * 55800)
        assert scaled.dark_rate == pytest.approx(8.2 + 2 * (442 - 8.2))
        assert scaled.sub_bin_count == default_params.sub_bin_count


class TestSubBinModels:
    def test_default_rates(self, default_params):
        bright, dark = sub_bin_models(default_params)
        assert bright.poisson_mean == pytest.approx(0.558)
        assert dark.poisson_mean == pytest.approx(0.00442)

    def test_zero_dark_rate(self):
        _, dark = sub_bin_models(ReadoutParams.defaults(dark_rate=0.0))
        assert dark.probs[0] == 1.0

    def test_detector_counts_not_double_counted(self):
        params = ReadoutParams.defaults(dark_count_pmf=poisson_pmf(8.2 * 10e-6))
        _, dark = sub_bin_models(params)
        assert dark.mean() == pytest.approx(442 * 10e-6, rel=1e-9)


class TestSummedPmfs:
    def test_bright_sum_at_42(self, default_params):
        pmf = bright_sum_pmf(default_params, 42)
        assert pmf.mean() == pytest.approx(42 * 0.558, rel=1e-9)
        assert pmf.poisson_mean == pytest.approx(23.436)

    def test_bright_sum_single_sub_bin(self, default_params):
        bright, _ = sub_bin_models(default_params)
        assert np.array_equal(bright_sum_pmf(default_params, 1).probs, bright.probs)

    def test_bright_sum_with_detector(self, small_pmfs):
        _, _, detector = small_pmfs
        params = ReadoutParams.defaults(dark_rate=442 + detector.mean() / 10e-6, dark_count_pmf=detector)
        assert bright_sum_pmf(params, 5).mean() == pytest.approx(5 * (0.558 + detector.mean()), rel=1e-9)

    def test_sum_length_checked(self, default_params):
        with pytest.raises(InvalidParameterError):
            bright_sum_pmf(default_params, 0)
        with pytest.raises(InvalidParameterError):
            dark_sum_pmf_with_decay(default_params, 201)

    def test_dark_sum_is_normalized(self, default_params):
        assert dark_sum_pmf_with_decay(default_params, 200).total() == pytest.approx(1.0, abs=1e-6)

    def test_no_decay_limit(self):
        params = ReadoutParams.defaults(shelf_lifetime=1e9 * 420e-6)
        pmf = dark_sum_pmf_with_decay(params, 42)
        expected = poisson_pmf(42 * 0.00442, n_max=pmf.n_max)
        assert np.allclose(pmf.probs, _padded(expected.probs, pmf.probs.size), atol=1e-6)

    def test_tail_mass_matches_direct_integration(self, default_params):
        N, n_c = 42, 5.5
        t_b, tau = N * 10e-6, default_params.shelf_lifetime
        stay = (1 - t_b / tau) * stats.poisson.sf(5, N * default_params.background_mean)
        decayed, _ = integrate.quad(
            lambda t: stats.poisson.sf(5, 442 * t + 55800 * (t_b - t)) / tau, 0, t_b, epsabs=1e-14, epsrel=1e-10,
        )
        tail = dark_sum_pmf_with_decay(default_params, N).tail_mass(n_c)
        assert tail == pytest.approx(stay + decayed, rel=1e-3)
        assert 1e-4 < tail < 3.2e-4

    def test_switch_mode_close_to_exact(self, default_params):
        exact = dark_sum_pmf_with_decay(default_params, 42, mode='exact').tail_mass(5.5)
        switch = dark_sum_pmf_with_decay(default_params, 42, mode='switch').tail_mass(5.5)
        assert switch == pytest.approx(exact, rel=0.1)

    def test_bad_mode_and_nodes(self, default_params):
        with pytest.raises(InvalidParameterError):
            dark_sum_pmf_with_decay(default_params, 10, mode='midpoint')
        with pytest.raises(InvalidParameterError):
            dark_sum_pmf_with_decay(default_params, 10, nodes_per_sub_bin=4)


def test_synthetic_detector_records():
    records = synthetic_detector_records(np.random.default_rng(0), 50_000)
    assert records.shape == (50_000,)
    assert records.min() >= 0
    assert np.issubdtype(records.dtype, np.integer)
