import math

import numpy as np
import pytest

from classifiers import (
    AdaptiveReadout,
    ClassifierSpec,
    Label,
    LikelihoodCache,
    ReadoutModels,
    adaptive_batch,
    adaptive_classify,
    bayes_error,
    classify_batch,
    cumulative_log_likelihoods,
    log_likelihoods,
    log_likelihoods_direct,
    ml_classify,
    sub_bins_for_time,
    threshold_classify,
    verdict_from_likelihoods,
)
from distributions import ReadoutParams, poisson_pmf
from errors import InsufficientDataError, InvalidParameterError
from tracesim import CountTrace

BRIGHT_TRACE = [0, 0, 0, 1, 1, 0, 1, 3, 0, 1, 0, 2]


@pytest.fixture
def models(default_params) -> ReadoutModels:
    return ReadoutModels.from_params(default_params)


class TestBayesError:
    def test_equal_likelihoods(self):
        assert bayes_error(-3.0, -3.0) == pytest.approx(0.5)

    def test_known_ratio(self):
        assert bayes_error(0.0, -math.log(99.0)) == pytest.approx(0.01)
        assert bayes_error(-math.log(99.0), 0.0) == pytest.approx(0.01)

    def test_large_separation_does_not_overflow(self):
        assert bayes_error(0.0, -1e6) == 0.0

    def test_vectorized(self):
        errors = bayes_error(np.array([0.0, 0.0]), np.array([0.0, -math.log(3.0)]))
        assert errors == pytest.approx([0.5, 0.25])

    @pytest.mark.parametrize('offset', [-812.5, 0.0, 64.0, 1e4])
    def test_verdict_ignores_common_offset(self, offset):
        for log_pB, log_pD in ((-3.0, -4.25), (-7.5, -2.0), (-1.0, -1.0)):
            base = verdict_from_likelihoods(log_pB, log_pD, 5, 10e-6)
            moved = verdict_from_likelihoods(log_pB + offset, log_pD + offset, 5, 10e-6)
            assert moved.label is base.label
            assert moved.posterior_error == pytest.approx(base.posterior_error, rel=1e-9)


class TestLabel:
    def test_parse_and_code(self):
        assert Label.parse('bright') is Label.BRIGHT
        assert Label.parse(' Dark ') is Label.DARK
        assert Label.BRIGHT.code == 0 and Label.DARK.code == 1

    def test_unknown(self):
        with pytest.raises(InvalidParameterError):
            Label.parse('grey')


class TestLikelihoodRecursion:
    def test_recursion_matches_direct_sum(self):
        rng = np.random.default_rng(2024)
        t_s = 10e-6
        checked = 0
        for _ in range(100):
            n = int(rng.integers(1, 13))
            tau = n * t_s / rng.uniform(1e-4, 0.5)
            bright = poisson_pmf(rng.uniform(0.2, 3.0))
            dark = poisson_pmf(rng.uniform(0.01, 0.2))
            models = ReadoutModels(bright, dark, t_s, tau)
            counts = rng.integers(0, 7, size=(100, n))
            log_pB, log_pD = cumulative_log_likelihoods(counts, models, include_decay=True)
            for row in range(counts.shape[0]):
                direct_b, direct_d = log_likelihoods_direct(counts[row], bright, dark, t_s, tau)
                assert log_pB[row, -1] == pytest.approx(direct_b, abs=1e-9)
                assert log_pD[row, -1] == pytest.approx(direct_d, abs=1e-9)
                checked += 1
        assert checked == 10_000

    def test_every_prefix_matches(self, models):
        counts = np.array([BRIGHT_TRACE])
        log_pB, log_pD = cumulative_log_likelihoods(counts, models, include_decay=True)
        for k in range(1, len(BRIGHT_TRACE) + 1):
            direct_b, direct_d = log_likelihoods_direct(
                BRIGHT_TRACE[:k], models.bright, models.dark, models.sub_bin_duration, models.shelf_lifetime,
            )
            assert log_pB[0, k - 1] == pytest.approx(direct_b, abs=1e-9)
            assert log_pD[0, k - 1] == pytest.approx(direct_d, abs=1e-9)

    def test_without_decay_is_product(self, models):
        log_pB, log_pD = log_likelihoods(BRIGHT_TRACE, models.bright, models.dark, 10e-6, 1.168, include_decay=False)
        assert log_pB == pytest.approx(float(np.sum(models.bright.log_prob(BRIGHT_TRACE))))
        assert log_pD == pytest.approx(float(np.sum(models.dark.log_prob(BRIGHT_TRACE))))

    def test_decay_raises_dark_likelihood_of_late_brightening(self, models):
        trace = [0] * 30 + [1, 0, 2, 1, 1, 0, 1, 1, 0, 2]
        _, with_decay = log_likelihoods(trace, models.bright, models.dark, 10e-6, 1.168, include_decay=True)
        _, without = log_likelihoods(trace, models.bright, models.dark, 10e-6, 1.168, include_decay=False)
        assert with_decay > without + 10

    def test_order_is_irrelevant_without_decay(self, models):
        trace = [0, 3, 0, 0, 1, 0, 2, 0, 0, 0, 1, 0, 0, 1]
        shuffled = np.random.default_rng(3).permutation(trace)
        first, second = (ml_classify(t, models, include_decay=False) for t in (trace, shuffled))
        assert second.label is first.label
        assert second.log_pB == pytest.approx(first.log_pB, rel=1e-12)
        assert second.log_pD == pytest.approx(first.log_pD, rel=1e-12)
        assert threshold_classify(shuffled, 14, 5.5).label is threshold_classify(trace, 14, 5.5).label

    def test_order_flips_seventeen_photon_pair_with_decay(self, models):
        uniform = [0] * 60
        for i in range(17):
            uniform[3 * i] = 1
        end_burst = [0] * 50 + [2, 2, 2, 2, 2, 2, 2, 1, 1, 1]
        assert sum(uniform) == sum(end_burst) == 17

        plain = [ml_classify(t, models, include_decay=False) for t in (uniform, end_burst)]
        assert all(v.label is Label.BRIGHT for v in plain)
        assert plain[0].log_pB - plain[0].log_pD == pytest.approx(plain[1].log_pB - plain[1].log_pD)

        spread, burst = (ml_classify(t, models, include_decay=True) for t in (uniform, end_burst))
        # A decay just before the first photon caps the ratio near -ln(t_s / tau) = 11.67.
        assert 10.0 < spread.log_pB - spread.log_pD < 11.7
        assert spread.label is Label.BRIGHT
        assert burst.log_pB - burst.log_pD < -10.0
        assert burst.label is Label.DARK

    def test_long_trace_stays_finite(self, models):
        counts = np.random.default_rng(1).poisson(0.558, size=(2, 10_000))
        log_pB, log_pD = cumulative_log_likelihoods(counts, models, include_decay=True)
        assert np.all(np.isfinite(log_pB)) and np.all(np.isfinite(log_pD))
        assert np.all(log_pB[:, -1] < -1000)

    def test_rejects_bin_beyond_lifetime(self):
        models = ReadoutModels(poisson_pmf(0.5), poisson_pmf(0.01), 10e-6, 1e-4)
        with pytest.raises(InvalidParameterError):
            cumulative_log_likelihoods(np.zeros((1, 20), dtype=int), models, include_decay=True)


class TestClassifierSpec:
    def test_defaults(self):
        assert ClassifierSpec('ml', N=40).include_decay is True
        assert ClassifierSpec('adaptive', e_c=1e-4, t_c=500e-6).include_decay is False

    def test_threshold_needs_half_integer(self):
        with pytest.raises(InvalidParameterError):
            ClassifierSpec('threshold', N=42, n_c=5)
        assert ClassifierSpec('threshold', N=42, n_c=5.5).n_c == 5.5

    @pytest.mark.parametrize('kwargs', [
        {'method': 'ml'},
        {'method': 'adaptive', 'e_c': 0.5, 't_c': 1e-4},
        {'method': 'adaptive', 'e_c': 1e-4, 't_c': 0.0},
        {'method': 'majority', 'N': 3},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidParameterError):
            ClassifierSpec(**kwargs)

    def test_from_mapping_accepts_strings(self):
        spec = ClassifierSpec.from_mapping({'method': 'Threshold', 'N': '42', 'n_c': '5.5', 'e_c': ''})
        assert spec == ClassifierSpec('threshold', N=42, n_c=5.5)
        assert spec.describe() == 'threshold(N=42, n_c=5.5)'

    def test_constant_label(self):
        spec = ClassifierSpec.from_mapping({'method': 'constant', 'label': 'dark'})
        assert spec.label is Label.DARK
        assert spec.describe() == 'constant(Dark)'

    def test_sub_bins_needed(self):
        assert ClassifierSpec('adaptive', e_c=1e-4, t_c=500e-6).sub_bins_needed(10e-6) == 50
        assert ClassifierSpec('ml', N=42).sub_bins_needed(10e-6) == 42


def test_sub_bins_for_time():
    assert sub_bins_for_time(500e-6, 10e-6) == 50
    with pytest.raises(InvalidParameterError):
        sub_bins_for_time(505e-6, 10e-6)


class TestThreshold:
    def test_counts_above_threshold_are_bright(self):
        trace = CountTrace([2, 1, 0, 3, 0], 10e-6)
        verdict = threshold_classify(trace, N=4, n_c=5.5)
        assert verdict.label is Label.BRIGHT
        assert verdict.sub_bins_used == 4
        assert verdict.readout_time == pytest.approx(40e-6)
        assert verdict.posterior_error is None

    def test_counts_at_or_below_threshold_are_dark(self):
        assert threshold_classify([2, 1, 0, 2, 9], N=4, n_c=5.5).label is Label.DARK

    def test_readout_time_of_plain_counts(self):
        assert threshold_classify([3, 4, 0], N=2, n_c=5.5).readout_time == pytest.approx(20e-6)
        verdict = threshold_classify([3, 4, 0], N=2, n_c=5.5, sub_bin_duration=5e-6)
        assert verdict.label is Label.BRIGHT
        assert verdict.readout_time == pytest.approx(10e-6)

    def test_trace_too_short(self):
        with pytest.raises(InvalidParameterError):
            threshold_classify([1, 2], N=4, n_c=0.5)


class TestMaximumLikelihood:
    def test_bright_trace(self, models):
        verdict = ml_classify(BRIGHT_TRACE, models)
        assert verdict.label is Label.BRIGHT
        assert verdict.posterior_error < 1e-6
        assert verdict.sub_bins_used == len(BRIGHT_TRACE)

    def test_dark_trace(self, models):
        verdict = ml_classify([0] * 200, models)
        assert verdict.label is Label.DARK
        assert verdict.readout_time == pytest.approx(2e-3)

    def test_uses_first_n_sub_bins(self, models):
        verdict = ml_classify([0] * 20 + [5] * 20, models, include_decay=False, N=20)
        assert verdict.label is Label.DARK
        assert verdict.sub_bins_used == 20

    def test_tie_goes_to_bright(self):
        pmf = poisson_pmf(0.3)
        models = ReadoutModels(pmf, pmf, 10e-6, 1.168)
        verdict = ml_classify([0, 1, 0], models, include_decay=False)
        assert verdict.label is Label.BRIGHT
        assert verdict.posterior_error == pytest.approx(0.5)

    def test_models_need_bright_above_dark(self):
        with pytest.raises(InvalidParameterError):
            ReadoutModels.from_params(ReadoutParams.defaults(dark_rate=55800.0))


class TestAdaptive:
    def test_bright_stream_stops_early(self, models):
        verdict = adaptive_classify(BRIGHT_TRACE, models, e_c=1e-4, t_c=500e-6)
        assert verdict.label is Label.BRIGHT
        assert verdict.posterior_error < 1e-4
        assert verdict.sub_bins_used <= 8

    def test_dark_stream_stop_point(self, models):
        # Each empty sub-bin adds R_B t_s - R_D t_s = 0.55358 to the log-likelihood ratio.
        verdict = adaptive_classify([0] * 50, models, e_c=1e-4, t_c=500e-6)
        assert verdict.label is Label.DARK
        assert verdict.sub_bins_used == 17
        assert verdict.readout_time == pytest.approx(170e-6)

    def test_stream_not_read_past_stop(self, models):
        stream = iter([0] * 17 + [99, 98])
        adaptive_classify(stream, models, e_c=1e-4, t_c=500e-6)
        assert next(stream) == 99

    def test_zero_cutoff_reads_to_tc(self, models):
        verdict = adaptive_classify([0] * 10, models, e_c=0.0, t_c=100e-6)
        assert verdict.sub_bins_used == 10

    def test_zero_cutoff_matches_plain_likelihood(self, models):
        rng = np.random.default_rng(11)
        counts = np.vstack([rng.poisson(0.558, size=(100, 30)), rng.poisson(0.00442, size=(100, 30))])
        counts[100:, 20:] = rng.poisson(0.558, size=(100, 10))
        for row in counts:
            adaptive = adaptive_classify(row, models, e_c=0.0, t_c=300e-6)
            ml = ml_classify(row, models, include_decay=False)
            assert adaptive.label is ml.label
            assert adaptive.sub_bins_used == ml.sub_bins_used == 30
            assert adaptive.log_pB == pytest.approx(ml.log_pB, rel=1e-9)
            assert adaptive.log_pD == pytest.approx(ml.log_pD, rel=1e-9)
            assert adaptive.posterior_error == pytest.approx(ml.posterior_error, rel=1e-6, abs=1e-300)

    def test_three_counts_in_first_sub_bin(self, models):
        # 3 ln(R_B / R_D) - (R_B - R_D) t_s = 13.96 exceeds ln(1 / e_c) = 9.21.
        stream = iter([3] + [0] * 49)
        verdict = adaptive_classify(stream, models, e_c=1e-4, t_c=500e-6)
        assert verdict.label is Label.BRIGHT
        assert verdict.sub_bins_used == 1
        assert verdict.readout_time == pytest.approx(10e-6)
        assert next(stream) == 0

    def test_short_stream(self, models):
        with pytest.raises(InsufficientDataError):
            adaptive_classify([0] * 5, models, e_c=1e-4, t_c=500e-6)

    def test_incremental_object(self, models):
        readout = AdaptiveReadout(models, e_c=1e-4, cutoff_sub_bins=3)
        with pytest.raises(InsufficientDataError):
            readout.verdict()
        for count in (0, 0, 0):
            readout.update(count)
        assert readout.done
        assert readout.label is Label.DARK
        with pytest.raises(InvalidParameterError):
            readout.update(0)

    @pytest.mark.parametrize('include_decay', [False, True])
    def test_batch_agrees_with_single_trace(self, models, include_decay):
        counts = np.random.default_rng(7).poisson(0.05, size=(50, 50))
        log_pB, log_pD = cumulative_log_likelihoods(counts, models, include_decay)
        batch = adaptive_batch(log_pB, log_pD, 1e-3, 50)
        for row in range(counts.shape[0]):
            verdict = adaptive_classify(counts[row], models, 1e-3, 500e-6, include_decay)
            assert verdict.sub_bins_used == batch.sub_bins_used[row]
            assert (verdict.label is Label.BRIGHT) == bool(batch.is_bright[row])
            assert verdict.posterior_error == pytest.approx(batch.posterior_error[row], rel=1e-9, abs=1e-300)


class TestClassifyBatch:
    def test_methods_share_a_cache(self, models):
        counts = np.random.default_rng(3).poisson(0.3, size=(20, 30))
        cache = LikelihoodCache(counts, models)
        ml = classify_batch(counts, ClassifierSpec('ml', N=30), models, cache)
        adaptive = classify_batch(counts, ClassifierSpec('adaptive', e_c=1e-3, t_c=300e-6, include_decay=True),
                                  models, cache)
        assert len(cache._cache) == 1
        assert len(ml) == len(adaptive) == 20
        assert np.all(adaptive.sub_bins_used <= 30)

    def test_constant(self, models):
        batch = classify_batch(np.zeros((4, 3), dtype=int), ClassifierSpec('constant', label=Label.DARK), models)
        assert not batch.is_bright.any()

    def test_threshold_matches_single(self, models):
        counts = np.random.default_rng(9).poisson(0.2, size=(10, 42))
        batch = classify_batch(counts, ClassifierSpec('threshold', N=42, n_c=5.5), models)
        for row in range(10):
            single = threshold_classify(counts[row], 42, 5.5)
            assert (single.label is Label.BRIGHT) == bool(batch.is_bright[row])
