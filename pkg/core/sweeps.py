"""
Error statistics, threshold optimization and readout-time sweeps.

Produces the error-versus-bin-time curves for the threshold and maximum
likelihood methods, the adaptive error-versus-mean-readout-time trade-off,
and the collection-efficiency study of the asymptotic error.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from classifiers import ClassifierSpec, Label
from distributions import (
    DEFAULT_DETECTOR_DARK_RATE,
    DEFAULT_EFFICIENCY,
    ReadoutParams,
    bright_sum_pmf,
    dark_sum_pmf_with_decay,
)
from errors import InvalidParameterError
from tracesim import DecayMode, LabelTally, TrialOutcomeTally, run_trials_multi

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    'x_name', 'x_value', 'method', 'eps', 'eps_lo95', 'eps_hi95', 'eps_B', 'eps_D',
    'mean_ta_s', 'mean_ta_bright_s', 'mean_ta_dark_s', 'n_trials',
]

QUANTILE_TAIL = 1e-12
ASYMPTOTE_FRACTION = 0.2


def wilson_interval(errors: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    """
    Wilson score interval for a binomial proportion.

    Args:
        errors: Number of misclassified trials
        trials: Number of trials
        confidence: Two-sided confidence level

    Returns:
        Tuple of (lower, upper) bounds within [0, 1]
    """
    if trials <= 0:
        raise InvalidParameterError("Wilson interval needs at least one trial")
    z = stats.norm.ppf(0.5 + confidence / 2)
    p_hat = errors / trials
    denominator = 1 + z ** 2 / trials
    center = (p_hat + z ** 2 / (2 * trials)) / denominator
    margin = (z / denominator) * math.sqrt(p_hat * (1 - p_hat) / trials + z ** 2 / (4 * trials ** 2))
    return max(0.0, center - margin), min(1.0, center + margin)


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    @property
    def half_width(self) -> float:
        return (self.upper - self.lower) / 2


@dataclass(frozen=True)
class ReadoutTimeStats:
    mean: float
    std: float


@dataclass(frozen=True)
class ErrorStats:
    bright_trials: int
    bright_errors: int
    dark_trials: int
    dark_errors: int
    eps_B: float
    eps_D: float
    eps: float
    eps_B_68: Interval
    eps_B_95: Interval
    eps_D_68: Interval
    eps_D_95: Interval
    eps_68: Interval
    eps_95: Interval
    ta_bright: ReadoutTimeStats
    ta_dark: ReadoutTimeStats
    ta_overall: ReadoutTimeStats

    @property
    def n_trials(self) -> int:
        return self.bright_trials + self.dark_trials


def _time_stats(sub_bins: int, sub_bins_sq: int, trials: int, t_s: float) -> ReadoutTimeStats:
    mean = sub_bins / trials
    variance = max(sub_bins_sq / trials - mean ** 2, 0.0)
    return ReadoutTimeStats(mean * t_s, math.sqrt(variance) * t_s)


def _average_interval(bright: LabelTally, dark: LabelTally, confidence: float) -> Interval:
    # Equal trial counts make eps a pooled proportion; otherwise average the bounds.
    if bright.trials == dark.trials:
        return Interval(*wilson_interval(bright.errors + dark.errors, bright.trials + dark.trials, confidence))
    lo_b, hi_b = wilson_interval(bright.errors, bright.trials, confidence)
    lo_d, hi_d = wilson_interval(dark.errors, dark.trials, confidence)
    return Interval((lo_b + lo_d) / 2, (hi_b + hi_d) / 2)


def error_stats(tally: TrialOutcomeTally) -> ErrorStats:
    """
    Point estimates and Wilson intervals from a trial tally.

    Args:
        tally: Outcome tally with at least one trial per label

    Returns:
        ErrorStats with eps = (eps_B + eps_D) / 2
    """
    bright, dark = tally.bright, tally.dark
    for label, part in ((Label.BRIGHT, bright), (Label.DARK, dark)):
        if part.trials < 1:
            raise InvalidParameterError(f"no {label.value} trials in tally")
    eps_B = bright.errors / bright.trials
    eps_D = dark.errors / dark.trials
    t_s = tally.sub_bin_duration
    return ErrorStats(
        bright_trials=bright.trials,
        bright_errors=bright.errors,
        dark_trials=dark.trials,
        dark_errors=dark.errors,
        eps_B=eps_B,
        eps_D=eps_D,
        eps=(eps_B + eps_D) / 2,
        eps_B_68=Interval(*wilson_interval(bright.errors, bright.trials, 0.68)),
        eps_B_95=Interval(*wilson_interval(bright.errors, bright.trials, 0.95)),
        eps_D_68=Interval(*wilson_interval(dark.errors, dark.trials, 0.68)),
        eps_D_95=Interval(*wilson_interval(dark.errors, dark.trials, 0.95)),
        eps_68=_average_interval(bright, dark, 0.68),
        eps_95=_average_interval(bright, dark, 0.95),
        ta_bright=_time_stats(bright.sub_bins, bright.sub_bins_sq, bright.trials, t_s),
        ta_dark=_time_stats(dark.sub_bins, dark.sub_bins_sq, dark.trials, t_s),
        ta_overall=_time_stats(
            bright.sub_bins + dark.sub_bins,
            bright.sub_bins_sq + dark.sub_bins_sq,
            bright.trials + dark.trials,
            t_s,
        ),
    )


@dataclass
class SweepRecord:
    """
    One point of a sweep.

    Monte Carlo points carry ErrorStats; analytic points carry only the error
    estimates and a fixed readout time.
    """

    x_name: str
    x_value: float
    method: str
    eps: float
    eps_B: float
    eps_D: float
    stats: Optional[ErrorStats] = None
    readout_time: Optional[float] = None
    derived: Dict[str, float] = field(default_factory=dict)
    curve: List['SweepRecord'] = field(default_factory=list, repr=False)

    @classmethod
    def from_stats(cls, x_name: str, x_value: float, method: str, stats: ErrorStats, **derived) -> 'SweepRecord':
        return cls(x_name, float(x_value), method, stats.eps, stats.eps_B, stats.eps_D, stats=stats, derived=derived)

    def to_row(self) -> Dict[str, Any]:
        row = {
            'x_name': self.x_name,
            'x_value': self.x_value,
            'method': self.method,
            'eps': self.eps,
            'eps_lo95': np.nan,
            'eps_hi95': np.nan,
            'eps_B': self.eps_B,
            'eps_D': self.eps_D,
            'mean_ta_s': self.readout_time if self.readout_time is not None else np.nan,
            'mean_ta_bright_s': self.readout_time if self.readout_time is not None else np.nan,
            'mean_ta_dark_s': self.readout_time if self.readout_time is not None else np.nan,
            'n_trials': 0,
        }
        if self.stats is not None:
            row.update({
                'eps_lo95': self.stats.eps_95.lower,
                'eps_hi95': self.stats.eps_95.upper,
                'mean_ta_s': self.stats.ta_overall.mean,
                'mean_ta_bright_s': self.stats.ta_bright.mean,
                'mean_ta_dark_s': self.stats.ta_dark.mean,
                'n_trials': self.stats.n_trials,
            })
        row.update(self.derived)
        return row


def records_to_frame(records: Sequence[SweepRecord]) -> pd.DataFrame:
    """Sweep records as a DataFrame in the documented CSV column order."""
    rows = [record.to_row() for record in records]
    frame = pd.DataFrame(rows)
    extra = [c for c in frame.columns if c not in SWEEP_COLUMNS]
    return frame.reindex(columns=SWEEP_COLUMNS + extra)


def _sorted_unique(values: Iterable, name: str) -> List:
    values = sorted(set(values))
    if not values:
        raise InvalidParameterError(f"{name} must not be empty")
    return values


def _check_sub_bin_list(params: ReadoutParams, N_list: Iterable[int]) -> List[int]:
    N_list = _sorted_unique((int(n) for n in N_list), 'N list')
    if N_list[0] < 1 or N_list[-1] > params.sub_bin_count:
        raise InvalidParameterError(f"N values must lie within 1..{params.sub_bin_count}")
    return N_list


@dataclass(frozen=True)
class ThresholdOptimum:
    n_c: float
    N: int
    eps: float
    eps_B: float
    eps_D: float


def _threshold_errors(params: ReadoutParams, N: int, decay_mode: str):
    """eps_B, eps_D for every half-integer threshold 0.5 .. quantile + 0.5."""
    bright = bright_sum_pmf(params, N).probs
    dark = dark_sum_pmf_with_decay(params, N, mode=decay_mode).probs
    bright_cdf = np.cumsum(bright)
    last = int(np.searchsorted(bright_cdf, 1.0 - QUANTILE_TAIL))
    last = min(max(last, 0), bright.size - 1)
    k = np.arange(last + 1)
    # Tail sums accumulated from the top keep small dark tails accurate.
    dark_tail = np.concatenate([np.cumsum(dark[::-1])[::-1], [0.0]])
    eps_B = bright_cdf[k]
    eps_D = dark_tail[np.minimum(k + 1, dark.size)]
    return k + 0.5, eps_B, eps_D


def analytic_threshold_error(params: ReadoutParams, N: int, n_c: float, decay_mode: str = 'exact') -> tuple:
    """
    Exact threshold-method errors from the summed-count distributions.

    Returns:
        Tuple of (eps_B, eps_D, eps)
    """
    eps_B = bright_sum_pmf(params, N).cdf(int(math.floor(n_c)))
    eps_D = dark_sum_pmf_with_decay(params, N, mode=decay_mode).tail_mass(n_c)
    return eps_B, eps_D, (eps_B + eps_D) / 2


def _best_threshold(params: ReadoutParams, N: int, decay_mode: str) -> ThresholdOptimum:
    thresholds, eps_B, eps_D = _threshold_errors(params, N, decay_mode)
    eps = (eps_B + eps_D) / 2
    i = int(np.argmin(eps))
    return ThresholdOptimum(float(thresholds[i]), N, float(eps[i]), float(eps_B[i]), float(eps_D[i]))


def optimize_threshold(params: ReadoutParams, N_range: Iterable[int], decay_mode: str = 'exact') -> ThresholdOptimum:
    """
    Jointly optimize the threshold and the number of summed sub-bins.

    Thresholds are scanned from 0.5 up to the 1 - 1e-12 quantile of the
    bright sum. Ties go to the smaller N, then the smaller threshold.

    Args:
        params: Readout configuration
        N_range: Candidate numbers of sub-bins
        decay_mode: Dark-sum decay model, 'exact' or 'switch'

    Returns:
        ThresholdOptimum (n_c*, N*, eps*)
    """
    N_list = _check_sub_bin_list(params, N_range)
    best = None
    for N in N_list:
        candidate = _best_threshold(params, N, decay_mode)
        if best is None or candidate.eps < best.eps:
            best = candidate
    logger.info(f"Optimal threshold n_c={best.n_c} at N={best.N}: eps={best.eps:.3e}")
    return best


def threshold_error_curve(params: ReadoutParams, N_list: Iterable[int], decay_mode: str = 'exact') -> List[SweepRecord]:
    """Analytic threshold-method error versus bin time, n_c optimized per point."""
    records = []
    for N in _check_sub_bin_list(params, N_list):
        best = _best_threshold(params, N, decay_mode)
        t_b = N * params.sub_bin_duration
        records.append(SweepRecord(
            't_b', t_b, 'threshold', best.eps, best.eps_B, best.eps_D,
            readout_time=t_b, derived={'n_c': best.n_c},
        ))
    return records


def sweep_bin_time(params: ReadoutParams, method: str, N_list: Iterable[int], n_trials: int = 0,
                   master_seed: int = 0, include_decay: bool = True, analytic: bool = True,
                   decay_mode: DecayMode = DecayMode.EXACT_TIME, workers: int = 1) -> List[SweepRecord]:
    """
    Error versus fixed bin time for the threshold or maximum-likelihood method.

    Args:
        params: Readout configuration; traces span params.sub_bin_count sub-bins
        method: 'threshold' (n_c optimized per bin time) or 'ml'
        N_list: Bin lengths in sub-bins
        n_trials: Trials per label for Monte Carlo points
        master_seed: Campaign seed
        include_decay: Decay-marginalized likelihood for 'ml'
        analytic: Use the exact analytic path for 'threshold'
        decay_mode: Dark-trace decay model for simulation
        workers: Worker processes

    Returns:
        SweepRecords sorted by t_b
    """
    N_list = _check_sub_bin_list(params, N_list)
    t_s = params.sub_bin_duration
    if method == 'threshold':
        curve = threshold_error_curve(params, N_list, DecayMode.parse(decay_mode).value)
        if analytic:
            return curve
        specs = [ClassifierSpec('threshold', N=N, n_c=record.derived['n_c']) for N, record in zip(N_list, curve)]
    elif method == 'ml':
        specs = [ClassifierSpec('ml', N=N, include_decay=include_decay) for N in N_list]
    else:
        raise InvalidParameterError(f"bin-time sweep supports 'threshold' or 'ml', got {method!r}")
    if n_trials < 1:
        raise InvalidParameterError("Monte Carlo sweep needs n_trials >= 1")

    tallies = run_trials_multi(params, specs, n_trials, master_seed, decay_mode, workers)
    records = []
    for N, spec, tally in zip(N_list, specs, tallies):
        extra = {'n_c': spec.n_c} if spec.n_c is not None else {}
        records.append(SweepRecord.from_stats('t_b', N * t_s, method, error_stats(tally), **extra))
    return records


def default_ec_grid(points_per_decade: int = 2) -> List[float]:
    """Logarithmic e_c grid over [1e-6, 1e-1]."""
    return list(np.logspace(-6, -1, 5 * points_per_decade + 1))


def sweep_adaptive(params: ReadoutParams, e_c_list: Iterable[float], t_c: float, n_trials: int,
                   master_seed: int, include_decay: bool = False,
                   decay_mode: DecayMode = DecayMode.EXACT_TIME, workers: int = 1) -> List[SweepRecord]:
    """
    Adaptive readout error against mean readout time, one point per e_c.

    All e_c values are evaluated on the same simulated traces.
    """
    e_c_list = _sorted_unique((float(e) for e in e_c_list), 'e_c list')
    if e_c_list[0] <= 0 or e_c_list[-1] >= 0.5:
        raise InvalidParameterError("e_c values must lie in (0, 0.5)")
    specs = [ClassifierSpec('adaptive', e_c=e_c, t_c=t_c, include_decay=include_decay) for e_c in e_c_list]
    tallies = run_trials_multi(params, specs, n_trials, master_seed, decay_mode, workers)
    return [
        SweepRecord.from_stats('e_c', e_c, 'adaptive', error_stats(tally))
        for e_c, tally in zip(e_c_list, tallies)
    ]


def asymptote(records: Sequence[SweepRecord], fraction: float = ASYMPTOTE_FRACTION) -> float:
    """Plateau error: mean eps over the final ``fraction`` of the grid."""
    if not records:
        raise InvalidParameterError("no records")
    count = max(1, int(math.ceil(len(records) * fraction)))
    return float(np.mean([r.eps for r in records[-count:]]))


def time_to_fraction(records: Sequence[SweepRecord], level: float) -> float:
    """First independent-variable value whose eps is at or below ``level``."""
    for record in records:
        if record.eps <= level:
            return record.x_value
    return math.nan


def sweep_efficiency(params_base: ReadoutParams, eta_list: Iterable[float], n_trials: int, master_seed: int,
                     N_list: Optional[Iterable[int]] = None, eta0: float = DEFAULT_EFFICIENCY,
                     detector_dark_rate: float = DEFAULT_DETECTOR_DARK_RATE, include_decay: bool = True,
                     decay_mode: DecayMode = DecayMode.EXACT_TIME, workers: int = 1) -> List[SweepRecord]:
    """
    Asymptotic ML error and time to reach 1.1 times it, versus collection efficiency.

    Each returned record is the last point of that efficiency's ML curve, with
    ``derived`` holding eps_inf and t_1p1_s and ``curve`` the full bin-time sweep.
    """
    eta_list = _sorted_unique((float(e) for e in eta_list), 'efficiency list')
    if eta_list[0] <= 0:
        raise InvalidParameterError("efficiencies must be > 0")
    if N_list is None:
        N_list = range(1, params_base.sub_bin_count + 1)
    N_list = _check_sub_bin_list(params_base, N_list)

    records = []
    for eta in eta_list:
        params = params_base.with_efficiency(eta, eta0, detector_dark_rate)
        curve = sweep_bin_time(params, 'ml', N_list, n_trials, master_seed, include_decay=include_decay,
                               decay_mode=decay_mode, workers=workers)
        eps_inf = asymptote(curve)
        t_11 = time_to_fraction(curve, 1.1 * eps_inf)
        if not math.isnan(t_11) and t_11 > curve[-1].x_value / 2:
            logger.warning(
                f"eta={eta:g}: t_1.1={t_11:g} s lies beyond half the grid; "
                f"extend the bin-time grid to reach the plateau"
            )
        last = curve[-1]
        records.append(SweepRecord(
            'eta', eta, 'ml', last.eps, last.eps_B, last.eps_D, stats=last.stats,
            derived={'eps_inf': eps_inf, 't_1p1_s': t_11}, curve=curve,
        ))
        logger.info(f"eta={eta:g}: eps_inf={eps_inf:.3e}, t_1.1={t_11:g} s")
    return records


def bright_fast_operating_point(records: Sequence[SweepRecord], eps_B_target: float = 1e-5) -> Optional[SweepRecord]:
    """
    Adaptive point with the shortest bright readout time meeting an eps_B target.

    Returns None when no record meets the target.
    """
    eligible = [r for r in records if r.stats is not None and r.eps_B <= eps_B_target]
    if not eligible:
        return None
    return min(eligible, key=lambda r: r.stats.ta_bright.mean)
