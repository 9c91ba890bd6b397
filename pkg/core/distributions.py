"""
Photon-count probability mass functions.

Poisson models for the bright and dark sub-bin distributions, ingestion of
empirical detector dark-count histograms, discrete convolution, and the
analytic summed-count distributions used for threshold analysis, including
the dark distribution that accounts for shelf decay during the bin.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

import numpy as np
from scipy import stats

from errors import InvalidParameterError, ParseError

logger = logging.getLogger(__name__)

# Smallest probability ever reported for an observed count.
PROB_FLOOR = 1e-300
LOG_PROB_FLOOR = math.log(PROB_FLOOR)

MIN_SUPPORT = 50
SUM_TOLERANCE_LOW = 1e-6
SUM_TOLERANCE_HIGH = 1e-9

# Quadrature nodes per sub-bin for the decay-time mixture.
DEFAULT_QUADRATURE_NODES = 16

DEFAULT_BRIGHT_RATE = 55800.0
DEFAULT_DARK_RATE = 442.0
DEFAULT_DETECTOR_DARK_RATE = 8.2
DEFAULT_SHELF_LIFETIME = 1.168
DEFAULT_SUB_BIN_DURATION = 10e-6
DEFAULT_SUB_BIN_COUNT = 200
DEFAULT_EFFICIENCY = 0.19e-2

HistogramSource = Union[str, Path, Iterable[str]]


def default_support(mean: float) -> int:
    """Truncation point keeping the Poisson tail far below readout error levels."""
    return max(MIN_SUPPORT, int(math.ceil(mean + 10.0 * math.sqrt(mean))))


@dataclass(frozen=True, eq=False)
class CountPmf:
    """
    Truncated probability mass function over photon counts 0..n_max.

    ``poisson_mean`` is set when the PMF is an exact (truncated) Poisson, which
    lets counts beyond the support be scored with the closed form.
    """

    probs: np.ndarray
    poisson_mean: Optional[float] = None

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float).ravel()
        if probs.size == 0:
            raise InvalidParameterError("CountPmf needs at least one entry")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise InvalidParameterError("CountPmf entries must be finite and non-negative")
        total = probs.sum()
        if total < 1.0 - SUM_TOLERANCE_LOW or total > 1.0 + SUM_TOLERANCE_HIGH:
            raise InvalidParameterError(f"CountPmf entries sum to {total!r}, expected 1")
        probs.setflags(write=False)
        object.__setattr__(self, 'probs', probs)

    @property
    def n_max(self) -> int:
        return self.probs.size - 1

    def mean(self) -> float:
        return float(np.dot(np.arange(self.probs.size), self.probs))

    def variance(self) -> float:
        k = np.arange(self.probs.size)
        mu = self.mean()
        return float(np.dot((k - mu) ** 2, self.probs))

    def total(self) -> float:
        return float(self.probs.sum())

    def cdf(self, n: int) -> float:
        """Probability of observing at most ``n`` counts."""
        if n < 0:
            return 0.0
        return float(self.probs[: n + 1].sum())

    def tail_mass(self, n_c: float) -> float:
        """Probability of observing strictly more than ``n_c`` counts."""
        first = int(math.floor(n_c)) + 1
        if first <= 0:
            return self.total()
        return float(self.probs[first:].sum())

    @cached_property
    def _log_table(self) -> np.ndarray:
        with np.errstate(divide='ignore'):
            table = np.log(self.probs)
        return np.maximum(table, LOG_PROB_FLOOR)

    def log_prob(self, counts) -> np.ndarray:
        """
        Natural-log probability of each count, never -inf.

        Counts inside the support use the stored table. Counts beyond it use
        the Poisson closed form for Poisson PMFs, otherwise the probability
        floor.

        Args:
            counts: Integer count or array of counts

        Returns:
            Array of log-probabilities with the shape of ``counts``
        """
        counts = np.asarray(counts, dtype=np.int64)
        inside = counts <= self.n_max
        result = self._log_table[np.where(inside, counts, 0)]
        if not np.all(inside):
            outside = counts[~inside]
            if self.poisson_mean is not None:
                tail = stats.poisson.logpmf(outside, self.poisson_mean)
                tail = np.maximum(np.nan_to_num(tail, nan=LOG_PROB_FLOOR, neginf=LOG_PROB_FLOOR), LOG_PROB_FLOOR)
            else:
                tail = np.full(outside.shape, LOG_PROB_FLOOR)
            result = np.array(result, dtype=float)
            result[~inside] = tail
        return result

    def prob(self, counts) -> np.ndarray:
        return np.exp(self.log_prob(counts))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        """Draw counts by inverting the cumulative distribution."""
        cdf = np.cumsum(self.probs)
        u = rng.random(size) * cdf[-1]
        return np.minimum(np.searchsorted(cdf, u, side='right'), self.n_max)


@dataclass(frozen=True)
class ReadoutParams:
    """
    One readout configuration: count rates, shelf lifetime and sub-bin timing.

    Rates are in counts/s, times in seconds. ``dark_count_pmf`` is the
    per-sub-bin detector count distribution, already at ``sub_bin_duration``
    granularity.
    """

    bright_rate: float
    dark_rate: float
    shelf_lifetime: float
    sub_bin_duration: float
    sub_bin_count: int
    dark_count_pmf: Optional[CountPmf] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.dark_rate >= 0:
            raise InvalidParameterError(f"dark_rate must be >= 0, got {self.dark_rate}", field='dark_rate')
        # Equal rates are tolerated for degenerate simulations; classification
        # requires bright_rate > dark_rate (see classifiers.ReadoutModels).
        if not self.bright_rate >= self.dark_rate:
            raise InvalidParameterError(
                f"bright_rate ({self.bright_rate}) must exceed dark_rate ({self.dark_rate})", field='bright_rate'
            )
        if not self.shelf_lifetime > 0:
            raise InvalidParameterError(
                f"shelf_lifetime must be > 0, got {self.shelf_lifetime}", field='shelf_lifetime'
            )
        if not self.sub_bin_duration > 0:
            raise InvalidParameterError(
                f"sub_bin_duration must be > 0, got {self.sub_bin_duration}", field='sub_bin_duration'
            )
        if int(self.sub_bin_count) != self.sub_bin_count or self.sub_bin_count < 1:
            raise InvalidParameterError(
                f"sub_bin_count must be an integer >= 1, got {self.sub_bin_count}", field='sub_bin_count'
            )
        object.__setattr__(self, 'sub_bin_count', int(self.sub_bin_count))
        t_b = self.bin_time
        if t_b >= self.shelf_lifetime:
            raise InvalidParameterError(
                f"bin time {t_b:g} s must be shorter than the shelf lifetime {self.shelf_lifetime:g} s",
                field='shelf_lifetime',
            )
        if t_b > self.shelf_lifetime / 10:
            logger.warning(
                f"Bin time {t_b:g} s exceeds a tenth of the shelf lifetime; "
                f"the t_b << tau likelihood approximation degrades"
            )

    @property
    def bin_time(self) -> float:
        return self.sub_bin_count * self.sub_bin_duration

    @property
    def bright_mean(self) -> float:
        return self.bright_rate * self.sub_bin_duration

    @property
    def detector_mean(self) -> float:
        return self.dark_count_pmf.mean() if self.dark_count_pmf is not None else 0.0

    @property
    def background_mean(self) -> float:
        """
        Poisson part of the dark per-sub-bin mean.

        When a detector PMF is supplied its mean is already contained in
        ``dark_rate``, so it is removed here to avoid counting it twice.
        """
        rate = self.dark_rate
        if self.dark_count_pmf is not None:
            rate = max(rate - self.detector_mean / self.sub_bin_duration, 0.0)
        return rate * self.sub_bin_duration

    def with_sub_bins(self, sub_bin_count: int) -> 'ReadoutParams':
        return replace(self, sub_bin_count=sub_bin_count)

    def with_efficiency(self, eta: float, eta0: float = DEFAULT_EFFICIENCY,
                        detector_dark_rate: float = DEFAULT_DETECTOR_DARK_RATE) -> 'ReadoutParams':
        """
        Rescale to a different net collection efficiency.

        Fluorescence and scattered background light scale with ``eta/eta0``;
        the detector's own dark-count rate does not.
        """
        if not eta > 0 or not eta0 > 0:
            raise InvalidParameterError("collection efficiencies must be > 0")
        scale = eta / eta0
        fixed = min(detector_dark_rate, self.dark_rate)
        return replace(
            self,
            bright_rate=self.bright_rate * scale,
            dark_rate=fixed + (self.dark_rate - fixed) * scale,
        )

    @classmethod
    def defaults(cls, **overrides) -> 'ReadoutParams':
        values = dict(
            bright_rate=DEFAULT_BRIGHT_RATE,
            dark_rate=DEFAULT_DARK_RATE,
            shelf_lifetime=DEFAULT_SHELF_LIFETIME,
            sub_bin_duration=DEFAULT_SUB_BIN_DURATION,
            sub_bin_count=DEFAULT_SUB_BIN_COUNT,
        )
        values.update(overrides)
        return cls(**values)


def poisson_pmf(mean: float, n_max: Optional[int] = None) -> CountPmf:
    """
    Truncated Poisson distribution.

    Args:
        mean: Expected counts (>= 0)
        n_max: Optional truncation point (>= 1); defaults to
            max(50, ceil(mean + 10 sqrt(mean)))

    Returns:
        CountPmf with ``poisson_mean`` set
    """
    if not mean >= 0 or not math.isfinite(mean):
        raise InvalidParameterError(f"Poisson mean must be finite and >= 0, got {mean}")
    if n_max is not None and n_max < 1:
        raise InvalidParameterError(f"n_max must be >= 1, got {n_max}")
    if mean == 0:
        probs = np.zeros(1 if n_max is None else n_max + 1)
        probs[0] = 1.0
        return CountPmf(probs, poisson_mean=0.0)
    if n_max is None:
        n_max = default_support(mean)
    # logpmf goes through gammaln and stays accurate for large means.
    probs = np.exp(stats.poisson.logpmf(np.arange(n_max + 1), mean))
    return CountPmf(probs, poisson_mean=float(mean))


def convolve(a: CountPmf, b: CountPmf) -> CountPmf:
    """Distribution of the sum of two independent counts."""
    probs = np.convolve(a.probs, b.probs)
    total = probs.sum()
    if total > 1.0:
        probs = probs / total
    poisson_mean = None
    if a.poisson_mean is not None and b.poisson_mean is not None:
        poisson_mean = a.poisson_mean + b.poisson_mean
    return CountPmf(probs, poisson_mean=poisson_mean)


def convolve_power(pmf: CountPmf, times: int) -> CountPmf:
    """``times``-fold self-convolution by repeated squaring."""
    if times < 0:
        raise InvalidParameterError(f"convolution power must be >= 0, got {times}")
    result = CountPmf(np.array([1.0]), poisson_mean=0.0)
    base = pmf
    while times:
        if times & 1:
            result = convolve(result, base)
        times >>= 1
        if times:
            base = convolve(base, base)
    return result


def _read_lines(source: HistogramSource) -> Tuple[str, Iterable[str]]:
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            return str(path), path.read_text().splitlines()
        except OSError as e:
            raise ParseError(f"cannot read histogram file: {e}", source=str(path)) from e
    return '<records>', source


def parse_count_records(source: HistogramSource) -> np.ndarray:
    """
    Parse one non-negative decimal integer per line.

    Blank lines are skipped and lines starting with ``#`` are comments.
    Used for both empirical histograms and trace files.
    """
    name, lines = _read_lines(source)
    values = []
    for line_number, raw in enumerate(lines, start=1):
        line = str(raw).strip()
        if not line or line.startswith('#'):
            continue
        if not (line.isascii() and line.isdigit()):
            raise ParseError(f"expected a non-negative integer, got {line!r}", source=name, line_number=line_number)
        values.append(int(line))
    return np.array(values, dtype=np.int64)


def load_empirical_pmf(histogram_source: HistogramSource) -> CountPmf:
    """
    Build a PMF from observed per-interval counts.

    Args:
        histogram_source: Path to a text file or an iterable of lines,
            one observation per record

    Returns:
        Normalized CountPmf zero-padded up to the minimum support
    """
    records = parse_count_records(histogram_source)
    if records.size == 0:
        raise ParseError("histogram source contains no records")
    histogram = np.bincount(records).astype(float)
    probs = histogram / histogram.sum()
    mean = float(np.dot(np.arange(probs.size), probs))
    support = max(probs.size - 1, default_support(mean))
    padded = np.zeros(support + 1)
    padded[: probs.size] = probs
    logger.info(f"Loaded empirical PMF from {records.size} records, mean {mean:.4g}")
    return CountPmf(padded)


def save_empirical_histogram(records: Iterable[int], path: Union[str, Path], comment: Optional[str] = None) -> None:
    """Write counts in the one-integer-per-line histogram format."""
    lines = []
    if comment:
        lines.extend(f"# {c}" for c in comment.splitlines())
    lines.extend(str(int(r)) for r in records)
    Path(path).write_text('\n'.join(lines) + '\n')


def synthetic_detector_records(rng: np.random.Generator, n: int,
                               rate: float = DEFAULT_DETECTOR_DARK_RATE,
                               sub_bin_duration: float = DEFAULT_SUB_BIN_DURATION,
                               burst_probability: float = 2e-5,
                               burst_mean: float = 4.0) -> np.ndarray:
    """
    Heavy-tailed detector counts: Poisson thermal counts plus rare bursts.

    The bursts mimic the luminescence tail of a photomultiplier; no temporal
    correlation between sub-bins is modelled.
    """
    counts = rng.poisson(rate * sub_bin_duration, size=n)
    bursts = rng.random(n) < burst_probability
    counts[bursts] += rng.geometric(1.0 / burst_mean, size=int(bursts.sum()))
    return counts


def sub_bin_models(params: ReadoutParams) -> Tuple[CountPmf, CountPmf]:
    """
    Per-sub-bin count distributions for a bright and a dark ion.

    Returns:
        Tuple of (B, D) CountPmfs
    """
    bright = poisson_pmf(params.bright_mean)
    dark = poisson_pmf(params.background_mean)
    if params.dark_count_pmf is not None:
        bright = convolve(bright, params.dark_count_pmf)
        dark = convolve(dark, params.dark_count_pmf)
    return bright, dark


def _check_sum_length(params: ReadoutParams, N: int) -> None:
    if int(N) != N or not 1 <= N <= params.sub_bin_count:
        raise InvalidParameterError(f"N must be an integer in 1..{params.sub_bin_count}, got {N}")


def _with_detector(pmf: CountPmf, params: ReadoutParams, N: int) -> CountPmf:
    if params.dark_count_pmf is None:
        return pmf
    return convolve(pmf, convolve_power(params.dark_count_pmf, N))


def bright_sum_pmf(params: ReadoutParams, N: int) -> CountPmf:
    """Distribution of the summed counts of a bright ion over ``N`` sub-bins."""
    _check_sum_length(params, N)
    return _with_detector(poisson_pmf(N * params.bright_mean), params, N)


def dark_sum_pmf_with_decay(params: ReadoutParams, N: int, mode: str = 'exact',
                            nodes_per_sub_bin: int = DEFAULT_QUADRATURE_NODES) -> CountPmf:
    """
    Summed-count distribution of a shelved ion that may decay during the bin.

    With probability 1 - t_b/tau the ion stays dark for the whole bin. A decay
    at time t_d (density 1/tau) gives Poisson(R_D t_d + R_B (t_b - t_d)).

    Args:
        params: Readout configuration
        N: Number of summed sub-bins
        mode: 'exact' integrates the decay time with a composite midpoint
            rule; 'switch' uses the sub-bin switch approximation, where the
            rate changes at the start of the sub-bin containing the decay
        nodes_per_sub_bin: Midpoint nodes per sub-bin for 'exact' (>= 10)

    Returns:
        Mixture CountPmf, convolved with the detector PMF if present
    """
    _check_sum_length(params, N)
    if mode not in ('exact', 'switch'):
        raise InvalidParameterError(f"unknown decay mode {mode!r}")
    if nodes_per_sub_bin < 10:
        raise InvalidParameterError("at least 10 quadrature nodes per sub-bin are required")

    t_s = params.sub_bin_duration
    tau = params.shelf_lifetime
    t_b = N * t_s
    rate_dark = params.background_mean / t_s
    rate_bright = params.bright_rate

    n_max = default_support(N * max(params.bright_mean, params.background_mean))
    k = np.arange(n_max + 1)

    if mode == 'exact':
        step = t_s / nodes_per_sub_bin
        decay_times = (np.arange(N * nodes_per_sub_bin) + 0.5) * step
        weights = np.full(decay_times.size, step / tau)
    else:
        decay_times = np.arange(N) * t_s
        weights = np.full(N, t_s / tau)
    means = rate_dark * decay_times + rate_bright * (t_b - decay_times)

    mixture = (1.0 - t_b / tau) * stats.poisson.pmf(k, N * params.background_mean)
    # Rows are decay nodes, columns are counts.
    mixture = mixture + weights @ stats.poisson.pmf(k[None, :], means[:, None])
    pmf = CountPmf(mixture)
    return _with_detector(pmf, params, N)
