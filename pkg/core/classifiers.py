"""
Bright/dark discrimination methods for time-resolved photon counts.

Three methods are provided: a summed-count threshold, maximum likelihood with
marginalization over shelf decay during the bin, and an adaptive maximum
likelihood readout that stops as soon as the Bayesian posterior error drops
below a cut-off. Every method has a single-trace form returning a Verdict and
a vectorized batch form used by the Monte Carlo runner.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, Iterator, Mapping, Optional, Tuple

import numpy as np
from scipy.special import expit

from distributions import DEFAULT_SUB_BIN_DURATION, CountPmf, ReadoutParams, sub_bin_models
from errors import InsufficientDataError, InvalidParameterError

logger = logging.getLogger(__name__)

METHODS = ('threshold', 'ml', 'adaptive', 'constant')


class Label(str, Enum):
    BRIGHT = 'Bright'
    DARK = 'Dark'

    @property
    def code(self) -> int:
        return 0 if self is Label.BRIGHT else 1

    @classmethod
    def parse(cls, value: Any) -> 'Label':
        if isinstance(value, Label):
            return value
        text = str(value).strip().lower()
        for label in cls:
            if label.value.lower() == text:
                return label
        raise InvalidParameterError(f"unknown label {value!r}, expected Bright or Dark")


@dataclass(frozen=True)
class ReadoutModels:
    """Per-sub-bin count models plus the timing constants the likelihoods need."""

    bright: CountPmf
    dark: CountPmf
    sub_bin_duration: float
    shelf_lifetime: float

    @classmethod
    def from_params(cls, params: ReadoutParams) -> 'ReadoutModels':
        if not params.bright_rate > params.dark_rate:
            raise InvalidParameterError("classification requires bright_rate > dark_rate")
        bright, dark = sub_bin_models(params)
        return cls(bright, dark, params.sub_bin_duration, params.shelf_lifetime)


@dataclass(frozen=True)
class Verdict:
    label: Label
    log_pB: Optional[float]
    log_pD: Optional[float]
    posterior_error: Optional[float]
    sub_bins_used: int
    readout_time: float


@dataclass(frozen=True)
class VerdictBatch:
    """Verdicts for many traces held as parallel arrays."""

    is_bright: np.ndarray
    sub_bins_used: np.ndarray
    log_pB: Optional[np.ndarray] = None
    log_pD: Optional[np.ndarray] = None
    posterior_error: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.is_bright.size)

    def verdict(self, index: int, sub_bin_duration: float) -> Verdict:
        used = int(self.sub_bins_used[index])

        def pick(values):
            return None if values is None else float(values[index])

        return Verdict(
            label=Label.BRIGHT if self.is_bright[index] else Label.DARK,
            log_pB=pick(self.log_pB),
            log_pD=pick(self.log_pD),
            posterior_error=pick(self.posterior_error),
            sub_bins_used=used,
            readout_time=used * sub_bin_duration,
        )


def _is_half_integer(n_c: float) -> bool:
    k = n_c - 0.5
    return k >= 0 and abs(k - round(k)) < 1e-12


def sub_bins_for_time(duration: float, sub_bin_duration: float) -> int:
    """Convert a duration into a whole number of sub-bins."""
    count = duration / sub_bin_duration
    rounded = int(round(count))
    if rounded < 1 or abs(count - rounded) > 1e-6 * max(1.0, count):
        raise InvalidParameterError(
            f"duration {duration:g} s is not a positive multiple of the sub-bin duration {sub_bin_duration:g} s"
        )
    return rounded


@dataclass(frozen=True)
class ClassifierSpec:
    """
    Identifies one discrimination method and its parameters.

    threshold: N, n_c. ml: N, include_decay (default True).
    adaptive: e_c, t_c, include_decay (default False). constant: label.
    """

    method: str
    N: Optional[int] = None
    n_c: Optional[float] = None
    include_decay: Optional[bool] = None
    e_c: Optional[float] = None
    t_c: Optional[float] = None
    label: Label = Label.BRIGHT

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidParameterError(f"unknown classifier method {self.method!r}, expected one of {METHODS}")
        if self.method in ('threshold', 'ml'):
            if self.N is None or int(self.N) != self.N or self.N < 1:
                raise InvalidParameterError(f"{self.method} classifier needs an integer N >= 1")
        if self.method == 'threshold':
            if self.n_c is None or not _is_half_integer(self.n_c):
                raise InvalidParameterError(f"threshold n_c must be a half-integer >= 0.5, got {self.n_c}")
        if self.method == 'ml' and self.include_decay is None:
            object.__setattr__(self, 'include_decay', True)
        if self.method == 'adaptive':
            if self.e_c is None or not 0 <= self.e_c < 0.5:
                raise InvalidParameterError(f"adaptive e_c must lie in [0, 0.5), got {self.e_c}")
            if self.t_c is None or not self.t_c > 0:
                raise InvalidParameterError(f"adaptive t_c must be > 0, got {self.t_c}")
            if self.include_decay is None:
                object.__setattr__(self, 'include_decay', False)
        object.__setattr__(self, 'label', Label.parse(self.label))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> 'ClassifierSpec':
        """Build a spec from loosely typed config values (strings allowed)."""
        def opt(key, cast):
            value = values.get(key)
            if value is None or value == '':
                return None
            return cast(value)

        return cls(
            method=str(values.get('method', 'ml')).strip().lower(),
            N=opt('N', int),
            n_c=opt('n_c', float),
            include_decay=opt('include_decay', _to_bool),
            e_c=opt('e_c', float),
            t_c=opt('t_c', float),
            label=values.get('label') or Label.BRIGHT,
        )

    def sub_bins_needed(self, sub_bin_duration: float) -> int:
        if self.method == 'adaptive':
            return sub_bins_for_time(self.t_c, sub_bin_duration)
        if self.method == 'constant':
            return 1
        return int(self.N)

    def describe(self) -> str:
        if self.method == 'threshold':
            return f"threshold(N={self.N}, n_c={self.n_c:g})"
        if self.method == 'ml':
            return f"ml(N={self.N}, include_decay={self.include_decay})"
        if self.method == 'adaptive':
            return f"adaptive(e_c={self.e_c:g}, t_c={self.t_c:g}, include_decay={self.include_decay})"
        return f"constant({self.label.value})"


def _to_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off'):
        return False
    raise InvalidParameterError(f"expected a boolean, got {value!r}")


def _counts_of(trace) -> np.ndarray:
    counts = np.asarray(getattr(trace, 'counts', trace), dtype=np.int64)
    if counts.ndim != 1 or counts.size < 1:
        raise InvalidParameterError("a trace needs at least one sub-bin")
    if np.any(counts < 0):
        raise InvalidParameterError("trace counts must be non-negative")
    return counts


def bayes_error(log_pB, log_pD):
    """
    Posterior probability that the more likely hypothesis is wrong.

    e = min(p_B, p_D) / (p_B + p_D) = 1 / (1 + exp(|log_pB - log_pD|)),
    evaluated with the logistic function so that large separations underflow
    to 0 instead of overflowing.
    """
    delta = np.abs(np.asarray(log_pB, dtype=float) - np.asarray(log_pD, dtype=float))
    result = expit(-delta)
    return float(result) if result.ndim == 0 else result


def cumulative_log_likelihoods(counts: np.ndarray, models: ReadoutModels,
                               include_decay: bool) -> Tuple[np.ndarray, np.ndarray]:
    """
    Log-likelihoods of every prefix of every trace.

    Column k holds log p_B and log p_D for the first k + 1 sub-bins. With
    ``include_decay`` the dark likelihood marginalizes over decay in any
    sub-bin through the O(N) recursion

        M_k = M_{k-1} D(n_k),  S_k = (S_{k-1} + M_{k-1}) B(n_k),
        p_D = (1 - k t_s / tau) M_k + (t_s / tau) S_k,

    with M and S rescaled together every step and the shared log-scale kept
    separately, so that the magnitudes never leave the representable range.

    Args:
        counts: Integer array of shape (n_traces, n_sub_bins)
        models: Sub-bin count models and timing
        include_decay: Marginalize over shelf decay during the bin

    Returns:
        Tuple of (log_pB, log_pD) arrays with the shape of ``counts``
    """
    counts = np.atleast_2d(np.asarray(counts, dtype=np.int64))
    log_b = models.bright.log_prob(counts)
    log_d = models.dark.log_prob(counts)
    log_pB = np.cumsum(log_b, axis=1)
    if not include_decay:
        return log_pB, np.cumsum(log_d, axis=1)

    n_traces, n_sub_bins = counts.shape
    t_s = models.sub_bin_duration
    tau = models.shelf_lifetime
    if n_sub_bins * t_s >= tau:
        raise InvalidParameterError("decay-marginalized likelihood requires t_b < tau")
    decay_weight = t_s / tau

    m = np.ones(n_traces)
    s = np.zeros(n_traces)
    log_scale = np.zeros(n_traces)
    log_pD = np.empty((n_traces, n_sub_bins))
    for k in range(n_sub_bins):
        step = np.maximum(log_b[:, k], log_d[:, k])
        d = np.exp(log_d[:, k] - step)
        b = np.exp(log_b[:, k] - step)
        s = (s + m) * b
        m = m * d
        rescale = np.maximum(m, s)
        m /= rescale
        s /= rescale
        log_scale += step + np.log(rescale)
        stay = 1.0 - (k + 1) * decay_weight
        log_pD[:, k] = log_scale + np.log(stay * m + decay_weight * s)
    return log_pB, log_pD


def log_likelihoods(trace, bright: CountPmf, dark: CountPmf, sub_bin_duration: float,
                    shelf_lifetime: float, include_decay: bool = True) -> Tuple[float, float]:
    """
    Natural-log likelihoods of one trace under the bright and dark hypotheses.

    Returns:
        Tuple of (log_pB, log_pD)
    """
    if not shelf_lifetime > 0:
        raise InvalidParameterError("shelf lifetime must be > 0")
    models = ReadoutModels(bright, dark, sub_bin_duration, shelf_lifetime)
    counts = _counts_of(trace)
    log_pB, log_pD = cumulative_log_likelihoods(counts[None, :], models, include_decay)
    return float(log_pB[0, -1]), float(log_pD[0, -1])


def log_likelihoods_direct(trace, bright: CountPmf, dark: CountPmf, sub_bin_duration: float,
                           shelf_lifetime: float) -> Tuple[float, float]:
    """Decay-marginalized likelihoods by the explicit O(N^2) sum over decay sub-bins."""
    counts = _counts_of(trace)
    n = counts.size
    b = bright.prob(counts)
    d = dark.prob(counts)
    p_bright = float(np.prod(b))
    weight = sub_bin_duration / shelf_lifetime
    p_dark = (1.0 - n * weight) * float(np.prod(d))
    for j in range(n):
        p_dark += weight * float(np.prod(d[:j]) * np.prod(b[j:]))
    return math.log(p_bright), math.log(p_dark)


def _check_trace_length(counts: np.ndarray, N: int) -> None:
    if N > counts.shape[-1]:
        raise InvalidParameterError(f"N={N} exceeds the trace length {counts.shape[-1]}")


def threshold_batch(counts: np.ndarray, N: int, n_c: float) -> VerdictBatch:
    counts = np.atleast_2d(counts)
    _check_trace_length(counts, N)
    totals = counts[:, :N].sum(axis=1)
    return VerdictBatch(
        is_bright=totals > n_c,
        sub_bins_used=np.full(totals.size, N, dtype=np.int64),
    )


def ml_batch(log_pB: np.ndarray, log_pD: np.ndarray, N: int) -> VerdictBatch:
    """Fixed-bin maximum-likelihood verdicts from cumulative likelihoods."""
    _check_trace_length(log_pB, N)
    lb = log_pB[:, N - 1]
    ld = log_pD[:, N - 1]
    return VerdictBatch(
        is_bright=lb >= ld,
        sub_bins_used=np.full(lb.size, N, dtype=np.int64),
        log_pB=lb,
        log_pD=ld,
        posterior_error=bayes_error(lb, ld),
    )


def adaptive_batch(log_pB: np.ndarray, log_pD: np.ndarray, e_c: float, cutoff_sub_bins: int) -> VerdictBatch:
    """Adaptive verdicts: stop at the first sub-bin whose posterior error is below e_c."""
    _check_trace_length(log_pB, cutoff_sub_bins)
    lb = log_pB[:, :cutoff_sub_bins]
    ld = log_pD[:, :cutoff_sub_bins]
    errors = np.atleast_2d(bayes_error(lb, ld))
    confident = errors < e_c
    stop = np.where(confident.any(axis=1), confident.argmax(axis=1), cutoff_sub_bins - 1)
    rows = np.arange(lb.shape[0])
    stop_lb = lb[rows, stop]
    stop_ld = ld[rows, stop]
    return VerdictBatch(
        is_bright=stop_lb >= stop_ld,
        sub_bins_used=stop + 1,
        log_pB=stop_lb,
        log_pD=stop_ld,
        posterior_error=errors[rows, stop],
    )


def constant_batch(n_traces: int, label: Label = Label.BRIGHT) -> VerdictBatch:
    return VerdictBatch(
        is_bright=np.full(n_traces, label is Label.BRIGHT),
        sub_bins_used=np.ones(n_traces, dtype=np.int64),
    )


class LikelihoodCache:
    """Computes cumulative likelihoods of a block of traces at most once per model choice."""

    def __init__(self, counts: np.ndarray, models: ReadoutModels):
        self.counts = counts
        self.models = models
        self._cache: Dict[bool, Tuple[np.ndarray, np.ndarray]] = {}

    def get(self, include_decay: bool) -> Tuple[np.ndarray, np.ndarray]:
        if include_decay not in self._cache:
            self._cache[include_decay] = cumulative_log_likelihoods(self.counts, self.models, include_decay)
        return self._cache[include_decay]


def classify_batch(counts: np.ndarray, spec: ClassifierSpec, models: ReadoutModels,
                   cache: Optional[LikelihoodCache] = None) -> VerdictBatch:
    """
    Apply one classifier spec to a block of traces.

    Args:
        counts: Integer array (n_traces, n_sub_bins)
        spec: Classifier to apply
        models: Sub-bin models (ignored by threshold and constant)
        cache: Optional shared likelihood cache for the same ``counts``

    Returns:
        VerdictBatch aligned with the rows of ``counts``
    """
    counts = np.atleast_2d(counts)
    if spec.method == 'constant':
        return constant_batch(counts.shape[0], spec.label)
    if spec.method == 'threshold':
        return threshold_batch(counts, spec.N, spec.n_c)
    if cache is None:
        cache = LikelihoodCache(counts, models)
    log_pB, log_pD = cache.get(bool(spec.include_decay))
    if spec.method == 'ml':
        return ml_batch(log_pB, log_pD, spec.N)
    cutoff = spec.sub_bins_needed(models.sub_bin_duration)
    return adaptive_batch(log_pB, log_pD, spec.e_c, cutoff)


def threshold_classify(trace, N: int, n_c: float, sub_bin_duration: Optional[float] = None) -> Verdict:
    """
    Summed-count threshold: Bright iff the first N sub-bins hold more than n_c counts.

    Args:
        trace: CountTrace or sequence of counts
        N: Number of sub-bins to sum
        n_c: Half-integer threshold
        sub_bin_duration: Sub-bin duration (s) for the readout time; defaults to the
            trace's own, then to the standard 10 us

    Returns:
        Verdict without likelihoods or posterior error
    """
    counts = _counts_of(trace)
    spec = ClassifierSpec('threshold', N=N, n_c=n_c)
    t_s = sub_bin_duration if sub_bin_duration is not None else getattr(
        trace, 'sub_bin_duration', DEFAULT_SUB_BIN_DURATION)
    return threshold_batch(counts[None, :], spec.N, spec.n_c).verdict(0, t_s)


def ml_classify(trace, models: ReadoutModels, include_decay: bool = True, N: Optional[int] = None) -> Verdict:
    """
    Maximum-likelihood verdict over the first N sub-bins (all by default).

    Ties (p_B = p_D) are reported as Bright.
    """
    counts = _counts_of(trace)
    N = counts.size if N is None else N
    _check_trace_length(counts, N)
    log_pB, log_pD = cumulative_log_likelihoods(counts[None, :N], models, include_decay)
    return ml_batch(log_pB, log_pD, N).verdict(0, models.sub_bin_duration)


def verdict_from_likelihoods(log_pB: float, log_pD: float, sub_bins_used: int, sub_bin_duration: float) -> Verdict:
    return Verdict(
        label=Label.BRIGHT if log_pB >= log_pD else Label.DARK,
        log_pB=float(log_pB),
        log_pD=float(log_pD),
        posterior_error=bayes_error(log_pB, log_pD),
        sub_bins_used=sub_bins_used,
        readout_time=sub_bins_used * sub_bin_duration,
    )


class AdaptiveReadout:
    """
    Incremental likelihood tracker for real-time readout.

    Each call to ``update`` consumes one sub-bin count in O(1) work and
    refreshes the posterior error. ``done`` becomes true when the error drops
    below ``e_c`` or the cut-off number of sub-bins has been consumed.
    """

    def __init__(self, models: ReadoutModels, e_c: float, cutoff_sub_bins: int, include_decay: bool = False):
        if not 0 <= e_c < 0.5:
            raise InvalidParameterError(f"e_c must lie in [0, 0.5), got {e_c}")
        if cutoff_sub_bins < 1:
            raise InvalidParameterError("cut-off must be at least one sub-bin")
        if include_decay and cutoff_sub_bins * models.sub_bin_duration >= models.shelf_lifetime:
            raise InvalidParameterError("decay-marginalized likelihood requires t_c < tau")
        self.models = models
        self.e_c = e_c
        self.cutoff_sub_bins = cutoff_sub_bins
        self.include_decay = include_decay
        self.sub_bins_used = 0
        self.log_pB = 0.0
        self.log_pD = 0.0
        self._m = 1.0
        self._s = 0.0
        self._log_scale = 0.0
        self.posterior_error = 0.5

    @property
    def done(self) -> bool:
        return self.sub_bins_used >= self.cutoff_sub_bins or (
            self.sub_bins_used > 0 and self.posterior_error < self.e_c
        )

    @property
    def label(self) -> Label:
        return Label.BRIGHT if self.log_pB >= self.log_pD else Label.DARK

    def update(self, count: int) -> float:
        """Consume one sub-bin count; returns the new posterior error."""
        if self.done:
            raise InvalidParameterError("adaptive readout already terminated")
        if count < 0:
            raise InvalidParameterError("counts must be non-negative")
        lb = float(self.models.bright.log_prob(count))
        ld = float(self.models.dark.log_prob(count))
        self.sub_bins_used += 1
        self.log_pB += lb
        if self.include_decay:
            step = max(lb, ld)
            b = math.exp(lb - step)
            d = math.exp(ld - step)
            self._s = (self._s + self._m) * b
            self._m = self._m * d
            rescale = max(self._m, self._s)
            self._m /= rescale
            self._s /= rescale
            self._log_scale += step + math.log(rescale)
            weight = self.models.sub_bin_duration / self.models.shelf_lifetime
            stay = 1.0 - self.sub_bins_used * weight
            self.log_pD = self._log_scale + math.log(stay * self._m + weight * self._s)
        else:
            self.log_pD += ld
        self.posterior_error = bayes_error(self.log_pB, self.log_pD)
        return self.posterior_error

    def verdict(self) -> Verdict:
        if self.sub_bins_used == 0:
            raise InsufficientDataError("no sub-bins consumed yet")
        return verdict_from_likelihoods(self.log_pB, self.log_pD, self.sub_bins_used, self.models.sub_bin_duration)


def adaptive_classify(sub_bin_stream: Iterable[int], models: ReadoutModels, e_c: float, t_c: float,
                      include_decay: bool = False) -> Verdict:
    """
    Adaptive maximum-likelihood readout.

    Sub-bins are consumed one at a time until the posterior error falls below
    ``e_c`` or the cut-off time ``t_c`` is reached; the stream is not read
    past the stopping point.

    Args:
        sub_bin_stream: Iterable of sub-bin counts in time order
        models: Sub-bin count models and timing
        e_c: Posterior error cut-off in [0, 0.5)
        t_c: Cut-off time, a positive multiple of the sub-bin duration
        include_decay: Marginalize over shelf decay (off by default for speed)

    Returns:
        Verdict carrying the posterior error at the stopping point
    """
    cutoff = sub_bins_for_time(t_c, models.sub_bin_duration)
    readout = AdaptiveReadout(models, e_c, cutoff, include_decay)
    stream: Iterator[int] = iter(getattr(sub_bin_stream, 'counts', sub_bin_stream))
    while not readout.done:
        try:
            count = next(stream)
        except StopIteration:
            raise InsufficientDataError(
                f"stream ended after {readout.sub_bins_used} sub-bins; {cutoff} needed to reach t_c "
                f"without an early stop"
            ) from None
        readout.update(int(count))
    return readout.verdict()
