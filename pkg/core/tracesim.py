"""
Photon-count trace simulator and Monte Carlo campaign runner.

Traces are generated in fixed blocks of BLOCK_SIZE trials. Each block owns a
counter-based Philox generator keyed by (master seed, label, block index), so
a trace is a pure function of (params, label, stream_id, seed, decay mode)
and campaign tallies do not depend on how blocks are spread over workers.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from classifiers import ClassifierSpec, Label, LikelihoodCache, ReadoutModels, classify_batch
from distributions import ReadoutParams, parse_count_records
from errors import CampaignError, InvalidParameterError, ParseError

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
RNG_NAME = 'numpy Philox4x64-10 via SeedSequence(seed, spawn_key=(label, block))'

RECORD_COLUMNS = [
    'label', 'stream_id', 'n_subbins_used', 'sum_counts', 'verdict', 'log_pB', 'log_pD', 'posterior_error',
]


class DecayMode(str, Enum):
    SUB_BIN_SWITCH = 'switch'
    EXACT_TIME = 'exact'

    @classmethod
    def parse(cls, value: Any) -> 'DecayMode':
        if isinstance(value, DecayMode):
            return value
        text = str(value).strip().lower()
        aliases = {'switch': cls.SUB_BIN_SWITCH, 'subbinswitch': cls.SUB_BIN_SWITCH,
                   'exact': cls.EXACT_TIME, 'exacttime': cls.EXACT_TIME}
        if text not in aliases:
            raise InvalidParameterError(f"unknown decay mode {value!r}, expected 'switch' or 'exact'")
        return aliases[text]


@dataclass(frozen=True)
class TraceTruth:
    label: Label
    decay_time: Optional[float] = None

    def __post_init__(self):
        if self.label is Label.BRIGHT and self.decay_time is not None:
            raise InvalidParameterError("a bright trace cannot carry a decay time")


@dataclass(frozen=True, eq=False)
class CountTrace:
    """Per-sub-bin photon counts of one trial, in time order."""

    counts: np.ndarray
    sub_bin_duration: float
    truth: Optional[TraceTruth] = None

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64).ravel()
        if counts.size < 1:
            raise InvalidParameterError("a trace needs at least one sub-bin")
        if np.any(counts < 0):
            raise InvalidParameterError("trace counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, 'counts', counts)

    def __len__(self) -> int:
        return int(self.counts.size)


def load_trace(path: Union[str, Path], sub_bin_duration: float) -> CountTrace:
    """Read a trace file: one sub-bin count per line, in time order."""
    counts = parse_count_records(path)
    if counts.size == 0:
        raise ParseError("trace file contains no sub-bins", source=str(path))
    return CountTrace(counts, sub_bin_duration)


@dataclass
class LabelTally:
    trials: int = 0
    errors: int = 0
    sub_bins: int = 0
    sub_bins_sq: int = 0
    decayed: int = 0

    def merge(self, other: 'LabelTally') -> 'LabelTally':
        return LabelTally(
            self.trials + other.trials,
            self.errors + other.errors,
            self.sub_bins + other.sub_bins,
            self.sub_bins_sq + other.sub_bins_sq,
            self.decayed + other.decayed,
        )


@dataclass
class TrialOutcomeTally:
    """
    Error counts and readout-duration sums per true label.

    Durations are kept as integer sub-bin sums so that merging is exact and
    independent of order.
    """

    sub_bin_duration: float
    bright: LabelTally = field(default_factory=LabelTally)
    dark: LabelTally = field(default_factory=LabelTally)

    def for_label(self, label: Label) -> LabelTally:
        return self.bright if label is Label.BRIGHT else self.dark

    def merge(self, other: 'TrialOutcomeTally') -> 'TrialOutcomeTally':
        return TrialOutcomeTally(self.sub_bin_duration, self.bright.merge(other.bright), self.dark.merge(other.dark))

    def add(self, label: Label, part: LabelTally) -> None:
        if label is Label.BRIGHT:
            self.bright = self.bright.merge(part)
        else:
            self.dark = self.dark.merge(part)

    def sum_readout_time(self, label: Label) -> float:
        return self.for_label(label).sub_bins * self.sub_bin_duration

    def sum_readout_time_sq(self, label: Label) -> float:
        return self.for_label(label).sub_bins_sq * self.sub_bin_duration ** 2


def stream_id_for(label: Label, index: int) -> int:
    """Stream identifier of trial ``index`` of ``label``: 2 * index + label code."""
    return 2 * int(index) + Label.parse(label).code


def block_generator(seed: int, label: Label, block_index: int) -> np.random.Generator:
    if seed < 0:
        raise InvalidParameterError(f"seed must be >= 0, got {seed}")
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(label.code, int(block_index)))
    return np.random.Generator(np.random.Philox(sequence))


def simulate_block(params: ReadoutParams, label: Label, block_index: int, seed: int,
                   decay_mode: DecayMode = DecayMode.EXACT_TIME) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Generate one full block of BLOCK_SIZE traces.

    Returns:
        Tuple of (counts array (BLOCK_SIZE, N), decay times or None for bright)
    """
    label = Label.parse(label)
    decay_mode = DecayMode.parse(decay_mode)
    rng = block_generator(seed, label, block_index)
    n = params.sub_bin_count
    t_s = params.sub_bin_duration
    shape = (BLOCK_SIZE, n)

    if label is Label.BRIGHT:
        counts = rng.poisson(params.bright_mean, size=shape)
        decay_times = None
    else:
        decay_times = rng.exponential(params.shelf_lifetime, size=BLOCK_SIZE)
        counts = rng.poisson(params.background_mean, size=shape)
        decay_bin = np.floor(decay_times / t_s)
        rows = np.flatnonzero(decay_bin < n)
        if rows.size:
            j = decay_bin[rows].astype(np.int64)[:, None]
            k = np.arange(n)[None, :]
            rate_dark = params.background_mean / t_s
            if decay_mode is DecayMode.EXACT_TIME:
                t_d = decay_times[rows][:, None]
                partial = rate_dark * (t_d - j * t_s) + params.bright_rate * ((j + 1) * t_s - t_d)
            else:
                partial = np.full(j.shape, params.bright_mean)
            means = np.where(k < j, params.background_mean, np.where(k == j, partial, params.bright_mean))
            counts[rows] = rng.poisson(means)
    if params.dark_count_pmf is not None:
        counts += params.dark_count_pmf.sample(rng, shape)
    return counts, decay_times


def simulate_trace(params: ReadoutParams, label: Label, stream_id: int, seed: int,
                   decay_mode: DecayMode = DecayMode.EXACT_TIME) -> CountTrace:
    """
    Regenerate the trace of one trial.

    Args:
        params: Readout configuration
        label: True preparation, Bright or Dark
        stream_id: Stream identifier, see ``stream_id_for``
        seed: Master seed of the campaign
        decay_mode: 'exact' decay time or the 'switch' approximation

    Returns:
        CountTrace with ground truth attached
    """
    label = Label.parse(label)
    if stream_id < 0:
        raise InvalidParameterError(f"stream_id must be >= 0, got {stream_id}")
    if stream_id % 2 != label.code:
        raise InvalidParameterError(f"stream_id {stream_id} does not belong to label {label.value}")
    index = stream_id // 2
    counts, decay_times = simulate_block(params, label, index // BLOCK_SIZE, seed, decay_mode)
    row = index % BLOCK_SIZE
    truth = TraceTruth(label)
    if decay_times is not None:
        truth = TraceTruth(label, float(decay_times[row]))
    return CountTrace(counts[row], params.sub_bin_duration, truth)


@dataclass(frozen=True)
class _BlockTask:
    params: ReadoutParams
    specs: Tuple[ClassifierSpec, ...]
    label: Label
    block_index: int
    rows: int
    seed: int
    decay_mode: DecayMode
    keep_records: bool


def _evaluate_block(task: _BlockTask) -> Tuple[List[LabelTally], Optional[pd.DataFrame]]:
    params = task.params
    counts, decay_times = simulate_block(params, task.label, task.block_index, task.seed, task.decay_mode)
    counts = counts[: task.rows]
    width = max(spec.sub_bins_needed(params.sub_bin_duration) for spec in task.specs)
    counts = counts[:, :width]

    needs_models = any(spec.method in ('ml', 'adaptive') for spec in task.specs)
    models = ReadoutModels.from_params(params) if needs_models else None
    cache = LikelihoodCache(counts, models) if needs_models else None
    decayed = 0
    if decay_times is not None:
        decayed = int(np.count_nonzero(decay_times[: task.rows] < params.bin_time))

    first_index = task.block_index * BLOCK_SIZE
    truth_bright = task.label is Label.BRIGHT
    tallies = []
    records = None
    for spec in task.specs:
        try:
            batch = classify_batch(counts, spec, models, cache)
        except Exception as e:
            _raise_for_first_failure(counts, spec, models, task, first_index, e)
        used = batch.sub_bins_used.astype(np.int64)
        errors = int(np.count_nonzero(batch.is_bright != truth_bright))
        tallies.append(LabelTally(
            trials=task.rows,
            errors=errors,
            sub_bins=int(used.sum()),
            sub_bins_sq=int(np.dot(used, used)),
            decayed=decayed,
        ))
        if task.keep_records and records is None:
            mask = np.arange(counts.shape[1])[None, :] < used[:, None]
            missing = np.full(task.rows, np.nan)
            records = pd.DataFrame({
                'label': task.label.value,
                'stream_id': 2 * (first_index + np.arange(task.rows)) + task.label.code,
                'n_subbins_used': used,
                'sum_counts': (counts * mask).sum(axis=1),
                'verdict': np.where(batch.is_bright, Label.BRIGHT.value, Label.DARK.value),
                'log_pB': batch.log_pB if batch.log_pB is not None else missing,
                'log_pD': batch.log_pD if batch.log_pD is not None else missing,
                'posterior_error': batch.posterior_error if batch.posterior_error is not None else missing,
            }, columns=RECORD_COLUMNS)
    return tallies, records


def _raise_for_first_failure(counts, spec, models, task, first_index, error):
    for row in range(counts.shape[0]):
        try:
            classify_batch(counts[row: row + 1], spec, models)
        except Exception as row_error:
            raise CampaignError(
                f"classifier {spec.describe()} failed: {row_error}",
                label=task.label.value,
                stream_id=stream_id_for(task.label, first_index + row),
            ) from row_error
    raise CampaignError(f"classifier {spec.describe()} failed: {error}", label=task.label.value) from error


@dataclass
class CampaignResult:
    tallies: List[TrialOutcomeTally]
    records: Optional[pd.DataFrame] = None


def run_campaign(params: ReadoutParams, specs: Sequence[ClassifierSpec], n_trials_per_label: int,
                 master_seed: int, decay_mode: DecayMode = DecayMode.EXACT_TIME, workers: int = 1,
                 keep_records: bool = False) -> CampaignResult:
    """
    Run bright and dark trials and evaluate every classifier spec on the same traces.

    Args:
        params: Readout configuration (traces have params.sub_bin_count sub-bins)
        specs: Classifiers to evaluate
        n_trials_per_label: Trials per true label (>= 1)
        master_seed: Campaign seed (>= 0)
        decay_mode: Dark-trace decay model
        workers: Worker processes; results do not depend on this
        keep_records: Also collect per-trial records for the first spec

    Returns:
        CampaignResult with one tally per spec
    """
    specs = tuple(specs)
    if not specs:
        raise InvalidParameterError("at least one classifier spec is required")
    if n_trials_per_label < 1:
        raise InvalidParameterError(f"n_trials_per_label must be >= 1, got {n_trials_per_label}")
    if master_seed < 0:
        raise InvalidParameterError(f"master_seed must be >= 0, got {master_seed}")
    for spec in specs:
        needed = spec.sub_bins_needed(params.sub_bin_duration)
        if needed > params.sub_bin_count:
            raise InvalidParameterError(
                f"{spec.describe()} needs {needed} sub-bins but traces have {params.sub_bin_count}"
            )
    decay_mode = DecayMode.parse(decay_mode)

    tasks = []
    n_blocks = math.ceil(n_trials_per_label / BLOCK_SIZE)
    for label in (Label.BRIGHT, Label.DARK):
        for block_index in range(n_blocks):
            rows = min(BLOCK_SIZE, n_trials_per_label - block_index * BLOCK_SIZE)
            tasks.append(_BlockTask(params, specs, label, block_index, rows, master_seed, decay_mode, keep_records))

    logger.info(
        f"Running {n_trials_per_label} trials per label in {len(tasks)} blocks "
        f"for {len(specs)} classifier(s) with {workers} worker(s)"
    )
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_evaluate_block, tasks))
    else:
        results = [_evaluate_block(task) for task in tasks]

    tallies = [TrialOutcomeTally(params.sub_bin_duration) for _ in specs]
    frames = []
    # Integer sums, merged in task order.
    for task, (parts, records) in zip(tasks, results):
        for tally, part in zip(tallies, parts):
            tally.add(task.label, part)
        if records is not None:
            frames.append(records)
    logger.info(f"Completed {len(results)} blocks")
    records = pd.concat(frames, ignore_index=True) if frames else None
    return CampaignResult(tallies, records)


def run_trials(params: ReadoutParams, n_trials_per_label: int, classifier_spec: ClassifierSpec,
               master_seed: int, decay_mode: DecayMode = DecayMode.EXACT_TIME, workers: int = 1) -> TrialOutcomeTally:
    """Monte Carlo error tally of a single classifier."""
    result = run_campaign(params, [classifier_spec], n_trials_per_label, master_seed, decay_mode, workers)
    return result.tallies[0]


def run_trials_multi(params: ReadoutParams, specs: Sequence[ClassifierSpec], n_trials_per_label: int,
                     master_seed: int, decay_mode: DecayMode = DecayMode.EXACT_TIME,
                     workers: int = 1) -> List[TrialOutcomeTally]:
    """Tallies for several classifiers evaluated on shared traces."""
    return run_campaign(params, specs, n_trials_per_label, master_seed, decay_mode, workers).tallies
