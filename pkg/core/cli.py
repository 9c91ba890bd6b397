"""
Command-line front end for readout simulation, classification and sweeps.

Exit status: 0 on success, 2 on configuration errors, 3 on runtime errors.
"""

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from classifiers import (
    ClassifierSpec,
    ReadoutModels,
    Verdict,
    adaptive_classify,
    ml_classify,
    threshold_classify,
)
from config_loader import config_hash, get_config_summary, load_config, require_valid, resolve_path
from distributions import (
    ReadoutParams,
    bright_sum_pmf,
    dark_sum_pmf_with_decay,
    load_empirical_pmf,
)
from env_utils import get_environment_info, resolve_worker_count
from errors import ConfigError, InvalidParameterError, ParseError, ReadoutError
from export_utils import ExportUtils
from shelving import LevelScheme, PulseSchedule, default_tT_grid, schedule_record, sweep_shelving
from sweeps import (
    SweepRecord,
    bright_fast_operating_point,
    default_ec_grid,
    error_stats,
    optimize_threshold,
    records_to_frame,
    sweep_adaptive,
    sweep_bin_time,
    sweep_efficiency,
)
from tracesim import RNG_NAME, DecayMode, load_trace, run_campaign

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

COMMANDS = (
    'simulate', 'classify', 'sweep-bin-time', 'sweep-adaptive', 'sweep-efficiency',
    'optimize-threshold', 'histogram', 'shelve-sweep',
)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help="Flat key=value config file")
    common.add_argument('--output', type=str, default=None, help="Output path (suffix follows --emit)")
    common.add_argument('--emit', choices=('csv', 'json'), default=None)
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--threads', type=int, default=None, help="Worker processes; results do not depend on it")
    common.add_argument('--decay-mode', dest='decay_mode', choices=('exact', 'switch'), default=None)
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true', help="Log at INFO level")
    verbosity.add_argument('--debug', action='store_true', help="Log at DEBUG level")
    return common


def _classifier_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument('--method', choices=('threshold', 'ml', 'adaptive', 'constant'), default=None)
    p.add_argument('--N', dest='N', type=int, default=None, help="Sub-bins summed or used")
    p.add_argument('--n-c', dest='n_c', type=float, default=None, help="Half-integer count threshold")
    p.add_argument('--ec', dest='e_c', type=float, default=None, help="Adaptive posterior-error cut-off")
    p.add_argument('--tc', dest='t_c', type=float, default=None, help="Adaptive cut-off time (s)")
    decay = p.add_mutually_exclusive_group()
    decay.add_argument('--include-decay', dest='include_decay', action='store_const', const=True, default=None)
    decay.add_argument('--no-decay', dest='include_decay', action='store_const', const=False)


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    p = argparse.ArgumentParser(prog='ion-readout', description="Trapped-ion qubit readout toolkit")
    sub = p.add_subparsers(dest='command', required=True)

    s = sub.add_parser('simulate', parents=[common], help="Monte Carlo error of one classifier")
    _classifier_arguments(s)
    s.add_argument('--trials', type=int, default=None, help="Trials per true label")
    s.add_argument('--records', type=str, default=None, help="Also write per-trial records here")

    c = sub.add_parser('classify', parents=[common], help="Classify a recorded trace")
    _classifier_arguments(c)
    c.add_argument('--trace', type=str, required=True, help="One sub-bin count per line")

    b = sub.add_parser('sweep-bin-time', parents=[common], help="Error versus bin time")
    b.add_argument('--method', choices=('threshold', 'ml'), default=None)
    b.add_argument('--N-list', dest='N_list', type=str, default=None, help="e.g. 1:200 or 10,20,40")
    b.add_argument('--trials', type=int, default=None)
    b.add_argument('--monte-carlo', action='store_true', help="Simulate the threshold method instead of exact sums")
    decay = b.add_mutually_exclusive_group()
    decay.add_argument('--include-decay', dest='include_decay', action='store_const', const=True, default=None)
    decay.add_argument('--no-decay', dest='include_decay', action='store_const', const=False)

    a = sub.add_parser('sweep-adaptive', parents=[common], help="Adaptive error versus mean readout time")
    a.add_argument('--ec-list', dest='ec_list', type=str, default=None)
    a.add_argument('--tc', dest='t_c', type=float, default=None)
    a.add_argument('--trials', type=int, default=None)
    a.add_argument('--include-decay', dest='include_decay', action='store_const', const=True, default=None)

    e = sub.add_parser('sweep-efficiency', parents=[common], help="Asymptotic error versus collection efficiency")
    e.add_argument('--eta-list', dest='eta_list', type=str, default=None)
    e.add_argument('--N-list', dest='N_list', type=str, default=None)
    e.add_argument('--trials', type=int, default=None)

    o = sub.add_parser('optimize-threshold', parents=[common], help="Best threshold and bin length")
    o.add_argument('--N-list', dest='N_list', type=str, default=None)

    h = sub.add_parser('histogram', parents=[common], help="Analytic summed-count distributions")
    h.add_argument('--N', dest='N', type=int, default=None)

    t = sub.add_parser('shelve-sweep', parents=[common], help="Optimized shelving error versus transfer time")
    t.add_argument('--scheme', dest='scheme_file', type=str, default=None)
    t.add_argument('--schedule', dest='schedule_file', type=str, default=None)
    t.add_argument('--tT-list', dest='tT_list', type=str, default=None)
    t.add_argument('--modes', type=str, default=None, help="continuous,pulsed")
    return p


OVERRIDE_KEYS = (
    'output', 'emit', 'seed', 'threads', 'decay_mode', 'method', 'N', 'n_c', 'e_c', 't_c', 'include_decay',
    'trials', 'records', 'N_list', 'ec_list', 'eta_list', 'scheme_file', 'schedule_file', 'tT_list', 'modes',
)

ADAPTIVE_ONLY = ('e_c', 't_c')
FIXED_BIN_ONLY = ('N', 'n_c')


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {key: getattr(args, key) for key in OVERRIDE_KEYS if getattr(args, key, None) is not None}
    if args.debug:
        overrides['log_level'] = 'DEBUG'
    elif args.verbose:
        overrides['log_level'] = 'INFO'
    return overrides


def _check_conflicts(args: argparse.Namespace) -> None:
    method = getattr(args, 'method', None)
    if args.command not in ('simulate', 'classify') or method is None:
        return
    given = {key for key in ADAPTIVE_ONLY + FIXED_BIN_ONLY if getattr(args, key, None) is not None}
    if method == 'adaptive' and given & set(FIXED_BIN_ONLY):
        key = sorted(given & set(FIXED_BIN_ONLY))[0]
        raise ConfigError("conflicts with --method adaptive", field=key)
    if method != 'adaptive' and given & set(ADAPTIVE_ONLY):
        key = sorted(given & set(ADAPTIVE_ONLY))[0]
        raise ConfigError(f"only applies to --method adaptive, not {method}", field=key)
    if method == 'threshold' and getattr(args, 'include_decay', None) is not None:
        raise ConfigError("the threshold method has no decay option", field='include_decay')


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr,
        force=True,
    )


def _fmt_time(seconds: float) -> str:
    return 'nan' if seconds is None or math.isnan(seconds) else f"{seconds * 1e6:.1f} us"


class CommandRunner:
    """Executes one subcommand against a validated configuration."""

    def __init__(self, config: Dict[str, Any], command: str):
        self.config = config
        self.command = command
        self.logger = logging.getLogger(__name__)
        self.workers = resolve_worker_count(config['threads'])
        self.hash = config_hash(config)

    # Configuration to domain objects

    def readout_params(self) -> ReadoutParams:
        dark_pmf = None
        path = resolve_path(self.config, 'dark_count_file')
        if path is not None:
            dark_pmf = load_empirical_pmf(path)
        try:
            return ReadoutParams(
                bright_rate=self.config['bright_rate'],
                dark_rate=self.config['dark_rate'],
                shelf_lifetime=self.config['shelf_lifetime'],
                sub_bin_duration=self.config['sub_bin_duration'],
                sub_bin_count=self.config['sub_bin_count'],
                dark_count_pmf=dark_pmf,
            )
        except InvalidParameterError as e:
            raise ConfigError(str(e), field=e.field) from e

    def classifier_spec(self, trace_length: Optional[int] = None) -> ClassifierSpec:
        values = {key: self.config.get(key) for key in ('method', 'N', 'n_c', 'include_decay', 'e_c', 't_c')}
        method = values['method']
        if method in ('threshold', 'ml') and values['N'] is None:
            values['N'] = trace_length or self.config['sub_bin_count']
        if method == 'threshold' and values['n_c'] is None:
            raise ConfigError("the threshold method needs a threshold", field='n_c')
        if method != 'adaptive':
            values['e_c'] = values['t_c'] = None
        try:
            return ClassifierSpec.from_mapping(values)
        except InvalidParameterError as e:
            raise ConfigError(str(e), field='method') from e

    def decay_mode(self) -> DecayMode:
        return DecayMode.parse(self.config['decay_mode'])

    def N_list(self, params: ReadoutParams) -> List[int]:
        return self.config.get('N_list') or list(range(1, params.sub_bin_count + 1))

    # Output

    def header(self, monte_carlo: bool, **extra) -> Dict[str, Any]:
        return ExportUtils.build_header(
            self.hash, self.config['seed'], rng=RNG_NAME if monte_carlo else None, command=self.command, **extra,
        )

    def output_path(self) -> Path:
        return Path(self.config.get('output') or self.command)

    def write(self, df: pd.DataFrame, header: Dict[str, Any], path: Optional[Path] = None) -> Path:
        return ExportUtils.write_table(df, path or self.output_path(), header, self.config['emit'])

    # Subcommands

    def simulate(self) -> str:
        params = self.readout_params()
        spec = self.classifier_spec()
        trials = self.config['trials']
        keep_records = bool(self.config.get('records'))
        result = run_campaign(params, [spec], trials, self.config['seed'], self.decay_mode(), self.workers,
                              keep_records=keep_records)
        tally = result.tallies[0]
        stats = error_stats(tally)
        x_name, x_value = ('t_c', spec.t_c) if spec.method == 'adaptive' else ('N', spec.N or 0)
        decayed_fraction = tally.dark.decayed / tally.dark.trials
        record = SweepRecord.from_stats(x_name, x_value, spec.method, stats, decayed_dark_fraction=decayed_fraction)
        header = self.header(True, classifier=spec.describe())
        path = self.write(records_to_frame([record]), header)
        if keep_records:
            self.write(result.records, header, Path(self.config['records']))
        return (
            f"{spec.describe()}: eps={stats.eps:.3e} [{stats.eps_95.lower:.3e}, {stats.eps_95.upper:.3e}] 95% "
            f"eps_B={stats.eps_B:.3e} eps_D={stats.eps_D:.3e} mean_ta={_fmt_time(stats.ta_overall.mean)} "
            f"decayed_dark={decayed_fraction:.4f} trials={stats.n_trials} -> {path}"
        )

    def classify(self) -> str:
        params = self.readout_params()
        trace_path = Path(self.config['trace'])
        trace = load_trace(trace_path, params.sub_bin_duration)
        spec = self.classifier_spec(trace_length=len(trace))
        verdict = self._classify_trace(trace, spec, params)
        if self.config.get('output'):
            row = pd.DataFrame([{
                'trace': trace_path.name,
                'method': spec.method,
                'verdict': verdict.label.value,
                'log_pB': verdict.log_pB,
                'log_pD': verdict.log_pD,
                'posterior_error': verdict.posterior_error,
                'n_subbins_used': verdict.sub_bins_used,
                't_a_s': verdict.readout_time,
            }])
            self.write(row, self.header(False, classifier=spec.describe()))
        posterior = 'n/a' if verdict.posterior_error is None else f"{verdict.posterior_error:.3e}"
        return (
            f"{spec.describe()}: verdict={verdict.label.value} posterior_error={posterior} "
            f"t_a={_fmt_time(verdict.readout_time)} sub_bins={verdict.sub_bins_used}"
        )

    def _classify_trace(self, trace, spec: ClassifierSpec, params: ReadoutParams) -> Verdict:
        if spec.method == 'threshold':
            return threshold_classify(trace, spec.N, spec.n_c, params.sub_bin_duration)
        if spec.method == 'constant':
            return Verdict(spec.label, None, None, None, 0, 0.0)
        models = ReadoutModels.from_params(params)
        if spec.method == 'ml':
            return ml_classify(trace, models, spec.include_decay, spec.N)
        return adaptive_classify(trace, models, spec.e_c, spec.t_c, spec.include_decay)

    def sweep_bin_time(self) -> str:
        params = self.readout_params()
        method = self.config['method']
        if method not in ('threshold', 'ml'):
            raise ConfigError("sweep-bin-time supports threshold or ml", field='method')
        analytic = method == 'threshold' and not self.config.get('monte_carlo')
        include_decay = self.config.get('include_decay')
        records = sweep_bin_time(
            params, method, self.N_list(params), self.config['trials'], self.config['seed'],
            include_decay=True if include_decay is None else include_decay, analytic=analytic,
            decay_mode=self.decay_mode(), workers=self.workers,
        )
        path = self.write(records_to_frame(records), self.header(not analytic, method=method))
        best = min(records, key=lambda r: r.eps)
        return f"{method}: minimum eps={best.eps:.3e} at t_b={_fmt_time(best.x_value)} over {len(records)} points -> {path}"

    def sweep_adaptive(self) -> str:
        params = self.readout_params()
        records = sweep_adaptive(
            params, self.config.get('ec_list') or default_ec_grid(), self.config['t_c'], self.config['trials'],
            self.config['seed'], include_decay=bool(self.config.get('include_decay')),
            decay_mode=self.decay_mode(), workers=self.workers,
        )
        path = self.write(records_to_frame(records), self.header(True, t_c=self.config['t_c']))
        best = min(records, key=lambda r: r.eps)
        line = (
            f"adaptive: minimum eps={best.eps:.3e} [{best.stats.eps_95.lower:.3e}, {best.stats.eps_95.upper:.3e}] "
            f"at e_c={best.x_value:.2e} mean_ta={_fmt_time(best.stats.ta_overall.mean)}"
        )
        fast = bright_fast_operating_point(records)
        if fast is not None:
            line += f"; bright-fast e_c={fast.x_value:.2e} mean_ta_bright={_fmt_time(fast.stats.ta_bright.mean)}"
        return f"{line} -> {path}"

    def sweep_efficiency(self) -> str:
        params = self.readout_params()
        records = sweep_efficiency(
            params, self.config['eta_list'], self.config['trials'], self.config['seed'],
            N_list=self.N_list(params), eta0=self.config['efficiency'],
            decay_mode=self.decay_mode(), workers=self.workers,
        )
        path = self.write(records_to_frame(records), self.header(True, eta0=self.config['efficiency']))
        parts = [f"eta={r.x_value:g}: eps_inf={r.derived['eps_inf']:.3e} t_1.1={_fmt_time(r.derived['t_1p1_s'])}"
                 for r in records]
        return '; '.join(parts) + f" -> {path}"

    def optimize_threshold(self) -> str:
        params = self.readout_params()
        best = optimize_threshold(params, self.N_list(params), self.decay_mode().value)
        row = pd.DataFrame([{
            'n_c': best.n_c, 'N': best.N, 't_b_s': best.N * params.sub_bin_duration,
            'eps': best.eps, 'eps_B': best.eps_B, 'eps_D': best.eps_D,
        }])
        path = self.write(row, self.header(False))
        return (
            f"threshold: n_c*={best.n_c:g} N*={best.N} t_b={_fmt_time(best.N * params.sub_bin_duration)} "
            f"eps*={best.eps:.3e} (eps_B={best.eps_B:.3e}, eps_D={best.eps_D:.3e}) -> {path}"
        )

    def histogram(self) -> str:
        params = self.readout_params()
        N = self.config.get('N')
        if N is None:
            raise ConfigError("histogram needs the number of summed sub-bins", field='N')
        if not 1 <= N <= params.sub_bin_count:
            raise ConfigError(f"must lie within 1..{params.sub_bin_count}", field='N')
        bright = bright_sum_pmf(params, N)
        dark = dark_sum_pmf_with_decay(params, N, mode=self.decay_mode().value)
        size = max(bright.probs.size, dark.probs.size)
        n = np.arange(size)
        table = {
            'n': n,
            'p_bright': np.pad(bright.probs, (0, size - bright.probs.size)),
            'p_dark': np.pad(dark.probs, (0, size - dark.probs.size)),
        }
        if params.dark_count_pmf is not None:
            detector = params.dark_count_pmf.probs[:size]
            table['p_detector_subbin'] = np.pad(detector, (0, size - detector.size))
        path = self.write(pd.DataFrame(table), self.header(False, N=N))
        best = optimize_threshold(params, [N], self.decay_mode().value)
        return (
            f"N={N} t_b={_fmt_time(N * params.sub_bin_duration)}: mean bright={bright.mean():.2f} "
            f"mean dark={dark.mean():.3f}; best n_c={best.n_c:g} eps={best.eps:.3e} -> {path}"
        )

    def shelve_sweep(self) -> str:
        scheme_path = resolve_path(self.config, 'scheme_file')
        scheme = LevelScheme.from_yaml(scheme_path) if scheme_path else LevelScheme.default()
        schedule_path = resolve_path(self.config, 'schedule_file')
        if schedule_path is not None:
            records = [schedule_record(scheme, PulseSchedule.from_yaml(schedule_path))]
        else:
            records = sweep_shelving(scheme, self.config.get('tT_list') or default_tT_grid(), self.config['modes'])
        path = self.write(records_to_frame(records), self.header(False, scheme=scheme.name))
        parts = []
        for mode in dict.fromkeys(r.method for r in records):
            best = min((r for r in records if r.method == mode), key=lambda r: r.eps)
            parts.append(f"{mode}: min eps_T={best.eps:.3e} at t_T={_fmt_time(best.x_value)}")
        return '; '.join(parts) + f" -> {path}"

    def run(self) -> str:
        handlers: Dict[str, Callable[[], str]] = {
            'simulate': self.simulate,
            'classify': self.classify,
            'sweep-bin-time': self.sweep_bin_time,
            'sweep-adaptive': self.sweep_adaptive,
            'sweep-efficiency': self.sweep_efficiency,
            'optimize-threshold': self.optimize_threshold,
            'histogram': self.histogram,
            'shelve-sweep': self.shelve_sweep,
        }
        return handlers[self.command]()


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, run one subcommand and print a one-line summary.

    Args:
        argv: Arguments without the program name (sys.argv[1:] by default)

    Returns:
        Process exit status
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    try:
        _check_conflicts(args)
        config = load_config(args.config, overrides=_overrides(args))
        _setup_logging(config['log_level'])
        require_valid(config)
        if getattr(args, 'trace', None):
            if not Path(args.trace).is_file():
                raise ConfigError(f"trace file not found: {args.trace}", field='trace')
            config['trace'] = args.trace
        config['monte_carlo'] = getattr(args, 'monte_carlo', False)
        logger = logging.getLogger(__name__)
        logger.info(f"Configuration: {get_config_summary(config)}")
        logger.debug(f"Environment: {get_environment_info()}")
        summary = CommandRunner(config, args.command).run()
    except (ConfigError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReadoutError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logging.getLogger(__name__).debug("Unhandled failure", exc_info=True)
        print(f"error: unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    print(summary)
    return EXIT_OK
