"""
Rate-equation model of the hyperfine-to-optical shelving transfer.

A LevelScheme lists states and directed transitions; each transition's rate is
a base rate times the intensity of its control channel. Populations evolve as
dp/dt = G p and are propagated with a scaling-and-squaring matrix exponential,
which copes with P-state decay (~1e8 /s) next to shelf decay (~1 /s).

Intensities of the 393 nm drive are in units of the reference intensity that
pumps |down> into the shelf in the calibrated transfer time. 850 nm intensities
are in units of the 850 nm saturation intensity.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, optimize

from config_loader import load_yaml, save_yaml
from distributions import DEFAULT_SHELF_LIFETIME
from errors import InvalidParameterError, ParseError
from sweeps import SweepRecord

logger = logging.getLogger(__name__)

ROLES = ('qubit_up', 'qubit_down', 'excited', 'shelf', 'repump_reservoir', 'leak')
CHANNELS = ('drive393', 'drive850_sigma', 'drive850_pi', 'spontaneous')
CONTROL_CHANNELS = CHANNELS[:-1]

P_LIFETIME = 6.924e-9
BRANCH_D52 = 0.053
BRANCH_D32 = 0.0063
DETUNING_393 = 3.1e9
TRANSFER_TIME = 12e-6
INTENSITY_850 = 230.0
POLARIZATION_850 = (0.9992, 0.0008, 2e-7)

# P3/2(4,+4) ground-state decay shares (|up>, |down>, leak); D3/2 sublevel shares.
OFF_RESONANT_S_SPLIT = (0.5, 0.3, 0.2)
D32_SPLIT = (0.75, 0.25)
SHELF_DECAY_TO_DOWN = 0.5

LOG_INTENSITY_RANGE = (-3.0, 3.0)
MIN_PULSED_UNIT = 0.2e-6
POPULATION_TOLERANCE = 1e-9

Controls = Mapping[str, float]


def suppression_factor(detuning: float, linewidth: float, saturation: float) -> float:
    """
    Ratio of off-resonant to resonant scattering for a saturation-broadened line.

    Args:
        detuning: Laser detuning from the transition (Hz)
        linewidth: Natural linewidth Gamma/2pi (Hz)
        saturation: Saturation parameter s = I/I_sat

    Returns:
        (1 + s) / (1 + s + (2 detuning / linewidth)^2)
    """
    if saturation < 0 or linewidth <= 0:
        raise InvalidParameterError("saturation must be >= 0 and linewidth > 0")
    if math.isinf(detuning):
        return 0.0
    return (1 + saturation) / (1 + saturation + (2 * detuning / linewidth) ** 2)


@dataclass(frozen=True)
class State:
    label: str
    role: str


@dataclass(frozen=True)
class Transition:
    source: str
    target: str
    base_rate: float
    channel: str
    off_resonant: bool = False


@dataclass(frozen=True)
class LevelScheme:
    """
    Reduced level scheme: states with roles, rate-carrying transitions and constants.

    ``p_lifetime`` sets the excited-state linewidth used for saturation and
    off-resonant suppression; ``detuning`` is the off-resonant 393 nm detuning.
    """

    name: str
    states: Tuple[State, ...]
    transitions: Tuple[Transition, ...]
    shelf_lifetime: float = DEFAULT_SHELF_LIFETIME
    p_lifetime: float = P_LIFETIME
    detuning: float = DETUNING_393
    branching: Tuple[float, float] = (BRANCH_D52, BRANCH_D32)
    _index: Dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = [s.label for s in self.states]
        if len(set(labels)) != len(labels):
            raise InvalidParameterError(f"duplicate state labels in scheme {self.name!r}")
        for state in self.states:
            if state.role not in ROLES:
                raise InvalidParameterError(f"state {state.label!r} has unknown role {state.role!r}")
        for role in ('qubit_up', 'qubit_down', 'shelf'):
            if sum(s.role == role for s in self.states) != 1:
                raise InvalidParameterError(f"scheme needs exactly one {role} state")
        for tr in self.transitions:
            if tr.source not in labels or tr.target not in labels:
                raise InvalidParameterError(f"transition {tr.source}->{tr.target} names an unknown state")
            if tr.source == tr.target:
                raise InvalidParameterError(f"transition {tr.source}->{tr.target} is a self loop")
            if tr.channel not in CHANNELS:
                raise InvalidParameterError(f"transition {tr.source}->{tr.target} has unknown channel {tr.channel!r}")
            if not (tr.base_rate >= 0 and math.isfinite(tr.base_rate)):
                raise InvalidParameterError(f"transition {tr.source}->{tr.target} needs a finite base rate >= 0")
        if not self.shelf_lifetime > 0 or not self.p_lifetime > 0:
            raise InvalidParameterError("lifetimes must be > 0")
        self._index.update({label: i for i, label in enumerate(labels)})

    @property
    def size(self) -> int:
        return len(self.states)

    @property
    def decay_rate(self) -> float:
        return 1.0 / self.p_lifetime

    @property
    def linewidth(self) -> float:
        return self.decay_rate / (2 * math.pi)

    def index(self, label: str) -> int:
        return self._index[label]

    def label_for(self, role: str) -> str:
        return next(s.label for s in self.states if s.role == role)

    def basis_state(self, role: str) -> np.ndarray:
        p = np.zeros(self.size)
        p[self.index(self.label_for(role))] = 1.0
        return p

    def scale_channel(self, channel: str, factor: float) -> 'LevelScheme':
        """Copy with every base rate on ``channel`` multiplied by ``factor``."""
        if channel not in CHANNELS or not factor >= 0:
            raise InvalidParameterError(f"cannot scale channel {channel!r} by {factor}")
        transitions = tuple(
            replace(tr, base_rate=tr.base_rate * factor) if tr.channel == channel else tr
            for tr in self.transitions
        )
        return replace(self, transitions=transitions)

    def channel_rate(self, channel: str) -> float:
        """Largest resonant base rate on a channel."""
        rates = [tr.base_rate for tr in self.transitions if tr.channel == channel and not tr.off_resonant]
        return max(rates, default=0.0)

    @classmethod
    def default(cls, shelf_lifetime: float = DEFAULT_SHELF_LIFETIME, detuning: float = DETUNING_393,
                off_resonant: bool = True, calibrated: bool = True,
                transfer_time: float = TRANSFER_TIME) -> 'LevelScheme':
        """
        The 8-state reduced scheme.

        |down> = S(4,+4) is driven resonantly by 393 nm sigma+ to P3/2(5,+5),
        a closed cycle apart from D decays. |up> = S(3,+3) sees the same beam
        ``detuning`` away, reaching P3/2(4,+4), whose ground-state decays
        return to |up>, fall into |down> or leak to S(4,+3). Two D3/2
        sublevels are repumped by 850 nm sigma+ and pi. The shelf decays with
        ``shelf_lifetime``, half of it back into |down>.
        """
        gamma = 1.0 / P_LIFETIME
        d52, d32 = BRANCH_D52, BRANCH_D32
        to_s = 1.0 - d52 - d32
        drive393 = 1.0 / (transfer_time * d52)
        drive850 = gamma * d32 / 2
        shelf_decay = 0.0 if math.isinf(shelf_lifetime) else 1.0 / shelf_lifetime
        up_share, down_share, leak_share = OFF_RESONANT_S_SPLIT
        a_share, b_share = D32_SPLIT

        states = (
            State('up', 'qubit_up'),
            State('down', 'qubit_down'),
            State('p_55', 'excited'),
            State('p_44', 'excited'),
            State('shelf', 'shelf'),
            State('d32_a', 'repump_reservoir'),
            State('d32_b', 'repump_reservoir'),
            State('leak', 'leak'),
        )
        transitions = [
            Transition('down', 'p_55', drive393, 'drive393'),
            Transition('p_55', 'down', drive393, 'drive393'),
            Transition('p_55', 'down', gamma * to_s, 'spontaneous'),
            Transition('p_55', 'shelf', gamma * d52, 'spontaneous'),
            Transition('p_55', 'd32_a', gamma * d32 * a_share, 'spontaneous'),
            Transition('p_55', 'd32_b', gamma * d32 * b_share, 'spontaneous'),
            Transition('p_44', 'up', gamma * to_s * up_share, 'spontaneous'),
            Transition('p_44', 'down', gamma * to_s * down_share, 'spontaneous'),
            Transition('p_44', 'leak', gamma * to_s * leak_share, 'spontaneous'),
            Transition('p_44', 'shelf', gamma * d52, 'spontaneous'),
            Transition('p_44', 'd32_a', gamma * d32 * a_share, 'spontaneous'),
            Transition('p_44', 'd32_b', gamma * d32 * b_share, 'spontaneous'),
            Transition('d32_a', 'p_55', drive850, 'drive850_sigma'),
            Transition('p_55', 'd32_a', drive850, 'drive850_sigma'),
            Transition('d32_b', 'p_55', drive850, 'drive850_pi'),
            Transition('p_55', 'd32_b', drive850, 'drive850_pi'),
            Transition('shelf', 'down', shelf_decay * SHELF_DECAY_TO_DOWN, 'spontaneous'),
            Transition('shelf', 'leak', shelf_decay * (1 - SHELF_DECAY_TO_DOWN), 'spontaneous'),
        ]
        if off_resonant:
            transitions += [
                Transition('up', 'p_44', drive393, 'drive393', off_resonant=True),
                Transition('p_44', 'up', drive393, 'drive393', off_resonant=True),
            ]
        scheme = cls('ca43-reduced', states, tuple(transitions), shelf_lifetime=shelf_lifetime,
                     p_lifetime=P_LIFETIME, detuning=detuning, branching=(d52, d32))
        if calibrated:
            scheme = calibrate_drive393(scheme, transfer_time)
        return scheme

    @classmethod
    def from_mapping(cls, data: Mapping, source: str = '<mapping>') -> 'LevelScheme':
        try:
            constants = data.get('constants', {}) or {}
            states = tuple(State(str(s['label']), str(s['role'])) for s in data['states'])
            transitions = tuple(
                Transition(
                    str(t['from']), str(t['to']), float(t['base_rate']), str(t['channel']),
                    bool(t.get('off_resonant', False)),
                )
                for t in data['transitions']
            )
            scheme = cls(
                name=str(data.get('name', Path(source).stem)),
                states=states,
                transitions=transitions,
                shelf_lifetime=float(constants.get('shelf_lifetime', DEFAULT_SHELF_LIFETIME)),
                p_lifetime=float(constants.get('p_lifetime', P_LIFETIME)),
                detuning=float(constants.get('detuning', DETUNING_393)),
                branching=tuple(constants.get('branching', (BRANCH_D52, BRANCH_D32))),
            )
            calibration = data.get('calibration') or {}
        except InvalidParameterError as e:
            raise ParseError(str(e), source=source) from e
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ParseError(f"malformed level scheme: {e!r}", source=source) from e
        if 'transfer_time' in calibration:
            scheme = calibrate_drive393(scheme, float(calibration['transfer_time']))
        return scheme

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> 'LevelScheme':
        return cls.from_mapping(load_yaml(path), source=str(path))

    def to_mapping(self) -> Dict:
        return {
            'name': self.name,
            'constants': {
                'shelf_lifetime': self.shelf_lifetime,
                'p_lifetime': self.p_lifetime,
                'detuning': self.detuning,
                'branching': list(self.branching),
            },
            'states': [{'label': s.label, 'role': s.role} for s in self.states],
            'transitions': [
                {'from': t.source, 'to': t.target, 'base_rate': t.base_rate, 'channel': t.channel,
                 **({'off_resonant': True} if t.off_resonant else {})}
                for t in self.transitions
            ],
        }

    def to_yaml(self, path: Union[str, Path]) -> None:
        save_yaml(self.to_mapping(), path)


def _check_controls(controls: Controls) -> None:
    for channel, value in controls.items():
        if channel not in CONTROL_CHANNELS:
            raise InvalidParameterError(f"unknown control channel {channel!r}")
        if not (value >= 0 and math.isfinite(value)):
            raise InvalidParameterError(f"control {channel} must be finite and >= 0, got {value}")


def _multiplier(scheme: LevelScheme, tr: Transition, controls: Controls) -> float:
    if tr.channel == 'spontaneous':
        return 1.0
    intensity = controls.get(tr.channel, 0.0)
    if tr.off_resonant and intensity > 0:
        saturation = 2 * tr.base_rate * intensity / scheme.decay_rate
        return intensity * suppression_factor(scheme.detuning, scheme.linewidth, saturation)
    return intensity


def build_generator(scheme: LevelScheme, controls: Optional[Controls] = None) -> np.ndarray:
    """
    Rate matrix G with dp/dt = G p for the given control intensities.

    Off-diagonal entries are summed transition rates; each diagonal entry is
    minus its column's off-diagonal sum, so every column sums to zero.
    """
    controls = dict(controls or {})
    _check_controls(controls)
    G = np.zeros((scheme.size, scheme.size))
    for tr in scheme.transitions:
        rate = tr.base_rate * _multiplier(scheme, tr, controls)
        if rate:
            G[scheme.index(tr.target), scheme.index(tr.source)] += rate
    G[np.diag_indices_from(G)] = -G.sum(axis=0)
    return G


def _check_generator(G: np.ndarray) -> None:
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InvalidParameterError("generator must be a square matrix")
    off_diagonal = G - np.diag(np.diag(G))
    scale = max(1.0, float(np.abs(G).max(initial=0.0)))
    if (off_diagonal < 0).any():
        raise InvalidParameterError("generator has negative off-diagonal rates")
    if np.abs(G.sum(axis=0)).max(initial=0.0) > POPULATION_TOLERANCE * scale:
        raise InvalidParameterError("generator columns do not sum to zero")


def _normalize(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=0)


def propagate(populations, G: np.ndarray, duration: float) -> np.ndarray:
    """
    Populations after ``duration`` seconds: exp(G t) p, clipped and renormalized.
    """
    p = np.asarray(populations, dtype=float)
    _check_generator(G)
    if p.shape != (G.shape[0],):
        raise InvalidParameterError(f"populations have shape {p.shape}, generator is {G.shape}")
    if (p < 0).any() or abs(p.sum() - 1.0) > POPULATION_TOLERANCE:
        raise InvalidParameterError("populations must be non-negative and sum to 1")
    if duration < 0:
        raise InvalidParameterError(f"duration must be >= 0, got {duration}")
    if duration == 0:
        return p.copy()
    return _normalize(linalg.expm(G * duration) @ p)


@dataclass(frozen=True)
class Segment:
    duration: float
    controls: Dict[str, float]


@dataclass(frozen=True)
class PulseSchedule:
    """
    Ordered drive segments, repeated ``cycles`` times.

    An empty schedule is a zero-length transfer.
    """

    segments: Tuple[Segment, ...]
    cycles: int = 1

    def __post_init__(self):
        if int(self.cycles) != self.cycles or self.cycles < 1:
            raise InvalidParameterError(f"cycles must be an integer >= 1, got {self.cycles}")
        for segment in self.segments:
            if not (segment.duration > 0 and math.isfinite(segment.duration)):
                raise InvalidParameterError(f"segment durations must be > 0, got {segment.duration}")
            _check_controls(segment.controls)

    @property
    def total_duration(self) -> float:
        return self.cycles * sum(s.duration for s in self.segments)

    @classmethod
    def continuous(cls, t_T: float, intensity_393: float, intensity_850: float = INTENSITY_850,
                   polarization_850: Sequence[float] = POLARIZATION_850) -> 'PulseSchedule':
        """One simultaneous 393 nm + 850 nm pulse; the 850 nm beam is split by polarization."""
        if t_T < 0:
            raise InvalidParameterError(f"t_T must be >= 0, got {t_T}")
        if t_T == 0:
            return cls(())
        controls = {
            'drive393': intensity_393,
            'drive850_sigma': polarization_850[0] * intensity_850,
            'drive850_pi': polarization_850[1] * intensity_850,
        }
        return cls((Segment(t_T, controls),))

    @classmethod
    def pulsed(cls, t_T: float, intensity_393: float, durations: Sequence[float],
               cycles: Optional[int] = None, intensity_850: float = INTENSITY_850) -> 'PulseSchedule':
        """
        Repeated (393 sigma+, 850 sigma+, 850 pi) pulses filling ``t_T``.

        Without ``cycles`` the count is the nearest integer to t_T / unit; the
        durations are then rescaled so the schedule lasts exactly t_T.
        """
        if t_T < 0:
            raise InvalidParameterError(f"t_T must be >= 0, got {t_T}")
        if t_T == 0:
            return cls(())
        durations = [float(d) for d in durations]
        if len(durations) != 3 or min(durations) <= 0:
            raise InvalidParameterError("pulsed schedule needs three positive durations")
        unit = sum(durations)
        if cycles is None:
            cycles = max(1, int(round(t_T / unit)))
        scale = t_T / (cycles * unit)
        d393, d_sigma, d_pi = (d * scale for d in durations)
        return cls((
            Segment(d393, {'drive393': intensity_393}),
            Segment(d_sigma, {'drive850_sigma': intensity_850}),
            Segment(d_pi, {'drive850_pi': intensity_850}),
        ), cycles=cycles)

    @classmethod
    def from_mapping(cls, data: Mapping, source: str = '<mapping>') -> 'PulseSchedule':
        try:
            segments = tuple(
                Segment(float(s['duration']), {str(k): float(v) for k, v in (s.get('controls') or {}).items()})
                for s in data['segments']
            )
            return cls(segments, cycles=int(data.get('cycles', 1)))
        except InvalidParameterError as e:
            raise ParseError(str(e), source=source) from e
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ParseError(f"malformed pulse schedule: {e!r}", source=source) from e

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> 'PulseSchedule':
        return cls.from_mapping(load_yaml(path), source=str(path))

    def to_mapping(self) -> Dict:
        return {
            'cycles': self.cycles,
            'segments': [{'duration': s.duration, 'controls': dict(s.controls)} for s in self.segments],
        }

    def to_yaml(self, path: Union[str, Path]) -> None:
        save_yaml(self.to_mapping(), path)


def schedule_propagator(scheme: LevelScheme, schedule: PulseSchedule) -> np.ndarray:
    """Transfer matrix of a whole schedule."""
    unit = np.eye(scheme.size)
    for segment in schedule.segments:
        unit = linalg.expm(build_generator(scheme, segment.controls) * segment.duration) @ unit
    if schedule.cycles == 1:
        return unit
    return np.linalg.matrix_power(unit, schedule.cycles)


@dataclass
class ShelvingResult:
    eps_T: float
    eps_up: float
    eps_down: float
    schedule: PulseSchedule
    t_T: float
    mode: Optional[str] = None
    intensity_393: Optional[float] = None
    converged: bool = True


def shelving_error(scheme: LevelScheme, schedule: PulseSchedule) -> ShelvingResult:
    """
    Average transfer error of a schedule.

    eps_down is the population outside the shelf after starting in |down>;
    eps_up is the shelf population after starting in |up>.
    """
    transfer = schedule_propagator(scheme, schedule)
    starts = np.column_stack([scheme.basis_state('qubit_down'), scheme.basis_state('qubit_up')])
    final = _normalize(transfer @ starts)
    shelf = scheme.index(scheme.label_for('shelf'))
    eps_down = float(max(1.0 - final[shelf, 0], 0.0))
    eps_up = float(final[shelf, 1])
    return ShelvingResult((eps_up + eps_down) / 2, eps_up, eps_down, schedule, schedule.total_duration)


def calibrate_drive393(scheme: LevelScheme, target_time: float = TRANSFER_TIME,
                       reference_intensity: float = 1.0) -> LevelScheme:
    """
    Rescale the 393 nm channel so the shelf fills to 1 - 1/e from |down> in ``target_time``.

    The calibration drive is continuous, with the 850 nm repumper on.
    """
    if not target_time > 0:
        raise InvalidParameterError(f"target_time must be > 0, got {target_time}")
    goal = 1.0 - math.exp(-1.0)
    shelf = scheme.index(scheme.label_for('shelf'))
    start = scheme.basis_state('qubit_down')

    def shortfall(log_factor: float) -> float:
        trial = scheme.scale_channel('drive393', 10.0 ** log_factor)
        G = build_generator(trial, PulseSchedule.continuous(target_time, reference_intensity).segments[0].controls)
        return propagate(start, G, target_time)[shelf] - goal

    try:
        log_factor = optimize.brentq(shortfall, -6.0, 6.0, xtol=1e-10)
    except ValueError as e:
        raise InvalidParameterError(
            f"cannot reach a {target_time:g} s transfer time by scaling the 393 nm drive"
        ) from e
    calibrated = scheme.scale_channel('drive393', 10.0 ** log_factor)
    logger.info(
        f"Calibrated drive393 base rate to {calibrated.channel_rate('drive393'):.4g} /s "
        f"for a {target_time * 1e6:g} us transfer time"
    )
    return calibrated


def _continuous_error(scheme: LevelScheme, t_T: float, log_intensity: float) -> float:
    return shelving_error(scheme, PulseSchedule.continuous(t_T, 10.0 ** log_intensity)).eps_T


def _golden_search(objective, center: float) -> optimize.OptimizeResult:
    return optimize.minimize_scalar(objective, bracket=(center, center + 0.25), method='golden',
                                    options={'xtol': 1e-5, 'maxiter': 200})


def _grid_search(objective) -> optimize.OptimizeResult:
    grid = np.linspace(*LOG_INTENSITY_RANGE, 31)
    values = [objective(x) for x in grid]
    i = int(np.argmin(values))
    if 0 < i < grid.size - 1 and values[i - 1] > values[i] < values[i + 1]:
        return optimize.minimize_scalar(objective, bracket=(grid[i - 1], grid[i], grid[i + 1]),
                                        method='golden', options={'xtol': 1e-5, 'maxiter': 200})
    # Flat or edge minimum: keep the grid point, flag only a bracket edge.
    return optimize.OptimizeResult(x=grid[i], fun=values[i], success=0 < i < grid.size - 1)


def _optimize_continuous(scheme: LevelScheme, t_T: float, start: Optional[float]) -> ShelvingResult:
    def objective(log_intensity):
        return _continuous_error(scheme, t_T, log_intensity)

    result = None
    if start is not None:
        try:
            result = _golden_search(objective, float(start))
        except (ValueError, RuntimeError):
            logger.debug(f"No bracket from start {start}; falling back to a grid search")
    if result is None:
        result = _grid_search(objective)
    best = shelving_error(scheme, PulseSchedule.continuous(t_T, 10.0 ** float(result.x)))
    best.mode, best.intensity_393, best.converged = 'continuous', 10.0 ** float(result.x), bool(result.success)
    return best


def _cycle_candidates(t_T: float) -> List[int]:
    n_max = max(1, int(t_T / MIN_PULSED_UNIT))
    return sorted({int(round(v)) for v in np.geomspace(1, n_max, 10)})


def _optimize_pulsed(scheme: LevelScheme, t_T: float, start: Optional[float]) -> ShelvingResult:
    continuous = _optimize_continuous(scheme, t_T, None)
    if start is None:
        start = math.log10(continuous.intensity_393)

    best = None
    for cycles in _cycle_candidates(t_T):
        unit = t_T / cycles

        def schedule_for(x):
            log_intensity, log_sigma, log_pi = x
            d_sigma, d_pi = 10.0 ** log_sigma, 10.0 ** log_pi
            d393 = unit - d_sigma - d_pi
            if d393 <= 0:
                return None
            return PulseSchedule.pulsed(t_T, 10.0 ** log_intensity, (d393, d_sigma, d_pi), cycles=cycles)

        def objective(x):
            schedule = schedule_for(x)
            return 1.0 if schedule is None else shelving_error(scheme, schedule).eps_T

        repump = math.log10(min(50e-9, unit / 10))
        x0 = np.array([start, repump, repump])
        simplex = np.vstack([x0, x0 + np.diag([0.3, 0.3, 0.3])])
        result = optimize.minimize(objective, x0, method='Nelder-Mead',
                                   options={'initial_simplex': simplex, 'xatol': 1e-4, 'fatol': 1e-12,
                                            'maxiter': 600})
        x, converged = result.x, bool(result.success)
        if not converged:
            try:
                fallback = _golden_search(lambda v: objective([v, x[1], x[2]]), x[0])
            except (ValueError, RuntimeError):
                fallback = None
            if fallback is not None:
                if fallback.fun < result.fun:
                    x = np.array([fallback.x, x[1], x[2]])
                converged = bool(fallback.success)
        schedule = schedule_for(x)
        if schedule is None:
            continue
        candidate = shelving_error(scheme, schedule)
        candidate.mode, candidate.intensity_393, candidate.converged = 'pulsed', 10.0 ** float(x[0]), converged
        if best is None or candidate.eps_T < best.eps_T:
            best = candidate
    # Simultaneous drive is the many-cycle limit of the pulse train.
    if best is None or continuous.eps_T < best.eps_T:
        logger.debug(f"t_T={t_T:g} s: no finite pulse train beats simultaneous drive")
        best = replace(continuous, mode='pulsed')
    return best


def optimize_shelving(scheme: LevelScheme, t_T: float, mode: str = 'continuous',
                      start: Optional[float] = None) -> ShelvingResult:
    """
    Minimize eps_T at a fixed total transfer time.

    Continuous mode searches the 393 nm intensity (log grid, then golden
    section). Pulsed mode scans cycle counts and, for each, runs a simplex
    search over the 393 nm intensity and the two 850 nm pulse durations; the
    393 nm pulse takes the rest of each cycle. The continuous optimum stands in
    for the infinite-cycle train, so pulsed eps_T never exceeds continuous.

    Args:
        scheme: Level scheme
        t_T: Total transfer time (s)
        mode: 'continuous' or 'pulsed'
        start: Optional starting log10 intensity for the search

    Returns:
        ShelvingResult; ``converged`` is False when an optimizer hit its cap
    """
    if not t_T > 0:
        raise InvalidParameterError(f"t_T must be > 0, got {t_T}")
    if mode == 'continuous':
        result = _optimize_continuous(scheme, t_T, start)
    elif mode == 'pulsed':
        result = _optimize_pulsed(scheme, t_T, start)
    else:
        raise InvalidParameterError(f"mode must be 'continuous' or 'pulsed', got {mode!r}")
    if not result.converged:
        logger.warning(f"Shelving optimizer did not converge at t_T={t_T:g} s ({mode}); using best found")
    logger.debug(f"t_T={t_T:g} s {mode}: eps_T={result.eps_T:.3e} at I393={result.intensity_393:.3g}")
    return result


def default_tT_grid() -> List[float]:
    return list(np.geomspace(5e-6, 5e-3, 13))


def sweep_shelving(scheme: LevelScheme, t_T_list: Sequence[float],
                   modes: Sequence[str] = ('continuous', 'pulsed')) -> List[SweepRecord]:
    """Optimized eps_T per (t_T, mode), ordered by mode then t_T."""
    t_T_list = sorted(set(float(t) for t in t_T_list))
    if not t_T_list or not modes:
        raise InvalidParameterError("shelving sweep needs at least one t_T and one mode")
    records = []
    for mode in modes:
        for t_T in t_T_list:
            result = optimize_shelving(scheme, t_T, mode)
            records.append(SweepRecord(
                't_T', t_T, mode, result.eps_T, result.eps_up, result.eps_down, readout_time=t_T,
                derived={
                    'intensity_393': result.intensity_393,
                    'cycles': result.schedule.cycles,
                    'converged': result.converged,
                },
            ))
        logger.info(f"Shelving sweep ({mode}): minimum eps_T={min(r.eps for r in records if r.method == mode):.3e}")
    return records


def schedule_record(scheme: LevelScheme, schedule: PulseSchedule) -> SweepRecord:
    """Sweep-style record for one user-supplied schedule."""
    result = shelving_error(scheme, schedule)
    return SweepRecord('t_T', result.t_T, 'schedule', result.eps_T, result.eps_up, result.eps_down,
                       readout_time=result.t_T, derived={'cycles': schedule.cycles})
