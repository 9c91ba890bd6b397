import hashlib
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import yaml
from dotenv import dotenv_values

from errors import ConfigError, ParseError

logger = logging.getLogger(__name__)

ENV_PREFIX = 'IONREADOUT_'

DEFAULTS: Dict[str, Any] = {
    'bright_rate': 55800.0,
    'dark_rate': 442.0,
    'shelf_lifetime': 1.168,
    'sub_bin_duration': 10e-6,
    'sub_bin_count': 200,
    'dark_count_file': None,
    'method': 'ml',
    'N': None,
    'n_c': None,
    'include_decay': None,
    'e_c': 1e-4,
    't_c': 500e-6,
    'trials': 100000,
    'seed': 0,
    'threads': 1,
    'decay_mode': 'exact',
    'output': None,
    'emit': 'csv',
    'N_list': None,
    'ec_list': None,
    'eta_list': [0.5e-2, 1e-2, 2e-2, 4e-2],
    'efficiency': 0.19e-2,
    'scheme_file': None,
    'schedule_file': None,
    'tT_list': None,
    'modes': ['continuous', 'pulsed'],
    'log_level': 'WARNING',
    'records': None,
}

FLOAT_KEYS = {'bright_rate', 'dark_rate', 'shelf_lifetime', 'sub_bin_duration', 'n_c', 'e_c', 't_c', 'efficiency'}
INT_KEYS = {'sub_bin_count', 'N', 'trials', 'seed', 'threads'}
BOOL_KEYS = {'include_decay'}
FLOAT_LIST_KEYS = {'ec_list', 'eta_list', 'tT_list'}
INT_LIST_KEYS = {'N_list'}
STR_LIST_KEYS = {'modes'}
PATH_KEYS = {'dark_count_file', 'scheme_file', 'schedule_file'}
CHOICES = {
    'method': ('threshold', 'ml', 'adaptive', 'constant'),
    'decay_mode': ('exact', 'switch'),
    'emit': ('csv', 'json'),
    'log_level': ('DEBUG', 'INFO', 'WARNING', 'ERROR'),
}


def _split_list(value: Any) -> List[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [part.strip() for part in str(value).replace(';', ',').split(',') if part.strip()]


def _parse_int(text: Any, key: str) -> int:
    # Accepts '1e6' and '1000000' alike.
    number = float(text)
    if not number.is_integer():
        raise ConfigError(f"expected an integer, got {text!r}", field=key)
    return int(number)


def _parse_bool(text: Any, key: str) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ConfigError(f"expected true/false, got {text!r}", field=key)


def coerce_value(key: str, value: Any) -> Any:
    """Convert a raw string (or already typed value) to the key's documented type."""
    if value is None or (isinstance(value, str) and value.strip() == ''):
        return None
    try:
        if key in FLOAT_KEYS:
            return float(value)
        if key in INT_KEYS:
            return _parse_int(value, key)
        if key in BOOL_KEYS:
            return _parse_bool(value, key)
        if key in FLOAT_LIST_KEYS:
            return [float(v) for v in _split_list(value)]
        if key in INT_LIST_KEYS:
            return _parse_int_list(value, key)
        if key in STR_LIST_KEYS:
            return _split_list(value)
        if key == 'log_level':
            return str(value).strip().upper()
        return str(value).strip() if isinstance(value, str) else value
    except (TypeError, ValueError) as e:
        raise ConfigError(f"cannot parse {value!r}: {e}", field=key) from e


def _parse_int_list(value: Any, key: str) -> List[int]:
    """Comma-separated integers; ``a:b`` and ``a:b:step`` are inclusive ranges."""
    result = []
    for part in _split_list(value):
        if ':' in part:
            bounds = [_parse_int(p, key) for p in part.split(':')]
            start, stop = bounds[0], bounds[1]
            step = bounds[2] if len(bounds) > 2 else 1
            if step < 1:
                raise ConfigError(f"range step must be >= 1 in {part!r}", field=key)
            result.extend(range(start, stop + 1, step))
        else:
            result.append(_parse_int(part, key))
    return result


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """
    Load run configuration.
    Priority: command-line overrides > IONREADOUT_* environment > config file > defaults

    Args:
        path: Flat key=value config file
        overrides: Values from command-line flags (None entries are ignored)
        environ: Environment mapping, os.environ by default

    Returns:
        Typed configuration dictionary
    """
    config = dict(DEFAULTS)

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", field='config')
        file_values = dotenv_values(path)
        unknown = sorted(set(file_values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown key(s) in {path}: {', '.join(unknown)}", field=unknown[0])
        config = merge_configs(config, {k: coerce_value(k, v) for k, v in file_values.items()})
        config['config_dir'] = str(path.resolve().parent)
        logger.info(f"Loaded configuration from {path}")

    environ = os.environ if environ is None else environ
    env_values = {
        name[len(ENV_PREFIX):].lower(): value
        for name, value in environ.items()
        if name.startswith(ENV_PREFIX)
    }
    # Keys are case sensitive (N, N_list); match env names case-insensitively.
    by_lower = {k.lower(): k for k in DEFAULTS}
    for lowered, value in env_values.items():
        if lowered in by_lower:
            key = by_lower[lowered]
            config[key] = coerce_value(key, value)
            logger.debug(f"Config {key} taken from environment")

    if overrides:
        config = merge_configs(config, {k: coerce_value(k, v) for k, v in overrides.items() if v is not None})

    return config


def merge_configs(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """
    Merge two configuration dictionaries, with override taking precedence.

    Args:
        base: Base configuration dictionary
        override: Override configuration dictionary

    Returns:
        Merged configuration dictionary
    """
    result = base.copy()

    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = merge_configs(result[key], value)
        else:
            result[key] = value

    return result


def resolve_path(config: Mapping[str, Any], key: str) -> Optional[Path]:
    """Path-valued key, relative paths resolved against the config file's directory."""
    value = config.get(key)
    if not value:
        return None
    path = Path(value)
    if not path.is_absolute() and config.get('config_dir') and not path.exists():
        path = Path(config['config_dir']) / path
    return path


def validate_config(config: Dict[str, Any]) -> tuple[bool, list]:
    """
    Validate configuration for required fields and allowed ranges.

    Args:
        config: Configuration dictionary

    Returns:
        Tuple of (is_valid, list_of_errors); each error names its field
    """
    errors = []

    for key, choices in CHOICES.items():
        if config.get(key) is not None and config[key] not in choices:
            errors.append(f"{key}: must be one of {', '.join(choices)}, got {config[key]!r}")

    for key in ('bright_rate', 'shelf_lifetime', 'sub_bin_duration', 'efficiency'):
        value = config.get(key)
        if value is None or not value > 0 or not math.isfinite(value):
            errors.append(f"{key}: must be a finite number > 0")
    if config.get('dark_rate') is None or not config['dark_rate'] >= 0:
        errors.append("dark_rate: must be >= 0")
    elif config.get('bright_rate') is not None and config['bright_rate'] <= config['dark_rate']:
        errors.append("bright_rate: must exceed dark_rate")

    for key, minimum in (('sub_bin_count', 1), ('trials', 1), ('seed', 0), ('threads', 1)):
        value = config.get(key)
        if value is None or value < minimum:
            errors.append(f"{key}: must be an integer >= {minimum}")

    if config.get('N') is not None and not 1 <= config['N'] <= (config.get('sub_bin_count') or 0):
        errors.append("N: must lie within 1..sub_bin_count")
    if config.get('n_c') is not None and (config['n_c'] < 0 or (config['n_c'] - 0.5) % 1 != 0):
        errors.append("n_c: must be a non-negative half-integer such as 3.5")
    if config.get('e_c') is not None and not 0 <= config['e_c'] < 0.5:
        errors.append("e_c: must lie in [0, 0.5)")
    if config.get('t_c') is not None and not config['t_c'] > 0:
        errors.append("t_c: must be > 0")

    for key in ('N_list', 'ec_list', 'eta_list', 'tT_list', 'modes'):
        if config.get(key) is not None and len(config[key]) == 0:
            errors.append(f"{key}: must not be empty")
    for mode in config.get('modes') or []:
        if mode not in ('continuous', 'pulsed'):
            errors.append(f"modes: unknown mode {mode!r}, expected continuous or pulsed")

    for key in PATH_KEYS:
        path = resolve_path(config, key)
        if path is not None and not path.is_file():
            errors.append(f"{key}: file not found: {path}")

    return len(errors) == 0, errors


def require_valid(config: Dict[str, Any]) -> Dict[str, Any]:
    """Raise ConfigError for the first invalid field."""
    is_valid, errors = validate_config(config)
    if not is_valid:
        field_name, _, message = errors[0].partition(': ')
        extra = f" (and {len(errors) - 1} more)" if len(errors) > 1 else ''
        raise ConfigError(message + extra, field=field_name)
    return config


def canonical_text(config: Mapping[str, Any]) -> str:
    """Key-sorted key=value rendering of every documented key."""
    lines = []
    for key in sorted(DEFAULTS):
        value = config.get(key)
        if isinstance(value, (list, tuple)):
            value = ','.join(repr(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={'' if value is None else value}")
    return '\n'.join(lines) + '\n'


def config_hash(config: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_text(config).encode('utf-8')).hexdigest()


def get_config_summary(config: Dict[str, Any]) -> Dict[str, str]:
    """
    Get a short, printable summary of the run configuration.

    Args:
        config: Configuration dictionary

    Returns:
        Summary dictionary with string values
    """
    summary = {
        'rates': f"R_B={config.get('bright_rate')} R_D={config.get('dark_rate')} /s",
        'timing': f"t_s={config.get('sub_bin_duration')} s x {config.get('sub_bin_count')}",
        'method': str(config.get('method')),
        'trials': str(config.get('trials')),
        'seed': str(config.get('seed')),
        'threads': str(config.get('threads')),
        'dark_count_file': config.get('dark_count_file') or 'Not configured',
        'config_hash': config_hash(config)[:12],
    }

    return summary


def load_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a YAML mapping (level scheme or pulse schedule)."""
    path = Path(path)
    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        line = mark.line + 1 if mark is not None else None
        raise ParseError(f"invalid YAML: {getattr(e, 'problem', e)}", source=str(path), line_number=line) from e
    if not isinstance(data, dict):
        raise ParseError("expected a mapping at the top level", source=str(path))
    return data


def save_yaml(data: Mapping[str, Any], path: Union[str, Path]) -> None:
    with open(path, 'w') as f:
        yaml.safe_dump(dict(data), f, default_flow_style=False, indent=2, sort_keys=False)
