import os
from pathlib import Path

import pytest

from distributions import CountPmf, ReadoutParams, poisson_pmf

DATA_DIR = Path(__file__).resolve().parent.parent / 'data'


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def default_params() -> ReadoutParams:
    return ReadoutParams.defaults()


@pytest.fixture
def short_params() -> ReadoutParams:
    """Default rates with 30 sub-bins (300 us traces) for fast campaigns."""
    return ReadoutParams.defaults(sub_bin_count=30)


@pytest.fixture
def small_pmfs():
    bright = poisson_pmf(0.558)
    dark = poisson_pmf(0.00442)
    detector = CountPmf([0.9, 0.07, 0.02, 0.01])
    return bright, dark, detector


@pytest.fixture
def write_config(tmp_path):
    """Write a flat key=value config file and return its path."""
    def _write(values=None, name='run.cfg'):
        values = values or {}
        path = tmp_path / name
        path.write_text(''.join(f"{key}={value}\n" for key, value in values.items()))
        return path

    return _write


@pytest.fixture
def clean_env(monkeypatch):
    """Remove IONREADOUT_* variables the caller's shell may set."""
    for name in list(os.environ):
        if name.startswith('IONREADOUT_'):
            monkeypatch.delenv(name)
