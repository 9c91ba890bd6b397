"""
Environment detection and utility functions.
Handles worker-count limits and the version report logged at debug level.
"""

import logging
import os
import platform
import sys
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd
import scipy

logger = logging.getLogger(__name__)


def detect_environment() -> str:
    """
    Detect the current runtime environment.

    Returns:
        Environment string: 'ci', 'codespace', 'container' or 'local'
    """
    if os.environ.get('CI') or 'GITHUB_ACTIONS' in os.environ:
        return 'ci'

    if 'CODESPACE_NAME' in os.environ:
        return 'codespace'

    if os.path.exists('/.dockerenv'):
        return 'container'

    return 'local'


def available_cpus() -> int:
    if hasattr(os, 'sched_getaffinity'):
        return max(1, len(os.sched_getaffinity(0)))
    return os.cpu_count() or 1


def resolve_worker_count(requested: Optional[int]) -> int:
    """
    Number of worker processes to use.

    Args:
        requested: Requested workers; None or 0 means all available CPUs

    Returns:
        Worker count between 1 and the available CPUs
    """
    cpus = available_cpus()
    if not requested:
        return cpus
    if requested < 0:
        raise ValueError(f"worker count must be >= 0, got {requested}")
    if requested > cpus:
        logger.info(f"Capping {requested} requested workers at {cpus} available CPUs")
    return min(requested, cpus)


def get_environment_info(env_type: Optional[str] = None) -> Dict[str, Any]:
    """
    Get detailed information about the current environment.

    Args:
        env_type: Environment type from detect_environment()

    Returns:
        Dictionary with environment details
    """
    return {
        'type': env_type or detect_environment(),
        'python_version': f"{sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}",
        'numpy_version': np.__version__,
        'scipy_version': scipy.__version__,
        'pandas_version': pd.__version__,
        'platform': platform.platform(),
        'architecture': platform.architecture()[0],
        'cpus': available_cpus(),
    }
