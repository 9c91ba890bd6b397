"""
Export utilities for sweep tables and per-trial records.
Supports CSV (with a commented provenance header) and JSON export formats.
"""

import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

TOOL_NAME = 'ion-readout'
TOOL_VERSION = '0.1.0'


class ExportUtils:
    """Utility class for writing result tables."""

    @staticmethod
    def build_header(config_hash: str, seed: Optional[int], rng: Optional[str] = None,
                     **extra: Any) -> Dict[str, Any]:
        """
        Provenance header embedded in every output file.

        Args:
            config_hash: SHA-256 of the canonical configuration
            seed: Master seed, recorded verbatim
            rng: Name of the random number generator
            extra: Additional key/value pairs (command, method, ...)

        Returns:
            Ordered header dictionary
        """
        header = {
            'tool': TOOL_NAME,
            'version': TOOL_VERSION,
            'config_hash': config_hash,
            'seed': seed,
        }
        if rng is not None:
            header['rng'] = rng
        header.update(extra)
        return header

    @staticmethod
    def to_csv_text(df: pd.DataFrame, header: Mapping[str, Any]) -> str:
        output = io.StringIO()
        for key, value in header.items():
            output.write(f"# {key}: {value}\n")
        df.to_csv(output, index=False, float_format='%.10g', lineterminator='\n')
        return output.getvalue()

    @staticmethod
    def to_json_text(df: pd.DataFrame, header: Mapping[str, Any]) -> str:
        # JSON has no comments; the header becomes a sibling of the records.
        records = json.loads(df.replace({np.nan: None}).to_json(orient='records', double_precision=15))
        return json.dumps({'header': dict(header), 'records': records}, indent=2) + '\n'

    @staticmethod
    def write_atomic(text: str, path: Union[str, Path]) -> Path:
        """Write text to a temp file in the destination directory, then rename over ``path``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
        try:
            with os.fdopen(fd, 'w', newline='') as f:
                f.write(text)
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
        return path

    @staticmethod
    def write_table(df: pd.DataFrame, path: Union[str, Path], header: Mapping[str, Any],
                    emit: str = 'csv') -> Path:
        """
        Write a table as CSV or JSON.

        Args:
            df: Table to write
            path: Destination; the suffix is replaced to match ``emit``
            header: Provenance header (see build_header)
            emit: 'csv' or 'json'

        Returns:
            Path actually written
        """
        path = Path(path)
        if emit == 'csv':
            text = ExportUtils.to_csv_text(df, header)
            path = path.with_suffix('.csv')
        elif emit == 'json':
            text = ExportUtils.to_json_text(df, header)
            path = path.with_suffix('.json')
        else:
            raise ValueError(f"Unsupported format: {emit}")

        ExportUtils.write_atomic(text, path)
        logger.info(f"Wrote {len(df)} rows to {path}")
        return path

    @staticmethod
    def read_table(path: Union[str, Path]) -> pd.DataFrame:
        """Read back a CSV written by write_table, skipping header comments."""
        return pd.read_csv(path, comment='#')
