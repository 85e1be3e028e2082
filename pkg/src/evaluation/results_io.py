"""
Schema-versioned result tables (CSV) and JSON run manifests.

Every row written carries `schema_version` and `config_hash`; appending to a file
written with another schema version is refused rather than coerced.
"""
import json
import os
import platform
from datetime import datetime
from typing import Iterable, List, Mapping, Optional

import pandas as pd
from batchgenerators.utilities.file_and_folder_operations import isfile, maybe_mkdir_p, save_json

from src.utilities.exceptions import ResultsIOError, SchemaVersionError

SCHEMA_VERSION = 1


def _frame_from_rows(rows: Iterable[Mapping], config_hash: str) -> pd.DataFrame:
    df = pd.DataFrame(list(rows))
    df.insert(0, 'schema_version', SCHEMA_VERSION)
    df.insert(1, 'config_hash', config_hash)
    return df


def read_results(path: str) -> pd.DataFrame:
    if not isfile(path):
        raise ResultsIOError(path, "Results file not found")
    try:
        df = pd.read_csv(path, dtype={'config_hash': str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ResultsIOError(path, f"Could not read results: {e}") from e
    if 'schema_version' not in df.columns:
        raise SchemaVersionError(f"{path} has no schema_version column")
    versions = set(df['schema_version'].unique().tolist())
    if versions != {SCHEMA_VERSION}:
        raise SchemaVersionError(f"{path} was written with schema version(s) {sorted(versions)}, "
                                 f"expected {SCHEMA_VERSION}")
    return df


def persist_results(rows: Iterable[Mapping], path: str, config_hash: str = '', append: bool = True) -> pd.DataFrame:
    """
    Write result rows to `path`. With append=True an existing file is extended; its
    schema version and columns must match.
    """
    df = _frame_from_rows(rows, config_hash)
    folder = os.path.dirname(os.path.abspath(path))
    try:
        maybe_mkdir_p(folder)
        if append and isfile(path):
            existing = read_results(path)
            if list(existing.columns) != list(df.columns):
                raise SchemaVersionError(f"{path} has columns {list(existing.columns)}, "
                                         f"new rows have {list(df.columns)}")
            df.to_csv(path, mode='a', header=False, index=False)
        else:
            df.to_csv(path, index=False)
    except OSError as e:
        raise ResultsIOError(path, f"Could not write results: {e}") from e
    return df


def write_run_manifest(path: str, config: dict, config_hash: str, outputs: Optional[List[str]] = None,
                       extra: Optional[dict] = None):
    manifest = {
        'schema_version': SCHEMA_VERSION,
        'config_hash': config_hash,
        'config': config,
        'outputs': outputs or [],
        'created': datetime.now().isoformat(timespec='seconds'),
        'python': platform.python_version(),
    }
    if extra:
        manifest.update(extra)
    try:
        maybe_mkdir_p(os.path.dirname(os.path.abspath(path)))
        save_json(json.loads(json.dumps(manifest, default=str)), path, sort_keys=True)
    except OSError as e:
        raise ResultsIOError(path, f"Could not write run manifest: {e}") from e
    return manifest
