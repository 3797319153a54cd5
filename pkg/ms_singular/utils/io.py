"""CSV and JSON sidecar helpers shared by every exporter."""

import hashlib
import json
import os
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from ..errors import MissingArtifact


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def write_csv(path: str, columns: Mapping[str, Any]) -> str:
    """Write equally long 1-D columns as a comma separated table with a header row.

    Args:
        path: Destination file.
        columns: Ordered mapping of column name to values.

    Returns:
        The path written.
    """
    names = list(columns.keys())
    data = np.column_stack([np.asarray(columns[name], dtype=float).ravel() for name in names])
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    np.savetxt(path, data, delimiter=',', header=','.join(names), comments='', fmt='%.17g')
    return path


def read_csv(path: str) -> Dict[str, np.ndarray]:
    """Read a table written by :func:`write_csv` back into named columns."""
    if not os.path.exists(path):
        raise MissingArtifact(f'CSV file not found: {path}')
    with open(path, 'r', encoding='utf-8') as f:
        header = f.readline().strip().split(',')
    data = np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2)
    return {name: data[:, i].copy() for i, name in enumerate(header)}


def write_json(path: str, payload: Any) -> str:
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        f.write('\n')
    return path


def read_json(path: str) -> Any:
    if not os.path.exists(path):
        raise MissingArtifact(f'JSON file not found: {path}')
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def array_digest(*arrays: np.ndarray) -> str:
    """SHA-256 over the raw float64 bytes of the given arrays (shape included)."""
    digest = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        digest.update(repr(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def grid_columns(rho: np.ndarray, y: np.ndarray, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten a (Ny, Nr) field into long-format (rho, y, value) columns."""
    rr, yy = np.meshgrid(rho, y)
    return rr.ravel(), yy.ravel(), np.asarray(values).ravel()


def _json_default(obj: Any):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, 'model_dump'):
        return obj.model_dump(mode='json')
    raise TypeError(f'Object of type {type(obj).__name__} is not JSON serializable')
