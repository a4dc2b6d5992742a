"""
Matrix, edge-list and sidecar storage
Binary matrix → CSV fallback; edge lists and JSON sidecars as plain text
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import DimensionError, IntegrityError, ParseError

logger = logging.getLogger(__name__)

HEADER_DTYPE = np.dtype("<u4")
BODY_DTYPE = np.dtype("<f4")
HEADER_BYTES = 2 * HEADER_DTYPE.itemsize


def write_matrix(path, array: np.ndarray) -> Path:
    """Write a 2-D matrix as .bin (8-byte header + LE float32) or .csv by suffix"""
    path = Path(path)
    array = np.asarray(array)
    if array.ndim != 2:
        raise DimensionError(f"Expected a 2-D matrix for {path}, got shape {array.shape}")
    os.makedirs(path.parent, exist_ok=True)

    if path.suffix == ".csv":
        pd.DataFrame(array.astype(BODY_DTYPE)).to_csv(path, header=False, index=False, float_format="%.9g")
        return path

    rows, cols = array.shape
    with open(path, "wb") as f:
        f.write(np.array([rows, cols], dtype=HEADER_DTYPE).tobytes())
        f.write(np.ascontiguousarray(array, dtype=BODY_DTYPE).tobytes())
    return path


def _read_binary(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < HEADER_BYTES:
        raise DimensionError(f"{path}: truncated header ({len(raw)} bytes)")
    rows, cols = (int(v) for v in np.frombuffer(raw[:HEADER_BYTES], dtype=HEADER_DTYPE))
    expected = rows * cols * BODY_DTYPE.itemsize
    if len(raw) - HEADER_BYTES != expected:
        raise DimensionError(
            f"{path}: header declares {rows}x{cols} ({expected} bytes) but body has {len(raw) - HEADER_BYTES} bytes"
        )
    return np.frombuffer(raw[HEADER_BYTES:], dtype=BODY_DTYPE).reshape(rows, cols).copy()


def _read_csv(path: Path) -> np.ndarray:
    try:
        frame = pd.read_csv(path, header=None, dtype=np.float64)
    except ValueError as e:
        raise ParseError(f"non-numeric feature value ({e})", path=str(path))
    return frame.to_numpy(dtype=BODY_DTYPE)


def read_matrix(path) -> np.ndarray:
    """Read a matrix; a missing .bin falls back to the sibling .csv"""
    path = Path(path)
    if path.suffix == ".csv":
        matrix = _read_csv(path)
    elif path.exists():
        matrix = _read_binary(path)
    elif path.with_suffix(".csv").exists():
        logger.warning(f"{path} not found, falling back to {path.with_suffix('.csv')}")
        matrix = _read_csv(path.with_suffix(".csv"))
    else:
        raise FileNotFoundError(f"Matrix file not found: {path}")

    if not np.all(np.isfinite(matrix)):
        bad = int(np.count_nonzero(~np.isfinite(matrix)))
        raise IntegrityError(f"{path}: {bad} non-finite values")
    return matrix


def write_edge_list(path, adjacency: sp.spmatrix) -> Path:
    """Write `i<TAB>j<TAB>weight` lines sorted by (i, j)"""
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    coo = sp.coo_matrix(adjacency)
    order = np.lexsort((coo.col, coo.row))
    frame = pd.DataFrame({"i": coo.row[order], "j": coo.col[order], "weight": coo.data[order]})
    frame.to_csv(path, sep="\t", header=False, index=False, float_format="%.17g")
    return path


def read_edge_list(path, num_items: int) -> sp.csr_matrix:
    path = Path(path)
    if path.stat().st_size == 0:
        return sp.csr_matrix((num_items, num_items), dtype=np.float64)
    frame = pd.read_csv(path, sep="\t", header=None, names=["i", "j", "weight"])
    if frame.isnull().values.any():
        raise ParseError("malformed edge line", path=str(path))
    rows = frame["i"].to_numpy(dtype=np.int64)
    cols = frame["j"].to_numpy(dtype=np.int64)
    if len(rows) and (rows.max() >= num_items or cols.max() >= num_items or min(rows.min(), cols.min()) < 0):
        raise DimensionError(f"{path}: edge index outside [0, {num_items})")
    return sp.csr_matrix(
        (frame["weight"].to_numpy(dtype=np.float64), (rows, cols)), shape=(num_items, num_items)
    )


def write_sidecar(path, payload: Dict[str, Any]) -> Path:
    """Save a JSON sidecar next to the artifacts it describes"""
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False, default=str)
    return path


def read_sidecar(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
