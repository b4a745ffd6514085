"""
File Handler
Atomic writes, CSV tables and the field snapshot format.

Snapshot layout (little-endian, see docs/OUTPUT_FORMATS.md):
    header  SNAPSHOT_HEADER (32 bytes)
    body    N**d float64 values, C order
"""
import contextlib
import logging
import os
from typing import Generator, IO, Optional

import numpy as np
import pandas as pd

from itm.utils.errors import ItmError, ERR_FILE_IO

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b'ITMF'
SNAPSHOT_VERSION = 1
SNAPSHOT_HEADER = np.dtype([
    ('magic', 'S4'),
    ('version', '<u4'),
    ('dtype', 'S8'),
    ('d', '<u4'),
    ('N', '<u4'),
    ('time', '<f8'),
])
FLOAT_FORMAT = '%.12e'


@contextlib.contextmanager
def atomic_write(file_path: str, mode: str = 'w', encoding: Optional[str] = 'utf-8') -> Generator[IO, None, None]:
    """Safe write: Write to .tmp then rename to target."""
    temp_path = file_path + ".tmp"
    if 'b' in mode:
        encoding = None
    try:
        with open(temp_path, mode, encoding=encoding) as f:
            yield f
        # Atomic rename (replace)
        os.replace(temp_path, file_path)
    except Exception as e:
        if os.path.exists(temp_path):
            try: os.remove(temp_path)
            except OSError: pass
        raise e


def write_table(df: pd.DataFrame, path: str) -> str:
    """CSV with header row; floats in fixed scientific format so bodies are byte-stable."""
    with atomic_write(path, 'w') as f:
        df.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    logger.debug(f"[Files] Wrote {len(df)} rows to {path}")
    return path


def write_snapshot(path: str, values: np.ndarray, time: float) -> str:
    values = np.ascontiguousarray(values, dtype='<f8')
    header = np.zeros(1, dtype=SNAPSHOT_HEADER)
    header['magic'] = SNAPSHOT_MAGIC
    header['version'] = SNAPSHOT_VERSION
    header['dtype'] = b'float64'
    header['d'] = values.ndim
    header['N'] = values.shape[0]
    header['time'] = time
    with atomic_write(path, 'wb') as f:
        f.write(header.tobytes())
        f.write(values.tobytes(order='C'))
    return path


def read_snapshot(path: str):
    """Returns (values, time)."""
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise ItmError(f"Could not read snapshot: {e}", ERR_FILE_IO, context=path)

    if len(raw) < SNAPSHOT_HEADER.itemsize:
        raise ItmError("Snapshot shorter than its header", ERR_FILE_IO, context=path)
    header = np.frombuffer(raw[:SNAPSHOT_HEADER.itemsize], dtype=SNAPSHOT_HEADER)[0]
    if header['magic'] != SNAPSHOT_MAGIC or int(header['version']) != SNAPSHOT_VERSION:
        raise ItmError("Not an ITM snapshot file", ERR_FILE_IO, context=path)

    d, n = int(header['d']), int(header['N'])
    body = np.frombuffer(raw[SNAPSHOT_HEADER.itemsize:], dtype='<f8')
    if body.size != n ** d:
        raise ItmError(f"Snapshot body has {body.size} values, expected {n ** d}", ERR_FILE_IO, context=path)
    return body.reshape((n,) * d).astype(float), float(header['time'])


def write_snapshot_index(entries, path: str) -> str:
    """Sidecar index: one row per snapshot file (file, field, time, d, N, bytes)."""
    columns = ['file', 'field', 'time', 'd', 'N', 'bytes']
    return write_table(pd.DataFrame(list(entries), columns=columns), path)
