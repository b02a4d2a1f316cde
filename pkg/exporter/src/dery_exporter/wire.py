"""Writers for the optimizer's binary wire formats.

Implements the published container layouts (see the optimizer's README):
FMX1 = magic + u32 n + u32 d + n*d float32 LE row-major;
BCX1 = magic + u32 n + u32 d + n*d bytes in {0,1}.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<II")


def write_feature_matrix(path: str | Path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    assert m.ndim == 2
    with open(path, "wb") as fp:
        fp.write(b"FMX1")
        fp.write(_HEADER.pack(*m.shape))
        fp.write(m.tobytes())


def write_code_matrix(path: str | Path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype=np.uint8)
    assert m.ndim == 2
    if not np.isin(m, (0, 1)).all():
        raise ValueError("code matrix entries must be 0 or 1")
    with open(path, "wb") as fp:
        fp.write(b"BCX1")
        fp.write(_HEADER.pack(*m.shape))
        fp.write(m.tobytes())


def read_code_matrix(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    assert blob[:4] == b"BCX1", blob[:4]
    n, d = _HEADER.unpack_from(blob, 4)
    return np.frombuffer(blob[4 + _HEADER.size:], dtype=np.uint8).reshape(n, d)
