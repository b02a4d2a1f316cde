"""Binary wire formats.

Three container formats share the same conventions: a 4-byte magic,
little-endian u32 header fields, then a dense payload.

  FMX1  float32 feature matrix, n rows (probe examples) by d columns
  BCX1  uint8 binary code matrix, entries restricted to {0, 1}
  STB1  similarity-table cache: length-prefixed key string, model index,
        and one float64 table per ordered model pair (i <= j)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ManifestConsistencyError, ManifestParseError

FMX_MAGIC = b"FMX1"
BCX_MAGIC = b"BCX1"
STB_MAGIC = b"STB1"

_HEADER = struct.Struct("<II")
_U32 = struct.Struct("<I")


def write_feature_matrix(path: str | Path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {m.shape}")
    with open(path, "wb") as fp:
        fp.write(FMX_MAGIC)
        fp.write(_HEADER.pack(m.shape[0], m.shape[1]))
        fp.write(m.tobytes())


def read_feature_matrix(path: str | Path) -> np.ndarray:
    n, d, payload = _read_payload(path, FMX_MAGIC, 4)
    return np.frombuffer(payload, dtype="<f4").reshape(n, d)


def write_code_matrix(path: str | Path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype=np.uint8)
    if m.ndim != 2:
        raise ValueError(f"code matrix must be 2-D, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("code matrix entries must be 0 or 1")
    with open(path, "wb") as fp:
        fp.write(BCX_MAGIC)
        fp.write(_HEADER.pack(m.shape[0], m.shape[1]))
        fp.write(m.tobytes())


def read_code_matrix(path: str | Path) -> np.ndarray:
    n, d, payload = _read_payload(path, BCX_MAGIC, 1)
    m = np.frombuffer(payload, dtype=np.uint8).reshape(n, d)
    if not np.isin(m, (0, 1)).all():
        raise ManifestConsistencyError(f"{path}: code matrix has entries outside {{0,1}}")
    return m


def read_matrix_header(path: str | Path) -> tuple[bytes, int, int]:
    """Read (magic, n, d) without loading the payload."""
    with open(path, "rb") as fp:
        head = fp.read(4 + _HEADER.size)
    if len(head) < 4 + _HEADER.size:
        raise ManifestParseError(f"{path}: truncated header")
    magic = head[:4]
    if magic not in (FMX_MAGIC, BCX_MAGIC):
        raise ManifestParseError(f"{path}: unknown magic {magic!r}")
    n, d = _HEADER.unpack_from(head, 4)
    return magic, n, d


def _read_payload(path: str | Path, magic: bytes, itemsize: int) -> tuple[int, int, bytes]:
    with open(path, "rb") as fp:
        blob = fp.read()
    if blob[:4] != magic:
        raise ManifestParseError(f"{path}: expected magic {magic!r}, got {blob[:4]!r}")
    n, d = _HEADER.unpack_from(blob, 4)
    payload = blob[4 + _HEADER.size:]
    if len(payload) != n * d * itemsize:
        raise ManifestParseError(
            f"{path}: payload is {len(payload)} bytes, header implies {n * d * itemsize}"
        )
    return n, d, payload


def write_similarity_cache(
    path: str | Path,
    key: str,
    model_ids: list[str],
    node_counts: dict[str, int],
    tables: dict[tuple[str, str], np.ndarray],
    warnings: list[dict] | None = None,
) -> None:
    """Persist the node-pair similarity tables for the given content key.

    Tables are stored once per unordered model pair, keyed by (i, j) with
    i <= j in `model_ids` order.
    """
    parts: list[bytes] = [STB_MAGIC, _prefixed(key.encode())]
    parts.append(_U32.pack(len(model_ids)))
    for mid in model_ids:
        parts.append(_prefixed(mid.encode()))
        parts.append(_U32.pack(node_counts[mid]))
    ordered = sorted(
        tables.items(),
        key=lambda kv: (model_ids.index(kv[0][0]), model_ids.index(kv[0][1])),
    )
    parts.append(_U32.pack(len(ordered)))
    for (mi, mj), tab in ordered:
        t = np.ascontiguousarray(tab, dtype="<f8")
        parts.append(_prefixed(mi.encode()))
        parts.append(_prefixed(mj.encode()))
        parts.append(_HEADER.pack(t.shape[0], t.shape[1]))
        parts.append(t.tobytes())
    parts.append(_prefixed(json.dumps(warnings or [], sort_keys=True).encode()))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fp:
        fp.write(b"".join(parts))


def read_similarity_cache(
    path: str | Path,
) -> tuple[str, list[str], dict[str, int], dict[tuple[str, str], np.ndarray], list[dict]]:
    with open(path, "rb") as fp:
        blob = fp.read()
    if blob[:4] != STB_MAGIC:
        raise ManifestParseError(f"{path}: expected magic {STB_MAGIC!r}, got {blob[:4]!r}")
    off = 4
    key, off = _take_prefixed(blob, off, path)
    (num_models,) = _U32.unpack_from(blob, off)
    off += 4
    model_ids: list[str] = []
    node_counts: dict[str, int] = {}
    for _ in range(num_models):
        mid, off = _take_prefixed(blob, off, path)
        (count,) = _U32.unpack_from(blob, off)
        off += 4
        model_ids.append(mid.decode())
        node_counts[mid.decode()] = count
    (num_tables,) = _U32.unpack_from(blob, off)
    off += 4
    tables: dict[tuple[str, str], np.ndarray] = {}
    for _ in range(num_tables):
        mi, off = _take_prefixed(blob, off, path)
        mj, off = _take_prefixed(blob, off, path)
        rows, cols = _HEADER.unpack_from(blob, off)
        off += _HEADER.size
        nbytes = rows * cols * 8
        tab = np.frombuffer(blob[off:off + nbytes], dtype="<f8").reshape(rows, cols)
        off += nbytes
        tables[(mi.decode(), mj.decode())] = tab
    warn_blob, off = _take_prefixed(blob, off, path)
    warnings = json.loads(warn_blob.decode())
    return key.decode(), model_ids, node_counts, tables, warnings


def _prefixed(payload: bytes) -> bytes:
    return _U32.pack(len(payload)) + payload


def _take_prefixed(blob: bytes, off: int, path) -> tuple[bytes, int]:
    if off + 4 > len(blob):
        raise ManifestParseError(f"{path}: truncated cache file")
    (length,) = _U32.unpack_from(blob, off)
    off += 4
    if off + length > len(blob):
        raise ManifestParseError(f"{path}: truncated cache file")
    return blob[off:off + length], off + length
