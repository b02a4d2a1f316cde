"""Representation similarity: linear CKA, its mini-batch estimator, block
functional similarity, and the offline node-pair similarity table.

Linear CKA between activation matrices X (n x d1) and Y (n x d2), both
column-centered, is

    ||Y'X||_F^2 / (||X'X||_F * ||Y'Y||_F)

which never materializes an n x n Gram matrix when n exceeds the feature
widths; for wide features (n <= max(d1, d2)) the equivalent n x n Gram
formulation is cheaper and is used instead.

Functional similarity of two blocks is the sum of the similarities at
their input and output boundaries, a value in [0, 2]. Boundary 0 denotes
the raw probe batch: identical across models by construction, so its
self-similarity is exactly 1; its similarity against any internal node
boundary is not derivable from the manifest and is fixed at 0.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import wire
from .errors import DegenerateSimilarityError, MissingTableEntryError
from .zoo import Block, ZooManifest

logger = logging.getLogger(__name__)

#: Fraction of probe rows used for table construction (1/20 of the probe set).
DEFAULT_SUBSAMPLE = 0.05

_DEGENERATE_NORM = 1e-12


def center_columns(m: np.ndarray) -> np.ndarray:
    """Subtract each column's mean; output is float64."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 2:
        raise ValueError("column centering needs at least 2 rows")
    return m - m.mean(axis=0, keepdims=True)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA similarity in [0, 1] between two same-row-count matrices."""
    xc = center_columns(x)
    yc = center_columns(y)
    if xc.shape[0] != yc.shape[0]:
        raise ValueError(f"row counts differ: {xc.shape[0]} vs {yc.shape[0]}")
    for name, mat in (("x", xc), ("y", yc)):
        if np.linalg.norm(mat) < _DEGENERATE_NORM:
            raise DegenerateSimilarityError(
                f"{name} is constant across the probe batch; similarity undefined"
            )
    n = xc.shape[0]
    if n > max(xc.shape[1], yc.shape[1]):
        cross = yc.T @ xc
        num = float(np.sum(cross * cross))
        den = float(np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc))
    else:
        gx = xc @ xc.T
        gy = yc @ yc.T
        num = float(np.sum(gx * gy))
        den = float(np.linalg.norm(gx) * np.linalg.norm(gy))
    return num / den


def _unbiased_hsic(k: np.ndarray, l: np.ndarray) -> float:
    # U-statistic HSIC estimator; kernels get their diagonals zeroed.
    m = k.shape[0]
    kt = k.copy()
    lt = l.copy()
    np.fill_diagonal(kt, 0.0)
    np.fill_diagonal(lt, 0.0)
    ks = kt.sum()
    ls = lt.sum()
    cross = float(np.sum(kt * lt))
    mixed = float(kt.sum(axis=0) @ lt.sum(axis=1))
    return (cross + ks * ls / ((m - 1) * (m - 2)) - 2.0 * mixed / (m - 2)) / (m * (m - 3))


def minibatch_cka(
    x: np.ndarray,
    y: np.ndarray,
    batch_size: int,
    num_batches: int,
    seed: int,
) -> float:
    """Mean of per-batch CKA estimates over seeded row subsets.

    Each batch is drawn without replacement and contributes the ratio of
    unbiased HSIC estimates; the same seed always yields the same value.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if batch_size < 4:
        # the U-statistic divides by m-3
        raise ValueError("batch_size must be at least 4")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds row count {n}")
    if num_batches < 1:
        raise ValueError("num_batches must be positive")
    rng = np.random.default_rng(seed)
    estimates = np.empty(num_batches)
    for b in range(num_batches):
        idx = rng.choice(n, size=batch_size, replace=False)
        xb = x[idx]
        yb = y[idx]
        kx = xb @ xb.T
        ky = yb @ yb.T
        hxy = _unbiased_hsic(kx, ky)
        hxx = _unbiased_hsic(kx, kx)
        hyy = _unbiased_hsic(ky, ky)
        estimates[b] = hxy / np.sqrt(hxx * hyy)
    return float(estimates.mean())


@dataclass(frozen=True)
class FunctionalSimilarity:
    """Input-boundary plus output-boundary similarity of a block pair."""

    value: float
    input_similarity: float
    output_similarity: float


@dataclass(frozen=True)
class TableWarning:
    model_a: str
    node_a: int
    model_b: str
    node_b: int
    message: str


@dataclass
class SimilarityTable:
    """Dense node-output similarity tables for every ordered model pair.

    `pair(i, j)` is the L_i x L_j node-level matrix; `boundary_matrix(i, j)`
    extends it with the raw-probe boundary at index 0 (see module docstring
    for the boundary convention). Tables are stored once per unordered pair
    and mirrored by transposition.
    """

    model_ids: tuple[str, ...]
    node_counts: dict[str, int]
    tables: dict[tuple[str, str], np.ndarray]
    warnings: tuple[TableWarning, ...] = ()
    key: str | None = None
    cka_evaluations: int = 0
    _boundary_cache: dict[tuple[str, str], np.ndarray] = field(
        default_factory=dict, repr=False
    )

    def pair(self, model_a: str, model_b: str) -> np.ndarray:
        if (model_a, model_b) in self.tables:
            return self.tables[(model_a, model_b)]
        if (model_b, model_a) in self.tables:
            return self.tables[(model_b, model_a)].T
        raise MissingTableEntryError(f"no table for model pair ({model_a}, {model_b})")

    def node_similarity(self, model_a: str, node_a: int, model_b: str, node_b: int) -> float:
        tab = self.pair(model_a, model_b)
        if not (1 <= node_a <= tab.shape[0] and 1 <= node_b <= tab.shape[1]):
            raise MissingTableEntryError(
                f"node pair ({model_a}:{node_a}, {model_b}:{node_b}) outside table "
                f"of shape {tab.shape}"
            )
        return float(tab[node_a - 1, node_b - 1])

    def boundary_matrix(self, model_a: str, model_b: str) -> np.ndarray:
        cached = self._boundary_cache.get((model_a, model_b))
        if cached is not None:
            return cached
        tab = self.pair(model_a, model_b)
        ext = np.zeros((tab.shape[0] + 1, tab.shape[1] + 1))
        ext[0, 0] = 1.0
        ext[1:, 1:] = tab
        self._boundary_cache[(model_a, model_b)] = ext
        return ext

    def boundary_similarity(
        self, model_a: str, boundary_a: int, model_b: str, boundary_b: int
    ) -> float:
        ext = self.boundary_matrix(model_a, model_b)
        if not (0 <= boundary_a < ext.shape[0] and 0 <= boundary_b < ext.shape[1]):
            raise MissingTableEntryError(
                f"boundary pair ({model_a}:{boundary_a}, {model_b}:{boundary_b}) "
                f"outside table of shape {ext.shape}"
            )
        return float(ext[boundary_a, boundary_b])


def block_similarity(table: SimilarityTable, block_a: Block, block_b: Block) -> float:
    """Fast scalar path of functional_similarity."""
    in_a = block_a.node_range[0] - 1
    in_b = block_b.node_range[0] - 1
    out_a = block_a.node_range[1]
    out_b = block_b.node_range[1]
    ext = table.boundary_matrix(block_a.model_id, block_b.model_id)
    if not (0 <= in_a <= out_a < ext.shape[0] and 0 <= in_b <= out_b < ext.shape[1]):
        raise MissingTableEntryError(
            f"blocks ({block_a.model_id}:{block_a.node_range}, "
            f"{block_b.model_id}:{block_b.node_range}) outside table of shape {ext.shape}"
        )
    return float(ext[in_a, in_b] + ext[out_a, out_b])


def functional_similarity(
    table: SimilarityTable, block_a: Block, block_b: Block
) -> FunctionalSimilarity:
    """S(a, b) = s(inputs) + s(outputs), symmetric in its arguments.

    A block's input boundary is the node preceding its range; stage-1
    blocks read the raw-probe boundary.
    """
    in_sim = table.boundary_similarity(
        block_a.model_id, block_a.node_range[0] - 1,
        block_b.model_id, block_b.node_range[0] - 1,
    )
    out_sim = table.boundary_similarity(
        block_a.model_id, block_a.node_range[1],
        block_b.model_id, block_b.node_range[1],
    )
    return FunctionalSimilarity(
        value=in_sim + out_sim, input_similarity=in_sim, output_similarity=out_sim
    )


def diagonal_pattern_statistic(tab: np.ndarray) -> float:
    """Mean on-diagonal minus mean off-diagonal similarity of one pair table.

    For rectangular tables the "diagonal" maps each row to the column at
    the same relative depth.
    """
    rows, cols = tab.shape
    row_idx = np.arange(rows)
    col_idx = np.clip(
        np.round((row_idx + 0.5) / rows * cols - 0.5).astype(int), 0, cols - 1
    )
    mask = np.zeros_like(tab, dtype=bool)
    mask[row_idx, col_idx] = True
    if mask.all():
        return 0.0
    return float(tab[mask].mean() - tab[~mask].mean())


def load_similarity_cache(path: str | Path) -> SimilarityTable:
    """Rehydrate a table from an STB1 cache file (no key verification)."""
    key, model_ids, node_counts, tables, warn_docs = wire.read_similarity_cache(path)
    return SimilarityTable(
        model_ids=tuple(model_ids),
        node_counts=node_counts,
        tables=tables,
        warnings=tuple(TableWarning(**w) for w in warn_docs),
        key=key,
        cka_evaluations=0,
    )


def manifest_table_key(manifest: ZooManifest, subsample: float, seed: int) -> str:
    """Content hash identifying one similarity-table build."""
    digest = hashlib.sha256()
    doc = {
        "version": manifest.version,
        "probe_count": manifest.probe_count,
        "models": [
            {
                "model_id": m.model_id,
                "input_shape": list(m.input_shape),
                "nodes": [
                    [n.param_count, n.flops, n.out_channels, *n.out_spatial,
                     n.layout, n.feature_ref, n.code_ref]
                    for n in m.nodes
                ],
            }
            for m in manifest.models
        ],
        "subsample": subsample,
        "seed": seed,
    }
    digest.update(json.dumps(doc, sort_keys=True).encode())
    # feature file contents matter, not just their names
    for m in manifest.models:
        for n in m.nodes:
            if n.feature_ref is not None:
                digest.update(manifest.resolve(n.feature_ref).read_bytes())
    return digest.hexdigest()


def default_cache_path(manifest_path: str | Path, key: str) -> Path:
    root = os.environ.get("DERY_CACHE_DIR")
    base = Path(root) if root else Path(manifest_path).parent / ".dery-cache"
    return base / f"sim-{key[:16]}.stb"


def subsample_rows(probe_count: int, subsample: float, seed: int) -> np.ndarray | None:
    """Row subset shared by every feature matrix in one table build."""
    if subsample >= 1.0:
        return None
    if subsample <= 0.0:
        raise ValueError("subsample fraction must be positive")
    rng = np.random.default_rng(seed)
    size = max(2, int(round(probe_count * subsample)))
    return np.sort(rng.choice(probe_count, size=size, replace=False))


def build_similarity_table(
    manifest: ZooManifest,
    subsample: float = DEFAULT_SUBSAMPLE,
    seed: int = 0,
    cache_path: str | Path | None = None,
    workers: int = 1,
    metric: Callable[[np.ndarray, np.ndarray], float] = linear_cka,
) -> SimilarityTable:
    """Fill the node-pair similarity table for every unordered model pair.

    Each L_i x L_j table is computed exactly once (self-tables compute all
    L_i^2 cells). Degenerate features contribute 0 with a warning record
    instead of aborting the build. When `cache_path` holds a table for the
    same content key, it is returned without any CKA evaluation.

    `metric` is any similarity index in [0, 1] over two same-row-count
    feature matrices; caching is only keyed for the default linear CKA.
    """
    key = manifest_table_key(manifest, subsample, seed)
    if metric is not linear_cka:
        cache_path = None  # the cache key does not encode custom metrics
    if cache_path is not None:
        cache_path = Path(cache_path)
        if cache_path.exists():
            cached_key, model_ids, node_counts, tables, warn_docs = (
                wire.read_similarity_cache(cache_path)
            )
            if cached_key == key:
                logger.info("similarity table loaded from cache %s", cache_path)
                return SimilarityTable(
                    model_ids=tuple(model_ids),
                    node_counts=node_counts,
                    tables=tables,
                    warnings=tuple(TableWarning(**w) for w in warn_docs),
                    key=key,
                    cka_evaluations=0,
                )
            logger.info("similarity cache %s is stale; rebuilding", cache_path)

    rows = subsample_rows(manifest.probe_count, subsample, seed)
    ids = manifest.model_ids
    pairs = [(i, j) for i in range(len(ids)) for j in range(i, len(ids))]

    tables: dict[tuple[str, str], np.ndarray] = {}
    warnings: list[TableWarning] = []
    evaluations = 0
    if workers > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(
                _pair_table_task,
                [(manifest, i, j, rows, metric) for i, j in pairs],
            )
            for (i, j), (tab, warns, evals) in zip(pairs, results):
                tables[(ids[i], ids[j])] = tab
                warnings.extend(warns)
                evaluations += evals
    else:
        features: dict[str, list[np.ndarray]] = {}
        for i, j in pairs:
            tab, warns, evals = _pair_table(
                manifest, i, j, rows, features, metric
            )
            tables[(ids[i], ids[j])] = tab
            warnings.extend(warns)
            evaluations += evals

    table = SimilarityTable(
        model_ids=ids,
        node_counts={m.model_id: m.num_nodes for m in manifest.models},
        tables=tables,
        warnings=tuple(warnings),
        key=key,
        cka_evaluations=evaluations,
    )
    for w in warnings:
        logger.warning(
            "degenerate features: (%s:%d, %s:%d) -> similarity 0 (%s)",
            w.model_a, w.node_a, w.model_b, w.node_b, w.message,
        )
    if cache_path is not None:
        wire.write_similarity_cache(
            cache_path,
            key,
            list(ids),
            table.node_counts,
            tables,
            [w.__dict__ for w in warnings],
        )
    return table


def _pair_table_task(args):
    manifest, i, j, rows, metric = args
    return _pair_table(manifest, i, j, rows, {}, metric)


def _load_model_features(
    manifest: ZooManifest,
    model_idx: int,
    rows: np.ndarray | None,
    cache: dict[str, list[np.ndarray]],
) -> list[np.ndarray]:
    model = manifest.models[model_idx]
    hit = cache.get(model.model_id)
    if hit is not None:
        return hit
    mats = []
    for node in model.nodes:
        if node.feature_ref is None:
            raise MissingTableEntryError(
                f"model {model.model_id} node {node.node_id} has no feature file"
            )
        m = wire.read_feature_matrix(manifest.resolve(node.feature_ref))
        m = m.astype(np.float64)
        if rows is not None:
            m = m[rows]
        mats.append(m)
    cache[model.model_id] = mats
    return mats


def _pair_table(
    manifest: ZooManifest,
    i: int,
    j: int,
    rows: np.ndarray | None,
    cache: dict[str, list[np.ndarray]],
    metric: Callable[[np.ndarray, np.ndarray], float] = linear_cka,
) -> tuple[np.ndarray, list[TableWarning], int]:
    feats_i = _load_model_features(manifest, i, rows, cache)
    feats_j = _load_model_features(manifest, j, rows, cache)
    id_i = manifest.models[i].model_id
    id_j = manifest.models[j].model_id
    tab = np.zeros((len(feats_i), len(feats_j)))
    warnings: list[TableWarning] = []
    evaluations = 0
    for a, fa in enumerate(feats_i):
        for b, fb in enumerate(feats_j):
            evaluations += 1
            try:
                tab[a, b] = metric(fa, fb)
            except DegenerateSimilarityError as exc:
                tab[a, b] = 0.0
                warnings.append(
                    TableWarning(id_i, a + 1, id_j, b + 1, str(exc))
                )
    return tab, warnings, evaluations
