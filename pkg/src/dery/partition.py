"""Joint K-way partition of every model into equivalence sets.

Three interleaved updates drive a block-coordinate ascent on the
clustering objective J = sum over blocks of S(block, anchor of its set):

  * boundary swaps move one node across a block boundary (forward: the
    last node of block k joins block k+1; backward: the first node of
    block k+1 joins block k), keeping whichever of the three variants
    scores highest;
  * anchor selection picks, per set, the member with maximal summed
    similarity to the set;
  * assignment moves each block to the set with the most similar anchor.

Every update is an argmax over a candidate set containing the incumbent,
so J never decreases within a restart. The optimizer runs R independent
seeded restarts and keeps the best.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateClusteringError, DeryError, InfeasiblePartitionError
from .similarity import SimilarityTable
from .zoo import Block, ModelGraph, ZooManifest, blocks_from_cuts, size_bound, DEFAULT_EPS

#: Shipped defaults: partition count, restart count, convergence.
DEFAULT_K = 4
DEFAULT_RESTARTS = 200
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 100

_MONOTONE_SLACK = 1e-9
_INIT_ATTEMPTS = 1000


@dataclass(frozen=True, eq=False)
class Assignment:
    """Block-to-set labels; row (i, k) of the expanded matrix is one-hot."""

    labels: np.ndarray  # shape (N, K), values in [0, K)

    def matrix(self) -> np.ndarray:
        n, k = self.labels.shape
        a = np.zeros((n * k, k), dtype=np.uint8)
        a[np.arange(n * k), self.labels.reshape(-1)] = 1
        return a

    def set_of(self, model_index: int, stage_index: int) -> int:
        return int(self.labels[model_index, stage_index - 1])


@dataclass(frozen=True)
class ZooPartition:
    cuts: dict[str, tuple[int, ...]]
    assignment: Assignment
    anchors: tuple[Block, ...]
    objective: float

    @property
    def k(self) -> int:
        return len(self.anchors)


@dataclass
class PartitionStats:
    restart_objectives: list[float | None]
    traces: list[list[float]]
    degenerate_restarts: int = 0
    best_restart: int = -1


class _Problem:
    """Manifest-derived arrays shared by every restart (read-only)."""

    def __init__(self, table: SimilarityTable, manifest: ZooManifest, k: int, eps: float):
        self.manifest = manifest
        self.k = k
        self.eps = eps
        self.models = manifest.models
        self.n = len(self.models)
        self.lengths = [m.num_nodes for m in self.models]
        self.prefix = [
            np.concatenate(([0], np.cumsum([nd.param_count for nd in m.nodes])))
            for m in self.models
        ]
        self.bounds = [size_bound(m, k, eps) for m in self.models]
        # boundary matrices for every ordered index pair
        self.sim = [
            [table.boundary_matrix(a.model_id, b.model_id) for b in self.models]
            for a in self.models
        ]

    def segment_params(self, i: int, lo: int, hi: int) -> int:
        # params of nodes lo+1..hi (boundary coordinates)
        return int(self.prefix[i][hi] - self.prefix[i][lo])

    def cuts_valid(self, i: int, cuts: tuple[int, ...]) -> bool:
        bounds = (0, *cuts, self.lengths[i])
        return all(
            self.segment_params(i, bounds[k], bounds[k + 1]) < self.bounds[i]
            for k in range(self.k)
        )


def _block_pair_similarity(
    problem: _Problem,
    i: int, bounds_i: tuple[int, ...], k: int,
    j: int, bounds_j: tuple[int, ...], m: int,
) -> float:
    p = problem.sim[i][j]
    return float(p[bounds_i[k - 1], bounds_j[m - 1]] + p[bounds_i[k], bounds_j[m]])


def _objective(
    problem: _Problem,
    cuts: list[tuple[int, ...]],
    labels: np.ndarray,
    anchors: list[tuple[int, int]],
) -> float:
    bounds = [(0, *cuts[i], problem.lengths[i]) for i in range(problem.n)]
    total = 0.0
    for i in range(problem.n):
        for k in range(1, problem.k + 1):
            aj, astage = anchors[labels[i, k - 1]]
            total += _block_pair_similarity(
                problem, i, bounds[i], k, aj, bounds[aj], astage
            )
    return total


def _update_anchors_state(
    problem: _Problem, cuts: list[tuple[int, ...]], labels: np.ndarray
) -> list[tuple[int, int]]:
    bounds = [(0, *cuts[i], problem.lengths[i]) for i in range(problem.n)]
    anchors: list[tuple[int, int]] = []
    for j in range(problem.k):
        members = [
            (i, k)
            for i in range(problem.n)
            for k in range(1, problem.k + 1)
            if labels[i, k - 1] == j
        ]
        if not members:
            raise DegenerateClusteringError(f"equivalence set {j} has no members")
        # candidates visited in (model_id, stage) order, so the first strict
        # maximum realizes the lexicographic tie-break
        members.sort(key=lambda ik: (problem.models[ik[0]].model_id, ik[1]))
        best: tuple[int, int] = members[0]
        best_score = -np.inf
        for (ai, ak) in members:
            score = sum(
                _block_pair_similarity(problem, i, bounds[i], k, ai, bounds[ai], ak)
                for (i, k) in members
            )
            if score > best_score:
                best = (ai, ak)
                best_score = score
        anchors.append(best)
    return anchors


def _update_assignment_state(
    problem: _Problem,
    cuts: list[tuple[int, ...]],
    labels: np.ndarray,
    anchors: list[tuple[int, int]],
) -> np.ndarray:
    bounds = [(0, *cuts[i], problem.lengths[i]) for i in range(problem.n)]
    new_labels = labels.copy()
    for i in range(problem.n):
        for k in range(1, problem.k + 1):
            scores = [
                _block_pair_similarity(problem, i, bounds[i], k, aj, bounds[aj], astage)
                for (aj, astage) in anchors
            ]
            best = max(scores)
            current = labels[i, k - 1]
            if scores[current] == best:
                choice = current  # ties keep the block where it is
            else:
                choice = scores.index(best)
            new_labels[i, k - 1] = choice
    return new_labels


def _sweep_swaps(
    problem: _Problem,
    cuts: list[tuple[int, ...]],
    labels: np.ndarray,
    anchors: list[tuple[int, int]],
) -> list[tuple[int, ...]]:
    """One ascending pass of forward/backward swaps over all boundaries."""
    for i in range(problem.n):
        for b in range(problem.k - 1):
            cuts[i] = _swap_at(problem, cuts, labels, anchors, i, b)
    return cuts


def _swap_at(
    problem: _Problem,
    cuts: list[tuple[int, ...]],
    labels: np.ndarray,
    anchors: list[tuple[int, int]],
    i: int,
    b: int,
) -> tuple[int, ...]:
    current = cuts[i]
    lo = current[b - 1] if b > 0 else 0
    hi = current[b + 1] if b + 1 < len(current) else problem.lengths[i]
    options = [current]
    for delta in (-1, +1):  # forward swap shrinks block k, backward grows it
        c = current[b] + delta
        if not lo < c < hi:
            continue  # would empty a block
        cand = current[:b] + (c,) + current[b + 1:]
        if problem.cuts_valid(i, cand):
            options.append(cand)
    if len(options) == 1:
        return current
    best = current
    best_j = -np.inf
    for cand in options:  # first listed wins ties: no-swap, forward, backward
        cuts[i] = cand
        j_val = _objective(problem, cuts, labels, anchors)
        if j_val > best_j:
            best = cand
            best_j = j_val
    cuts[i] = current
    return best


def _random_cuts(problem: _Problem, i: int, rng: np.random.Generator) -> tuple[int, ...]:
    length = problem.lengths[i]
    for _ in range(_INIT_ATTEMPTS):
        cand = tuple(sorted(rng.choice(length - 1, size=problem.k - 1, replace=False) + 1))
        cand = tuple(int(c) for c in cand)
        if problem.cuts_valid(i, cand):
            return cand
    witness = _feasible_witness(problem, i)
    if witness is None:
        raise InfeasiblePartitionError(
            f"model {problem.models[i].model_id!r} has no valid "
            f"{problem.k}-way cut under eps={problem.eps}"
        )
    return witness


def _feasible_witness(problem: _Problem, i: int) -> tuple[int, ...] | None:
    """Lexicographically smallest valid cut set, or None if none exists."""
    length = problem.lengths[i]
    k = problem.k
    # reachable[r][j]: the last j nodes can form r valid blocks
    reachable = [[False] * (length + 1) for _ in range(k + 1)]
    reachable[0][length] = True
    for r in range(1, k + 1):
        for j in range(length - r, -1, -1):
            for nxt in range(j + 1, length + 1):
                if (
                    reachable[r - 1][nxt]
                    and problem.segment_params(i, j, nxt) < problem.bounds[i]
                ):
                    reachable[r][j] = True
                    break
    if not reachable[k][0]:
        return None
    cuts: list[int] = []
    pos = 0
    for r in range(k, 1, -1):
        for c in range(pos + 1, length):
            if (
                reachable[r - 1][c]
                and problem.segment_params(i, pos, c) < problem.bounds[i]
            ):
                cuts.append(c)
                pos = c
                break
        else:
            return None
    if problem.segment_params(i, pos, length) >= problem.bounds[i]:
        return None
    return tuple(cuts)


@dataclass
class _RestartResult:
    index: int
    objective: float | None
    cuts: list[tuple[int, ...]] | None
    labels: np.ndarray | None
    anchors: list[tuple[int, int]] | None
    trace: list[float]
    degenerate: bool = False


def _run_restart(args) -> _RestartResult:
    problem, k, max_iters, tol, base_seed, index = args
    rng = np.random.default_rng(np.random.SeedSequence(entropy=base_seed, spawn_key=(index,)))
    cuts = [_random_cuts(problem, i, rng) for i in range(problem.n)]
    # random initial clustering; a restart that rolls an empty set aborts
    labels = rng.integers(0, k, size=(problem.n, k))
    try:
        anchors = _update_anchors_state(problem, cuts, labels)
        j_prev = _objective(problem, cuts, labels, anchors)
        trace = [j_prev]
        for _ in range(max_iters):
            cuts = _sweep_swaps(problem, cuts, labels, anchors)
            anchors = _update_anchors_state(problem, cuts, labels)
            labels = _update_assignment_state(problem, cuts, labels, anchors)
            j_t = _objective(problem, cuts, labels, anchors)
            if j_t < j_prev - _MONOTONE_SLACK:
                raise DeryError(
                    f"objective decreased within a restart: {j_prev} -> {j_t}"
                )
            trace.append(j_t)
            if j_t - j_prev <= tol:
                j_prev = j_t
                break
            j_prev = j_t
    except DegenerateClusteringError:
        return _RestartResult(index, None, None, None, None, [], degenerate=True)
    return _RestartResult(index, j_prev, cuts, labels, anchors, trace)


def optimize_partition(
    table: SimilarityTable,
    manifest: ZooManifest,
    k: int,
    eps: float = DEFAULT_EPS,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
    workers: int = 1,
) -> ZooPartition:
    partition, _ = optimize_partition_detailed(
        table, manifest, k, eps, max_iters, tol, restarts, seed, workers
    )
    return partition


def optimize_partition_detailed(
    table: SimilarityTable,
    manifest: ZooManifest,
    k: int,
    eps: float = DEFAULT_EPS,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
    workers: int = 1,
) -> tuple[ZooPartition, PartitionStats]:
    """Multi-restart ascent; returns the best partition plus per-restart stats.

    Deterministic for fixed (seed, restarts) regardless of worker count:
    every restart derives its own generator from the base seed, and the
    reduction keeps the lowest-index restart among equal objectives.
    """
    if k < 1:
        raise ValueError("k must be positive")
    for m in manifest.models:
        if m.num_nodes < k:
            raise InfeasiblePartitionError(
                f"model {m.model_id!r} has {m.num_nodes} nodes, fewer than k={k}"
            )
    problem = _Problem(table, manifest, k, eps)
    for i in range(problem.n):
        if _feasible_witness(problem, i) is None:
            raise InfeasiblePartitionError(
                f"model {problem.models[i].model_id!r} has no valid "
                f"{k}-way cut under eps={eps}"
            )

    tasks = [(problem, k, max_iters, tol, seed, r) for r in range(restarts)]
    if workers > 1 and restarts > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_restart, tasks, chunksize=max(1, restarts // (4 * workers))))
    else:
        results = [_run_restart(t) for t in tasks]
    results.sort(key=lambda r: r.index)

    stats = PartitionStats(
        restart_objectives=[r.objective for r in results],
        traces=[r.trace for r in results],
        degenerate_restarts=sum(1 for r in results if r.degenerate),
    )
    best: _RestartResult | None = None
    for r in results:
        if r.objective is None:
            continue
        if best is None or r.objective > best.objective:
            best = r
    if best is None:
        raise DegenerateClusteringError("every restart collapsed to an empty set")
    stats.best_restart = best.index
    return _to_partition(problem, best), stats


def _to_partition(problem: _Problem, result: _RestartResult) -> ZooPartition:
    cuts = {
        problem.models[i].model_id: result.cuts[i] for i in range(problem.n)
    }
    anchors = tuple(
        blocks_from_cuts(problem.models[ai], result.cuts[ai])[astage - 1]
        for (ai, astage) in result.anchors
    )
    return ZooPartition(
        cuts=cuts,
        assignment=Assignment(labels=result.labels.copy()),
        anchors=anchors,
        objective=float(result.objective),
    )


def _to_state(problem: _Problem, partition: ZooPartition):
    cuts = [partition.cuts[m.model_id] for m in problem.models]
    labels = partition.assignment.labels.copy()
    anchors = [
        (problem.manifest.model_index(b.model_id), b.stage_index)
        for b in partition.anchors
    ]
    return cuts, labels, anchors


def objective_J(
    table: SimilarityTable, manifest: ZooManifest, partition: ZooPartition
) -> float:
    """Recompute J = sum of S(block, anchor of its set) over all blocks."""
    problem = _Problem(table, manifest, partition.k, eps=DEFAULT_EPS)
    cuts, labels, anchors = _to_state(problem, partition)
    return _objective(problem, cuts, labels, anchors)


def swap_step(
    table: SimilarityTable,
    manifest: ZooManifest,
    partition: ZooPartition,
    model_index: int,
    boundary_index: int,
    eps: float = DEFAULT_EPS,
) -> ZooPartition:
    """Best of {no swap, forward, backward} at one boundary of one model.

    Swaps that would empty a block or break the size bound are excluded;
    when nothing beats the incumbent the partition is returned unchanged.
    """
    problem = _Problem(table, manifest, partition.k, eps)
    cuts, labels, anchors = _to_state(problem, partition)
    cuts[model_index] = _swap_at(problem, cuts, labels, anchors, model_index, boundary_index)
    result = _RestartResult(
        index=-1,
        objective=_objective(problem, cuts, labels, anchors),
        cuts=cuts,
        labels=labels,
        anchors=anchors,
        trace=[],
    )
    return _to_partition(problem, result)


def update_anchors(
    table: SimilarityTable, manifest: ZooManifest, partition: ZooPartition
) -> ZooPartition:
    """Re-pick each set's anchor as its most representative member."""
    problem = _Problem(table, manifest, partition.k, eps=DEFAULT_EPS)
    cuts, labels, _ = _to_state(problem, partition)
    anchors = _update_anchors_state(problem, cuts, labels)
    result = _RestartResult(
        index=-1,
        objective=_objective(problem, cuts, labels, anchors),
        cuts=cuts,
        labels=labels,
        anchors=anchors,
        trace=[],
    )
    return _to_partition(problem, result)


def update_assignment(
    table: SimilarityTable, manifest: ZooManifest, partition: ZooPartition
) -> ZooPartition:
    """Move each block to the set with the most similar anchor."""
    problem = _Problem(table, manifest, partition.k, eps=DEFAULT_EPS)
    cuts, labels, anchors = _to_state(problem, partition)
    labels = _update_assignment_state(problem, cuts, labels, anchors)
    result = _RestartResult(
        index=-1,
        objective=_objective(problem, cuts, labels, anchors),
        cuts=cuts,
        labels=labels,
        anchors=anchors,
        trace=[],
    )
    return _to_partition(problem, result)


def is_swap_local_optimum(
    table: SimilarityTable,
    manifest: ZooManifest,
    partition: ZooPartition,
    eps: float = DEFAULT_EPS,
    tol: float = _MONOTONE_SLACK,
) -> bool:
    """True when no single feasible swap strictly increases J."""
    problem = _Problem(table, manifest, partition.k, eps)
    cuts, labels, anchors = _to_state(problem, partition)
    base = _objective(problem, cuts, labels, anchors)
    for i in range(problem.n):
        for b in range(problem.k - 1):
            new_cut = _swap_at(problem, cuts, labels, anchors, i, b)
            if new_cut != cuts[i]:
                trial = list(cuts)
                trial[i] = new_cut
                if _objective(problem, trial, labels, anchors) > base + tol:
                    return False
    return True


def enumerate_valid_cuts(
    model: ModelGraph, k: int, eps: float = DEFAULT_EPS
) -> list[tuple[int, ...]]:
    """All cut sets of one model satisfying the size bound (small L only)."""
    bound = size_bound(model, k, eps)
    prefix = np.concatenate(([0], np.cumsum([nd.param_count for nd in model.nodes])))
    valid = []
    for cand in itertools.combinations(range(1, model.num_nodes), k - 1):
        bounds = (0, *cand, model.num_nodes)
        if all(prefix[bounds[s + 1]] - prefix[bounds[s]] < bound for s in range(k)):
            valid.append(cand)
    return valid


def partition_doc(partition: ZooPartition, model_ids: tuple[str, ...]) -> dict:
    """JSON-ready description of a partition (stable field set)."""
    labels = partition.assignment.labels
    return {
        "k": partition.k,
        "objective": partition.objective,
        "cuts": {mid: list(partition.cuts[mid]) for mid in model_ids},
        "assignment": [
            [mid, k + 1, int(labels[i, k])]
            for i, mid in enumerate(model_ids)
            for k in range(labels.shape[1])
        ],
        "anchors": [
            {
                "set": j,
                "model_id": b.model_id,
                "stage": b.stage_index,
                "node_range": list(b.node_range),
            }
            for j, b in enumerate(partition.anchors)
        ],
    }


def partition_from_doc(doc: dict, manifest: ZooManifest) -> ZooPartition:
    k = doc["k"]
    cuts = {mid: tuple(c) for mid, c in doc["cuts"].items()}
    labels = np.zeros((len(manifest.models), k), dtype=int)
    for mid, stage, set_idx in doc["assignment"]:
        labels[manifest.model_index(mid), stage - 1] = set_idx
    anchors = []
    for entry in sorted(doc["anchors"], key=lambda e: e["set"]):
        model = manifest.model(entry["model_id"])
        anchor = blocks_from_cuts(model, cuts[entry["model_id"]])[entry["stage"] - 1]
        owner = labels[manifest.model_index(entry["model_id"]), entry["stage"] - 1]
        if owner != entry["set"]:
            raise ValueError(
                f"anchor of set {entry['set']} is assigned to set {owner}"
            )
        anchors.append(anchor)
    return ZooPartition(
        cuts=cuts,
        assignment=Assignment(labels=labels),
        anchors=tuple(anchors),
        objective=float(doc["objective"]),
    )
