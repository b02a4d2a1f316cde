"""Constrained candidate assembly and training-free ranking.

Candidates pick exactly one block per stage slot (a stage-k slot only
takes a block whose own stage index is k) and exactly one block per
equivalence set, under hard parameter and FLOP budgets that include the
stitch adapters. Ranking uses the log-determinant of the Hamming kernel
over sign-binarized activations of a probe batch.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from . import wire
from .errors import UnscorableCandidateError
from .partition import ZooPartition
from .zoo import Block, Iface, ZooManifest, blocks_from_cuts

logger = logging.getLogger(__name__)

#: Shipped defaults: candidate pool size and probe-batch averaging.
DEFAULT_NUM_CANDIDATES = 500
DEFAULT_NUM_BATCHES = 5
DEFAULT_BATCH_SIZE = 32

_DRAW_CAP_FACTOR = 100


class Budgets(NamedTuple):
    params: float
    flops: float


class BatchSpec(NamedTuple):
    num_batches: int = DEFAULT_NUM_BATCHES
    batch_size: int = DEFAULT_BATCH_SIZE


_ADAPTER_KINDS = {
    ("spatial", "spatial"): "cnn->cnn",
    ("spatial", "tokens"): "cnn->seq",
    ("tokens", "spatial"): "seq->cnn",
    ("tokens", "tokens"): "seq->seq",
}


@dataclass(frozen=True)
class StitchAdapter:
    """Norm -> 1x1 projection -> activation bridging two block interfaces.

    Parameters: c_in*c_out + c_out for the projection plus 2*c_in for the
    norm affine; the activation is free. FLOPs count the projection at the
    downstream spatial (or token) extent. Spatial resampling, when the
    extents differ, is a declared nearest-neighbor reshape with no cost.
    """

    kind: str
    in_iface: Iface
    out_iface: Iface
    param_count: int
    flops: float


@dataclass(frozen=True, eq=False)
class SelectionMatrices:
    x: np.ndarray  # (N*K, K); column j marks the block chosen for set j
    y: np.ndarray  # (N*K, K); column k marks the block filling stage slot k

    def column_sums(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x.sum(axis=0), self.y.sum(axis=0)


@dataclass(frozen=True)
class AssemblyCandidate:
    blocks: tuple[Block, ...]
    adapters: tuple[StitchAdapter, ...]
    sets: tuple[int, ...]  # equivalence-set label of each chosen block
    total_params: int
    total_flops: float
    selection: SelectionMatrices

    @property
    def block_ids(self) -> tuple[tuple[str, int], ...]:
        return tuple((b.model_id, b.stage_index) for b in self.blocks)


@dataclass(frozen=True)
class Rejection:
    reason: str


@dataclass(frozen=True)
class ConstraintAudit:
    param_budget: float
    flops_budget: float
    param_slack: float
    flops_slack: float


@dataclass(frozen=True)
class ScoredPlan:
    candidate: AssemblyCandidate
    naswot_score: float
    audit: ConstraintAudit
    rank: int


@dataclass
class SamplerStats:
    draws: int = 0
    accepted: int = 0
    rejections: dict[str, int] | None = None
    exhausted: bool = False

    def __post_init__(self):
        if self.rejections is None:
            self.rejections = {}

    def reject(self, reason: str) -> None:
        self.rejections[reason] = self.rejections.get(reason, 0) + 1


@dataclass
class SearchResult:
    plans: tuple[ScoredPlan, ...]
    stats: SamplerStats


def adapter_cost(from_iface: Iface, to_iface: Iface) -> StitchAdapter:
    """Cost-model instance of the stitch layer between two interfaces."""
    kind = _ADAPTER_KINDS[(from_iface.layout, to_iface.layout)]
    c_in = from_iface.channels
    c_out = to_iface.channels
    h_out, w_out = to_iface.spatial
    params = c_in * c_out + c_out + 2 * c_in
    flops = float(h_out * w_out * c_in * c_out)
    return StitchAdapter(
        kind=kind,
        in_iface=from_iface,
        out_iface=to_iface,
        param_count=params,
        flops=flops,
    )


def _stage_pools(
    partition: ZooPartition, manifest: ZooManifest
) -> list[list[tuple[Block, int]]]:
    """Per stage slot: the (block, set label) choices, in model_id order."""
    k = partition.k
    pools: list[list[tuple[Block, int]]] = [[] for _ in range(k)]
    for m in sorted(manifest.models, key=lambda m: m.model_id):
        i = manifest.model_index(m.model_id)
        blocks = blocks_from_cuts(m, partition.cuts[m.model_id])
        for b in blocks:
            label = partition.assignment.set_of(i, b.stage_index)
            pools[b.stage_index - 1].append((b, label))
    return pools


def _selection_matrices(
    manifest: ZooManifest, k: int, chosen: list[tuple[Block, int]]
) -> SelectionMatrices:
    n = len(manifest.models)
    x = np.zeros((n * k, k), dtype=np.uint8)
    y = np.zeros((n * k, k), dtype=np.uint8)
    for slot, (block, label) in enumerate(chosen, start=1):
        row = manifest.model_index(block.model_id) * k + (block.stage_index - 1)
        x[row, label] = 1
        y[row, slot - 1] = 1
    return SelectionMatrices(x=x, y=y)


def sample_candidate(
    partition: ZooPartition,
    manifest: ZooManifest,
    budgets: Budgets,
    rng: np.random.Generator,
    pools: list[list[tuple[Block, int]]] | None = None,
) -> AssemblyCandidate | Rejection:
    """Draw one candidate: per stage slot, a uniform block among the
    stage-matching blocks whose set label is still unused.

    Rejections (set-label clash or budget overrun) are normal outcomes.
    """
    if pools is None:
        pools = _stage_pools(partition, manifest)
    chosen: list[tuple[Block, int]] = []
    used: set[int] = set()
    for slot in range(partition.k):
        options = [(b, g) for (b, g) in pools[slot] if g not in used]
        if not options:
            return Rejection("group-conflict")
        block, label = options[int(rng.integers(len(options)))]
        chosen.append((block, label))
        used.add(label)

    adapters = tuple(
        adapter_cost(chosen[s][0].out_iface, chosen[s + 1][0].in_iface)
        for s in range(partition.k - 1)
    )
    total_params = sum(b.param_count for b, _ in chosen) + sum(
        a.param_count for a in adapters
    )
    total_flops = sum(b.flops for b, _ in chosen) + sum(a.flops for a in adapters)
    if total_params > budgets.params:
        return Rejection("budget:param")
    if total_flops > budgets.flops:
        return Rejection("budget:flops")

    candidate = AssemblyCandidate(
        blocks=tuple(b for b, _ in chosen),
        adapters=adapters,
        sets=tuple(g for _, g in chosen),
        total_params=total_params,
        total_flops=total_flops,
        selection=_selection_matrices(manifest, partition.k, chosen),
    )
    _assert_emittable(candidate, budgets)
    return candidate


def _assert_emittable(candidate: AssemblyCandidate, budgets: Budgets) -> None:
    x_sums, y_sums = candidate.selection.column_sums()
    k = len(candidate.blocks)
    if not ((x_sums == 1).all() and (y_sums == 1).all()):
        raise AssertionError("selection matrices lost the one-per-column property")
    if sorted(candidate.sets) != list(range(k)):
        raise AssertionError("chosen set labels are not a permutation of the sets")
    if sorted(b.stage_index for b in candidate.blocks) != list(range(1, k + 1)):
        raise AssertionError("chosen stage indices are not a permutation")
    if candidate.total_params > budgets.params or candidate.total_flops > budgets.flops:
        raise AssertionError("emitted candidate exceeds a budget")


def naswot_score(code_segments: list[np.ndarray], ridge: float = 0.0) -> float:
    """log |det| of the Hamming kernel over concatenated binary codes.

    K[a,b] = d - hamming(row_a, row_b), computed as the sum of the 1-match
    and 0-match Grams; the determinant comes from a pivoted triangular
    factorization. Non-finite results map to -inf so broken candidates
    rank last.
    """
    if not code_segments:
        raise ValueError("no code segments given")
    rows = {seg.shape[0] for seg in code_segments}
    if len(rows) != 1:
        raise ValueError(f"segments disagree on row count: {sorted(rows)}")
    codes = np.concatenate(
        [np.asarray(s, dtype=np.float64) for s in code_segments], axis=1
    )
    kernel = codes @ codes.T + (1.0 - codes) @ (1.0 - codes).T
    if ridge:
        kernel = kernel + ridge * np.eye(kernel.shape[0])
    with warnings.catch_warnings():
        # zero pivots are the expected signal for the -inf sentinel
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, _ = scipy.linalg.lu_factor(kernel, check_finite=False)
    pivots = np.abs(np.diag(lu))
    # rank tolerance relative to the kernel's magnitude; a vanishing pivot
    # means a singular kernel
    tol = kernel.shape[0] * np.finfo(np.float64).eps * max(float(kernel.max()), 1.0)
    if (pivots <= tol).any():
        return float("-inf")
    logdet = float(np.sum(np.log(pivots)))
    return logdet if np.isfinite(logdet) else float("-inf")


def _block_codes(manifest: ZooManifest, block: Block) -> np.ndarray:
    model = manifest.model(block.model_id)
    segments = []
    for ordinal in range(block.node_range[0], block.node_range[1] + 1):
        node = model.node(ordinal)
        if node.code_ref is None:
            raise UnscorableCandidateError(
                f"model {block.model_id} node {ordinal} has no code file"
            )
        segments.append(wire.read_code_matrix(manifest.resolve(node.code_ref)))
    return np.concatenate(segments, axis=1)


def candidate_codes(manifest: ZooManifest, candidate: AssemblyCandidate) -> np.ndarray:
    """Concatenated per-block binary codes on the shared probe set."""
    return np.concatenate(
        [_block_codes(manifest, b) for b in candidate.blocks], axis=1
    )


def ridged_score(codes: np.ndarray, batch_rows: list[np.ndarray]) -> float:
    """Batch-averaged score; ridge 0 when finite, else 1e-6*d fallback."""
    scores = []
    d = codes.shape[1]
    for rows in batch_rows:
        batch = codes[rows]
        s = naswot_score([batch])
        if not np.isfinite(s):
            s = naswot_score([batch], ridge=1e-6 * d)
        scores.append(s)
    return float(np.mean(scores))


def draw_batches(
    probe_count: int, spec: BatchSpec, rng: np.random.Generator
) -> list[np.ndarray]:
    if spec.batch_size > probe_count:
        raise ValueError(
            f"batch_size {spec.batch_size} exceeds probe_count {probe_count}"
        )
    return [
        rng.choice(probe_count, size=spec.batch_size, replace=False)
        for _ in range(spec.num_batches)
    ]


def score_candidate(
    candidate: AssemblyCandidate,
    manifest: ZooManifest,
    batch_spec: BatchSpec = BatchSpec(),
    rng: np.random.Generator | None = None,
) -> float:
    """Mean kernel log-determinant over seeded probe-row batches."""
    if rng is None:
        rng = np.random.default_rng(0)
    codes = candidate_codes(manifest, candidate)
    batches = draw_batches(manifest.probe_count, batch_spec, rng)
    return ridged_score(codes, batches)


def _score_task(args) -> tuple[int, float]:
    idx, manifest, candidate, batches = args
    codes = candidate_codes(manifest, candidate)
    return idx, ridged_score(codes, batches)


def search(
    partition: ZooPartition,
    manifest: ZooManifest,
    budgets: Budgets,
    num_candidates: int = DEFAULT_NUM_CANDIDATES,
    batch_spec: BatchSpec = BatchSpec(),
    seed: int = 0,
    workers: int = 1,
) -> SearchResult:
    """Random search: draw distinct feasible candidates, score, rank.

    Pure in (partition, manifest, budgets, num_candidates, batch_spec,
    seed); worker count only affects wall time. Draws stop at 100x the
    requested count; falling short yields a partial result with
    `stats.exhausted` set.
    """
    draw_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    batch_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    batches = draw_batches(manifest.probe_count, batch_spec, batch_rng)

    pools = _stage_pools(partition, manifest)
    stats = SamplerStats()
    seen: set[tuple[tuple[str, int], ...]] = set()
    accepted: list[AssemblyCandidate] = []
    cap = _DRAW_CAP_FACTOR * num_candidates
    while len(accepted) < num_candidates and stats.draws < cap:
        stats.draws += 1
        outcome = sample_candidate(partition, manifest, budgets, draw_rng, pools)
        if isinstance(outcome, Rejection):
            stats.reject(outcome.reason)
            continue
        if outcome.block_ids in seen:
            stats.reject("duplicate")
            continue
        seen.add(outcome.block_ids)
        accepted.append(outcome)
    stats.accepted = len(accepted)
    if len(accepted) < num_candidates:
        stats.exhausted = True
        logger.warning(
            "draw cap reached: %d/%d distinct feasible candidates",
            len(accepted), num_candidates,
        )

    tasks = [(i, manifest, c, batches) for i, c in enumerate(accepted)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(_score_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        scored = [_score_task(t) for t in tasks]
    scores = dict(scored)

    order = sorted(
        range(len(accepted)),
        key=lambda i: (-scores[i], accepted[i].total_params, accepted[i].block_ids),
    )
    plans = tuple(
        ScoredPlan(
            candidate=accepted[i],
            naswot_score=scores[i],
            audit=ConstraintAudit(
                param_budget=budgets.params,
                flops_budget=budgets.flops,
                param_slack=float(budgets.params - accepted[i].total_params),
                flops_slack=float(budgets.flops - accepted[i].total_flops),
            ),
            rank=rank,
        )
        for rank, i in enumerate(order, start=1)
    )
    return SearchResult(plans=plans, stats=stats)


def plans_doc(result: SearchResult) -> dict:
    """JSON-ready description of a ranked search result."""
    return {
        "plans": [
            {
                "rank": p.rank,
                "score": p.naswot_score,
                "total_params": p.candidate.total_params,
                "total_flops": p.candidate.total_flops,
                "blocks": [
                    {
                        "model_id": b.model_id,
                        "stage": b.stage_index,
                        "node_range": list(b.node_range),
                        "set": g,
                        "param_count": b.param_count,
                        "flops": b.flops,
                    }
                    for b, g in zip(p.candidate.blocks, p.candidate.sets)
                ],
                "adapters": [
                    {
                        "kind": a.kind,
                        "in_channels": a.in_iface.channels,
                        "out_channels": a.out_iface.channels,
                        "in_spatial": list(a.in_iface.spatial),
                        "out_spatial": list(a.out_iface.spatial),
                        "in_layout": a.in_iface.layout,
                        "out_layout": a.out_iface.layout,
                        "param_count": a.param_count,
                        "flops": a.flops,
                    }
                    for a in p.candidate.adapters
                ],
                "audit": {
                    "param_budget": p.audit.param_budget,
                    "flops_budget": p.audit.flops_budget,
                    "param_slack": p.audit.param_slack,
                    "flops_slack": p.audit.flops_slack,
                },
            }
            for p in result.plans
        ],
        "sampler_stats": {
            "draws": result.stats.draws,
            "accepted": result.stats.accepted,
            "rejections": dict(sorted(result.stats.rejections.items())),
            "exhausted": result.stats.exhausted,
        },
    }
