"""Synthetic zoo generator and exact tiny-network oracles.

Models are chains of affine+rectifier nodes small enough to forward
exactly, enumerate exhaustively, and hand to determinant oracles. The
generator can plant a family of weight-shared models whose stage-aligned
blocks are functionally identical, giving partition recovery tests a
known optimum.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import wire
from .errors import InfeasiblePartitionError, InstanceTooLargeError
from .partition import Assignment, ZooPartition, enumerate_valid_cuts
from .reassembly import AssemblyCandidate, _selection_matrices, adapter_cost
from .similarity import SimilarityTable, block_similarity
from .zoo import (
    Block,
    ModelGraph,
    NodeMeta,
    ZooManifest,
    blocks_from_cuts,
    load_manifest,
    save_manifest,
)

BRUTE_FORCE_GUARD = 10**6


@dataclass(frozen=True)
class SynthNode:
    """One affine layer followed by a rectifier."""

    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.weight.T + self.bias, 0.0)

    def meta(self, ordinal: int) -> NodeMeta:
        return NodeMeta(
            node_id=ordinal,
            param_count=self.d_out * self.d_in + self.d_out,
            flops=float(self.d_out * self.d_in),
            out_channels=self.d_out,
            out_spatial=(1, 1),
            layout="tokens",
        )


@dataclass(frozen=True)
class SynthModel:
    model_id: str
    nodes: tuple[SynthNode, ...]


@dataclass(frozen=True)
class SynthSpec:
    num_models: int = 4
    nodes: tuple[int, int] = (6, 8)
    widths: tuple[int, int] = (4, 16)
    probe_n: int = 64
    family_size: int = 0  # leading models that share all weights


@dataclass(frozen=True)
class SynthZoo:
    spec: SynthSpec
    seed: int
    models: tuple[SynthModel, ...]
    probe: np.ndarray  # (n, d_in)

    @property
    def input_dim(self) -> int:
        return self.probe.shape[1]

    def graph(self, model: SynthModel, with_refs: bool = True) -> ModelGraph:
        nodes = []
        for ordinal, node in enumerate(model.nodes, start=1):
            meta = node.meta(ordinal)
            if with_refs:
                meta = NodeMeta(
                    node_id=meta.node_id,
                    param_count=meta.param_count,
                    flops=meta.flops,
                    out_channels=meta.out_channels,
                    out_spatial=meta.out_spatial,
                    layout=meta.layout,
                    feature_ref=f"features/{model.model_id}_n{ordinal:02d}.fmx",
                    code_ref=f"codes/{model.model_id}_n{ordinal:02d}.bcx",
                )
            nodes.append(meta)
        return ModelGraph(
            model_id=model.model_id,
            nodes=tuple(nodes),
            input_shape=(self.input_dim, 1, 1),
        )

    def to_manifest(self, with_refs: bool = True, base_dir: Path | None = None) -> ZooManifest:
        return ZooManifest(
            models=tuple(self.graph(m, with_refs) for m in self.models),
            probe_count=self.probe.shape[0],
            base_dir=base_dir,
        )


def generate(spec: SynthSpec, seed: int) -> SynthZoo:
    """Deterministically draw a zoo; the same (spec, seed) always matches."""
    lo_n, hi_n = spec.nodes
    lo_w, hi_w = spec.widths
    if spec.num_models < 1 or lo_n < 1 or lo_w < 1 or spec.probe_n < 2:
        raise ValueError(f"invalid synth spec {spec}")
    if lo_n > hi_n or lo_w > hi_w or spec.family_size > spec.num_models:
        raise ValueError(f"invalid synth spec {spec}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xD0,)))
    d_in = int(rng.integers(lo_w, hi_w + 1))
    probe = rng.standard_normal((spec.probe_n, d_in))

    models: list[SynthModel] = []
    for idx in range(spec.num_models):
        if 0 < idx < spec.family_size:
            twin = models[0]
            models.append(SynthModel(model_id=f"m{idx:02d}", nodes=twin.nodes))
            continue
        depth = int(rng.integers(lo_n, hi_n + 1))
        nodes = []
        width_in = d_in
        for _ in range(depth):
            width_out = int(rng.integers(lo_w, hi_w + 1))
            weight = rng.standard_normal((width_out, width_in)) / np.sqrt(width_in)
            bias = 0.1 * rng.standard_normal(width_out)
            nodes.append(SynthNode(weight=weight, bias=bias))
            width_in = width_out
        models.append(SynthModel(model_id=f"m{idx:02d}", nodes=tuple(nodes)))
    return SynthZoo(spec=spec, seed=seed, models=tuple(models), probe=probe)


def forward_model(
    model: SynthModel, inputs: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Exact features and binary codes per node.

    Codes binarize the float32 values that the wire format stores, so
    file-backed codes and freshly forwarded ones agree bit for bit.
    """
    features: list[np.ndarray] = []
    codes: list[np.ndarray] = []
    h = inputs
    for node in model.nodes:
        if h.shape[1] != node.d_in:
            raise ValueError(
                f"dimension mismatch: have {h.shape[1]}, node expects {node.d_in}"
            )
        h = node.apply(h)
        features.append(h)
        codes.append((h.astype(np.float32) > 0).astype(np.uint8))
    return features, codes


def _leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def forward_candidate(
    zoo: SynthZoo, candidate: AssemblyCandidate, inputs: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Forward a stitched candidate with identity-initialized adapters.

    The adapter is norm(identity) -> identity projection -> leaky rectifier;
    identity projection requires matching widths. On rectifier outputs the
    activation is also exact pass-through.
    """
    by_id = {m.model_id: m for m in zoo.models}
    features: list[np.ndarray] = []
    codes: list[np.ndarray] = []
    h = inputs
    for pos, block in enumerate(candidate.blocks):
        model = by_id[block.model_id]
        if pos > 0:
            expected = model.nodes[block.node_range[0] - 1].d_in
            if h.shape[1] != expected:
                raise ValueError(
                    f"dimension mismatch at stage {pos + 1}: identity adapter "
                    f"cannot map {h.shape[1]} -> {expected}"
                )
            h = _leaky_relu(h @ np.eye(h.shape[1]))
        for ordinal in range(block.node_range[0], block.node_range[1] + 1):
            node = model.nodes[ordinal - 1]
            if h.shape[1] != node.d_in:
                raise ValueError(
                    f"dimension mismatch inside {block.model_id}: have "
                    f"{h.shape[1]}, node {ordinal} expects {node.d_in}"
                )
            h = node.apply(h)
            features.append(h)
            codes.append((h.astype(np.float32) > 0).astype(np.uint8))
    return features, codes


def write_zoo(zoo: SynthZoo, out_dir: str | Path) -> Path:
    """Write manifest + feature/code files; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "codes").mkdir(parents=True, exist_ok=True)
    for model in zoo.models:
        features, codes = forward_model(model, zoo.probe)
        for ordinal, (feat, code) in enumerate(zip(features, codes), start=1):
            wire.write_feature_matrix(
                out_dir / "features" / f"{model.model_id}_n{ordinal:02d}.fmx", feat
            )
            wire.write_code_matrix(
                out_dir / "codes" / f"{model.model_id}_n{ordinal:02d}.bcx", code
            )
    manifest_path = out_dir / "manifest.json"
    save_manifest(zoo.to_manifest(base_dir=out_dir), manifest_path)
    return manifest_path


def load_written_zoo(out_dir: str | Path) -> ZooManifest:
    return load_manifest(Path(out_dir) / "manifest.json")


def brute_force_partition(
    zoo: SynthZoo,
    table: SimilarityTable,
    k: int,
    eps: float = 0.2,
    guard: int = BRUTE_FORCE_GUARD,
) -> ZooPartition:
    """Global optimum of the partition objective by exhaustive enumeration.

    Enumerates every valid cut combination and every anchor K-subset; given
    anchors, the optimal assignment is the per-block argmax (anchors keep
    their own set, so no set can empty). Guarded against blow-up.
    """
    manifest = zoo.to_manifest(with_refs=False)
    model_cuts = [enumerate_valid_cuts(m, k, eps) for m in manifest.models]
    for m, cut_list in zip(manifest.models, model_cuts):
        if not cut_list:
            raise InfeasiblePartitionError(
                f"model {m.model_id!r} has no valid {k}-way cut under eps={eps}"
            )
    n = len(manifest.models)
    num_blocks = n * k
    anchor_combos = list(itertools.combinations(range(num_blocks), k))
    total = int(np.prod([len(c) for c in model_cuts])) * len(anchor_combos)
    if total > guard:
        raise InstanceTooLargeError(
            f"{total} configurations exceed the enumeration guard {guard}"
        )
    combo_idx = np.array(anchor_combos)  # (num_combos, k)

    best_j = -np.inf
    best: tuple[tuple[tuple[int, ...], ...], int] | None = None
    for cut_choice in itertools.product(*model_cuts):
        blocks = [
            b
            for i, m in enumerate(manifest.models)
            for b in blocks_from_cuts(m, cut_choice[i])
        ]
        sim = np.empty((num_blocks, num_blocks))
        for a, ba in enumerate(blocks):
            for b, bb in enumerate(blocks):
                sim[a, b] = block_similarity(table, ba, bb)
        # J per anchor combo: every block joins its best anchor
        per_combo = sim[:, combo_idx].max(axis=2).sum(axis=0)
        idx = int(per_combo.argmax())
        if per_combo[idx] > best_j:
            best_j = float(per_combo[idx])
            best = (cut_choice, idx)

    assert best is not None
    cut_choice, idx = best
    blocks = [
        b
        for i, m in enumerate(manifest.models)
        for b in blocks_from_cuts(m, cut_choice[i])
    ]
    sim = np.empty((num_blocks, num_blocks))
    for a, ba in enumerate(blocks):
        for b, bb in enumerate(blocks):
            sim[a, b] = block_similarity(table, ba, bb)
    anchors = anchor_combos[idx]
    labels = np.empty((n, k), dtype=int)
    for row, block in enumerate(blocks):
        scores = [sim[row, a] for a in anchors]
        best_set = int(np.argmax(scores))
        if row in anchors:
            best_set = anchors.index(row)  # anchors stay in their own set
        i = row // k
        labels[i, block.stage_index - 1] = best_set

    cuts = {
        m.model_id: cut_choice[i] for i, m in enumerate(manifest.models)
    }
    anchor_blocks = tuple(blocks[a] for a in anchors)
    partition = ZooPartition(
        cuts=cuts,
        assignment=Assignment(labels=labels),
        anchors=anchor_blocks,
        objective=best_j,
    )
    return partition


def candidate_from_blocks(
    manifest: ZooManifest, chosen: list[tuple[Block, int]]
) -> AssemblyCandidate:
    """Assemble a candidate object directly from picked (block, set) pairs."""
    adapters = tuple(
        adapter_cost(chosen[s][0].out_iface, chosen[s + 1][0].in_iface)
        for s in range(len(chosen) - 1)
    )
    total_params = sum(b.param_count for b, _ in chosen) + sum(a.param_count for a in adapters)
    total_flops = sum(b.flops for b, _ in chosen) + sum(a.flops for a in adapters)
    return AssemblyCandidate(
        blocks=tuple(b for b, _ in chosen),
        adapters=adapters,
        sets=tuple(g for _, g in chosen),
        total_params=total_params,
        total_flops=total_flops,
        selection=_selection_matrices(manifest, len(chosen), chosen),
    )
