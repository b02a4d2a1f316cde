"""Model-zoo domain types, manifest I/O, and block cost accounting.

A zoo is a set of path-graph models. Node ordinals, block stage indices,
and cut positions are all 1-based: cut ``c`` splits the chain after node
``c``, so a cut list ``(c_1 < ... < c_{K-1})`` yields blocks spanning the
node ranges ``[1, c_1], [c_1+1, c_2], ..., [c_{K-1}+1, L]``.

All types are immutable after construction and safe to share across
workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MalformedCutsError, ManifestConsistencyError, ManifestParseError
from .wire import BCX_MAGIC, FMX_MAGIC, read_matrix_header

MANIFEST_VERSION = "dery-zoo/1"

LAYOUTS = ("spatial", "tokens")

#: Default block-size coefficient for the balance constraint.
DEFAULT_EPS = 0.2


@dataclass(frozen=True)
class Iface:
    """Tensor interface at a block boundary: channels, (h, w), layout.

    Token layouts store (tokens, 1) as their spatial extent; pure vector
    outputs are (1, 1).
    """

    channels: int
    spatial: tuple[int, int]
    layout: str

    @property
    def width(self) -> int:
        """Flattened per-example dimensionality c*h*w."""
        return self.channels * self.spatial[0] * self.spatial[1]


@dataclass(frozen=True)
class NodeMeta:
    node_id: int
    param_count: int
    flops: float
    out_channels: int
    out_spatial: tuple[int, int]
    layout: str
    feature_ref: str | None = None
    code_ref: str | None = None

    @property
    def out_iface(self) -> Iface:
        return Iface(self.out_channels, self.out_spatial, self.layout)


@dataclass(frozen=True)
class ModelGraph:
    model_id: str
    nodes: tuple[NodeMeta, ...]
    input_shape: tuple[int, int, int]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def param_total(self) -> int:
        return sum(n.param_count for n in self.nodes)

    @property
    def input_iface(self) -> Iface:
        c, h, w = self.input_shape
        layout = "spatial" if h * w > 1 else "tokens"
        return Iface(c, (h, w), layout)

    def node(self, ordinal: int) -> NodeMeta:
        return self.nodes[ordinal - 1]


@dataclass(frozen=True)
class ZooManifest:
    models: tuple[ModelGraph, ...]
    probe_count: int
    version: str = MANIFEST_VERSION
    base_dir: Path | None = field(default=None, compare=False)

    @property
    def model_ids(self) -> tuple[str, ...]:
        return tuple(m.model_id for m in self.models)

    def model(self, model_id: str) -> ModelGraph:
        for m in self.models:
            if m.model_id == model_id:
                return m
        raise KeyError(model_id)

    def model_index(self, model_id: str) -> int:
        return self.model_ids.index(model_id)

    def resolve(self, ref: str) -> Path:
        """Resolve a file reference relative to the manifest's directory."""
        p = Path(ref)
        if p.is_absolute() or self.base_dir is None:
            return p
        return self.base_dir / p


@dataclass(frozen=True)
class Block:
    """A contiguous run of nodes: the stage-k building block of one model."""

    model_id: str
    stage_index: int
    node_range: tuple[int, int]
    param_count: int
    flops: float
    in_iface: Iface
    out_iface: Iface

    @property
    def sort_key(self) -> tuple[str, int]:
        return (self.model_id, self.stage_index)


def make_block(model: ModelGraph, stage_index: int, first: int, last: int) -> Block:
    """Build the block spanning nodes [first, last] (inclusive, 1-based)."""
    if not (1 <= first <= last <= model.num_nodes):
        raise ValueError(
            f"node range [{first}, {last}] out of bounds for model "
            f"{model.model_id!r} with {model.num_nodes} nodes"
        )
    members = model.nodes[first - 1:last]
    in_iface = model.input_iface if first == 1 else model.node(first - 1).out_iface
    return Block(
        model_id=model.model_id,
        stage_index=stage_index,
        node_range=(first, last),
        param_count=sum(n.param_count for n in members),
        flops=float(sum(n.flops for n in members)),
        in_iface=in_iface,
        out_iface=model.node(last).out_iface,
    )


def blocks_from_cuts(model: ModelGraph, cuts: tuple[int, ...]) -> tuple[Block, ...]:
    check_cuts(model, cuts)
    bounds = (0, *cuts, model.num_nodes)
    return tuple(
        make_block(model, k, bounds[k - 1] + 1, bounds[k])
        for k in range(1, len(bounds))
    )


def block_cost(block: Block) -> tuple[int, float]:
    """Exact (params, flops) of a block; totals are sums over member nodes."""
    return block.param_count, block.flops


def check_cuts(model: ModelGraph, cuts: tuple[int, ...]) -> None:
    prev = 0
    for c in cuts:
        if not isinstance(c, (int,)) or isinstance(c, bool):
            raise MalformedCutsError(f"cut {c!r} is not an integer")
        if c <= prev:
            raise MalformedCutsError(f"cuts {cuts} are not strictly increasing")
        prev = c
    if cuts and (cuts[0] < 1 or cuts[-1] > model.num_nodes - 1):
        raise MalformedCutsError(
            f"cuts {cuts} out of range [1, {model.num_nodes - 1}] "
            f"for model {model.model_id!r}"
        )


def size_bound(model: ModelGraph, k: int, eps: float) -> float:
    """Per-block parameter budget (1+eps)*|M|/K; blocks must stay strictly below."""
    return (1.0 + eps) * model.param_total / k


def validate_partition(
    model: ModelGraph, cuts: tuple[int, ...], eps: float = DEFAULT_EPS
) -> list[str]:
    """Check one model's K-way cut; returns all violations, not just the first.

    Structural checks (nonempty, contiguous, covering) are re-derived from
    the produced blocks rather than assumed from the cut encoding.
    """
    check_cuts(model, cuts)
    k = len(cuts) + 1
    blocks = blocks_from_cuts(model, cuts)
    violations: list[str] = []
    covered: list[int] = []
    for b in blocks:
        first, last = b.node_range
        if last < first:
            violations.append(f"empty: model {model.model_id} block {b.stage_index}")
        covered.extend(range(first, last + 1))
    if covered != list(range(1, model.num_nodes + 1)):
        violations.append(f"cover: model {model.model_id} blocks do not tile the node list")
    bound = size_bound(model, k, eps)
    for b in blocks:
        if not b.param_count < bound:
            violations.append(
                f"size: model {model.model_id} block {b.stage_index} has "
                f"{b.param_count} params, bound is {bound:g}"
            )
    return violations


def load_manifest(path: str | Path) -> ZooManifest:
    """Parse and fully validate a zoo manifest.

    Referenced feature/code files are header-checked (magic and row count)
    without loading their payloads.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestParseError(f"{path}: {exc}") from exc

    for key in ("version", "probe_count", "models"):
        if key not in raw:
            raise ManifestParseError(f"{path}: missing top-level key {key!r}")
    if raw["version"] != MANIFEST_VERSION:
        raise ManifestParseError(
            f"{path}: unsupported version {raw['version']!r}, expected {MANIFEST_VERSION!r}"
        )
    probe_count = raw["probe_count"]
    if not isinstance(probe_count, int) or probe_count < 1:
        raise ManifestParseError(f"{path}: probe_count must be a positive integer")

    base_dir = path.parent
    models = tuple(_parse_model(entry, idx, path) for idx, entry in enumerate(raw["models"]))
    manifest = ZooManifest(
        models=models, probe_count=probe_count, version=raw["version"], base_dir=base_dir
    )

    seen: set[str] = set()
    for m in models:
        if m.model_id in seen:
            raise ManifestConsistencyError(f"duplicate model_id {m.model_id!r}")
        seen.add(m.model_id)
    for m in models:
        for node in m.nodes:
            for ref, magic in ((node.feature_ref, FMX_MAGIC), (node.code_ref, BCX_MAGIC)):
                if ref is None:
                    continue
                target = manifest.resolve(ref)
                if not target.exists():
                    raise ManifestConsistencyError(
                        f"model {m.model_id} node {node.node_id}: "
                        f"referenced file {ref} does not exist"
                    )
                got_magic, n, _ = read_matrix_header(target)
                if got_magic != magic:
                    raise ManifestConsistencyError(
                        f"model {m.model_id} node {node.node_id}: {ref} has magic "
                        f"{got_magic!r}, expected {magic!r}"
                    )
                if n != probe_count:
                    raise ManifestConsistencyError(
                        f"model {m.model_id} node {node.node_id}: {ref} holds {n} rows, "
                        f"manifest probe_count is {probe_count}"
                    )
    return manifest


def _parse_model(entry: dict, idx: int, path: Path) -> ModelGraph:
    where = f"{path}: models[{idx}]"
    if not isinstance(entry, dict):
        raise ManifestParseError(f"{where}: expected an object")
    try:
        model_id = entry["model_id"]
        input_shape = tuple(entry["input_shape"])
        raw_nodes = entry["nodes"]
    except (KeyError, TypeError) as exc:
        raise ManifestParseError(f"{where}: {exc}") from exc
    if len(input_shape) != 3 or any(not isinstance(v, int) or v < 1 for v in input_shape):
        raise ManifestParseError(f"{where}: input_shape must be three positive integers")
    if not raw_nodes:
        raise ManifestConsistencyError(f"model {model_id!r}: node list is empty")

    nodes = []
    for ordinal, nd in enumerate(raw_nodes, start=1):
        who = f"model {model_id} node {ordinal}"
        try:
            meta = NodeMeta(
                node_id=ordinal,
                param_count=nd["param_count"],
                flops=float(nd["flops"]),
                out_channels=nd["out_channels"],
                out_spatial=(nd["out_h"], nd["out_w"]),
                layout=nd["layout"],
                feature_ref=nd.get("feature_file"),
                code_ref=nd.get("code_file"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestParseError(f"{who}: {exc}") from exc
        if meta.param_count < 0 or meta.flops < 0:
            raise ManifestConsistencyError(f"{who}: negative cost")
        if meta.out_channels < 1 or min(meta.out_spatial) < 1:
            raise ManifestConsistencyError(f"{who}: non-positive output shape")
        if meta.layout not in LAYOUTS:
            raise ManifestConsistencyError(f"{who}: unknown layout {meta.layout!r}")
        nodes.append(meta)
    return ModelGraph(model_id=model_id, nodes=tuple(nodes), input_shape=input_shape)


def save_manifest(manifest: ZooManifest, path: str | Path) -> None:
    """Write the manifest as stable-key-order JSON (inverse of load_manifest)."""
    doc = {
        "version": manifest.version,
        "probe_count": manifest.probe_count,
        "models": [
            {
                "model_id": m.model_id,
                "input_shape": list(m.input_shape),
                "nodes": [_node_doc(n) for n in m.nodes],
            }
            for m in manifest.models
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _node_doc(node: NodeMeta) -> dict:
    doc = {
        "param_count": node.param_count,
        "flops": node.flops,
        "out_channels": node.out_channels,
        "out_h": node.out_spatial[0],
        "out_w": node.out_spatial[1],
        "layout": node.layout,
    }
    if node.feature_ref is not None:
        doc["feature_file"] = node.feature_ref
    if node.code_ref is not None:
        doc["code_file"] = node.code_ref
    return doc


