"""Command-line surface: similarity, partition, reassemble, synth, report.

Every JSON artifact embeds the tool version, the resolved semantic
configuration, and content hashes of its inputs, so identical inputs and
seeds reproduce identical files. Execution-only knobs (worker count, log
level, filesystem paths) are deliberately left out of artifacts.

Exit codes: 0 success, 2 input error, 3 infeasible instance, 4 internal.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import (
    DegenerateClusteringError,
    DeryError,
    InfeasiblePartitionError,
    InstanceTooLargeError,
    MalformedCutsError,
    ManifestConsistencyError,
    ManifestParseError,
    MissingTableEntryError,
    UnscorableCandidateError,
)
from .partition import (
    DEFAULT_K,
    DEFAULT_MAX_ITERS,
    DEFAULT_RESTARTS,
    DEFAULT_TOL,
    optimize_partition_detailed,
    partition_doc,
    partition_from_doc,
)
from .reassembly import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_NUM_BATCHES,
    DEFAULT_NUM_CANDIDATES,
    BatchSpec,
    Budgets,
    plans_doc,
    search,
)
from .similarity import (
    DEFAULT_SUBSAMPLE,
    build_similarity_table,
    default_cache_path,
    diagonal_pattern_statistic,
    load_similarity_cache,
    manifest_table_key,
)
from .synthzoo import SynthSpec, generate, write_zoo
from .zoo import DEFAULT_EPS, load_manifest

logger = logging.getLogger("dery")

_INPUT_ERRORS = (
    ManifestParseError,
    ManifestConsistencyError,
    MalformedCutsError,
    MissingTableEntryError,
    UnscorableCandidateError,
    FileNotFoundError,
    ValueError,  # includes JSONDecodeError and out-of-range flag values
)
_INFEASIBLE_ERRORS = (
    InfeasiblePartitionError,
    DegenerateClusteringError,
    InstanceTooLargeError,
)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_artifact(path: Path, config: dict, input_hashes: dict, payload: dict) -> None:
    doc = {
        "tool_version": __version__,
        "config": config,
        "input_hashes": input_hashes,
        **payload,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _parse_range(text: str) -> tuple[int, int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return int(lo), int(hi)
    v = int(text)
    return v, v


def _get_table(args, manifest):
    key = manifest_table_key(manifest, args.subsample, args.sim_seed)
    cache = Path(args.sim_cache) if args.sim_cache else default_cache_path(args.manifest, key)
    return build_similarity_table(
        manifest,
        subsample=args.subsample,
        seed=args.sim_seed,
        cache_path=cache,
        workers=args.workers,
    ), cache


def cmd_similarity(args) -> int:
    manifest = load_manifest(args.manifest)
    table, cache = _get_table(args, manifest)
    print(
        f"similarity table for {len(table.model_ids)} models "
        f"({table.cka_evaluations} CKA evaluations, "
        f"{len(table.warnings)} degenerate entries) -> {cache}"
    )
    if args.out:
        _write_artifact(
            Path(args.out),
            config={
                "subcommand": "similarity",
                "subsample": args.subsample,
                "sim_seed": args.sim_seed,
            },
            input_hashes={"manifest": _sha256(Path(args.manifest))},
            payload={
                "table_key": table.key,
                "models": {m: table.node_counts[m] for m in table.model_ids},
                "cka_evaluations": table.cka_evaluations,
                "degenerate_entries": len(table.warnings),
            },
        )
    return 0


def cmd_partition(args) -> int:
    manifest = load_manifest(args.manifest)
    table, _ = _get_table(args, manifest)
    partition, stats = optimize_partition_detailed(
        table,
        manifest,
        k=args.k,
        eps=args.eps,
        max_iters=args.max_iters,
        tol=args.tol,
        restarts=args.restarts,
        seed=args.seed,
        workers=args.workers,
    )
    payload = partition_doc(partition, manifest.model_ids)
    payload["eps"] = args.eps
    payload["restart_objectives"] = stats.restart_objectives
    payload["degenerate_restarts"] = stats.degenerate_restarts
    payload["best_restart"] = stats.best_restart
    _write_artifact(
        Path(args.out),
        config={
            "subcommand": "partition",
            "k": args.k,
            "eps": args.eps,
            "restarts": args.restarts,
            "tol": args.tol,
            "max_iters": args.max_iters,
            "seed": args.seed,
            "subsample": args.subsample,
            "sim_seed": args.sim_seed,
        },
        input_hashes={"manifest": _sha256(Path(args.manifest))},
        payload=payload,
    )
    print(
        f"best partition J={partition.objective:.6f} "
        f"(restart {stats.best_restart}/{args.restarts}, "
        f"{stats.degenerate_restarts} degenerate) -> {args.out}"
    )
    return 0


def cmd_reassemble(args) -> int:
    manifest = load_manifest(args.manifest)
    doc = json.loads(Path(args.partition).read_text())
    partition = partition_from_doc(doc, manifest)
    result = search(
        partition,
        manifest,
        Budgets(params=args.max_params, flops=args.max_flops),
        num_candidates=args.candidates,
        batch_spec=BatchSpec(num_batches=args.batches, batch_size=args.batch_size),
        seed=args.seed,
        workers=args.workers,
    )
    payload = plans_doc(result)
    payload["plans"] = payload["plans"][: args.top]
    _write_artifact(
        Path(args.out),
        config={
            "subcommand": "reassemble",
            "max_params": args.max_params,
            "max_flops": args.max_flops,
            "candidates": args.candidates,
            "batches": args.batches,
            "batch_size": args.batch_size,
            "seed": args.seed,
            "top": args.top,
        },
        input_hashes={
            "manifest": _sha256(Path(args.manifest)),
            "partition": _sha256(Path(args.partition)),
        },
        payload=payload,
    )
    kept = len(payload["plans"])
    note = " (exhausted)" if result.stats.exhausted else ""
    print(
        f"scored {result.stats.accepted} candidates from {result.stats.draws} draws"
        f"{note}; kept top {kept} -> {args.out}"
    )
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(
        num_models=args.models,
        nodes=_parse_range(args.nodes),
        widths=_parse_range(args.widths),
        probe_n=args.probe,
        family_size=args.family,
    )
    zoo = generate(spec, args.seed)
    manifest_path = write_zoo(zoo, args.out)
    _write_artifact(
        Path(args.out) / "run-config.json",
        config={
            "subcommand": "synth",
            "models": args.models,
            "nodes": list(spec.nodes),
            "widths": list(spec.widths),
            "probe": args.probe,
            "family": args.family,
            "seed": args.seed,
        },
        input_hashes={},
        payload={"manifest": manifest_path.name},
    )
    print(f"wrote {args.models}-model zoo -> {manifest_path}")
    return 0


def cmd_report(args) -> int:
    lines: list[str] = []
    if args.plans:
        doc = json.loads(Path(args.plans).read_text())
        lines.append(f"# Ranked plans ({args.plans})")
        lines.append(f"{'rank':>4}  {'score':>12}  {'params':>12}  {'flops':>14}  blocks")
        for plan in doc["plans"]:
            blocks = " + ".join(
                f"{b['model_id']}[{b['node_range'][0]}..{b['node_range'][1]}]@s{b['stage']}"
                for b in plan["blocks"]
            )
            lines.append(
                f"{plan['rank']:>4}  {plan['score']:>12.4f}  {plan['total_params']:>12}  "
                f"{plan['total_flops']:>14.0f}  {blocks}"
            )
        stats = doc["sampler_stats"]
        lines.append(
            f"sampler: {stats['accepted']} accepted / {stats['draws']} draws, "
            f"rejections {stats['rejections']}"
        )
    if args.sim_cache:
        table = load_similarity_cache(args.sim_cache)
        lines.append(f"# Similarity diagonal pattern ({args.sim_cache})")
        lines.append(f"{'pair':<24} {'on-diag minus off-diag':>24}")
        stats = []
        for (mi, mj), tab in sorted(table.tables.items()):
            s = diagonal_pattern_statistic(tab)
            stats.append(s)
            lines.append(f"{mi}:{mj:<16} {s:>24.4f}")
        if stats:
            lines.append(f"{'mean':<24} {sum(stats) / len(stats):>24.4f}")
    if not lines:
        raise ManifestParseError("report needs --plans and/or --sim-cache")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _add_table_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--subsample", type=float, default=DEFAULT_SUBSAMPLE,
                   help="fraction of probe rows used for similarity")
    p.add_argument("--sim-seed", type=int, default=0,
                   help="seed for the similarity row subsample")
    p.add_argument("--sim-cache", default=None,
                   help="similarity cache file (default: derived, see DERY_CACHE_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dery", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dery {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("similarity", help="build the node-pair similarity table")
    p.add_argument("--manifest", required=True)
    _add_table_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None, help="optional JSON summary artifact")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("partition", help="optimize the joint K-way partition")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--restarts", type=int, default=DEFAULT_RESTARTS)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    p.add_argument("--seed", type=int, default=0)
    _add_table_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("reassemble", help="sample, score, and rank candidates")
    p.add_argument("--partition", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-params", type=float, required=True)
    p.add_argument("--max-flops", type=float, required=True)
    p.add_argument("--candidates", type=int, default=DEFAULT_NUM_CANDIDATES)
    p.add_argument("--batches", type=int, default=DEFAULT_NUM_BATCHES)
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reassemble)

    p = sub.add_parser("synth", help="generate a synthetic zoo")
    p.add_argument("--models", type=int, default=4)
    p.add_argument("--nodes", default="6..8", help="node count range, e.g. 6..8")
    p.add_argument("--widths", default="4..16", help="layer width range, e.g. 4..16")
    p.add_argument("--probe", type=int, default=64)
    p.add_argument("--family", type=int, default=0,
                   help="leading models that share weights")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="render plans and similarity summaries")
    p.add_argument("--plans", default=None)
    p.add_argument("--sim-cache", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper())
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error[input]: {exc}", file=sys.stderr)
        return 2
    except _INFEASIBLE_ERRORS as exc:
        print(f"error[infeasible]: {exc}", file=sys.stderr)
        return 3
    except (DeryError, Exception) as exc:  # noqa: BLE001 - single exit funnel
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
