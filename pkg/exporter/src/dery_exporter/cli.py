"""Command-line entry points: dery-export and dery-materialize."""

from __future__ import annotations

import argparse
import sys

import torch

from .export import export_zoo, parse_models_file
from .materialize import count_params, materialize_plan
from .rerank import rerank_exact


def export_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dery-export",
        description="Dump real backbones into the optimizer's zoo formats.",
    )
    parser.add_argument("--models", required=True,
                        help="file with one '<model_id> <arch>[:<weights>] [seed]' per line")
    parser.add_argument("--data", default=None, help="probe image directory (else synthetic)")
    parser.add_argument("--probe-n", type=int, default=16)
    parser.add_argument("--subsample", type=float, default=0.05,
                        help="fraction of --data images used as the probe set")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    try:
        manifest = export_zoo(
            parse_models_file(args.models),
            args.out,
            probe_dir=args.data,
            probe_n=args.probe_n,
            subsample=args.subsample,
            seed=args.seed,
        )
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"exported zoo -> {manifest}")
    return 0


def materialize_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dery-materialize",
        description="Build an executable stitched network from a ranked plan.",
    )
    parser.add_argument("--plan", required=True, help="plans.json from the optimizer")
    parser.add_argument("--zoo", required=True, help="exported zoo directory")
    parser.add_argument("--rank", type=int, default=1)
    parser.add_argument("--rerank", type=int, default=0,
                        help="also rescore the top-k plans with exact stitched codes")
    parser.add_argument("--batches", type=int, default=5)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--out", default=None, help="checkpoint path for the built network")
    args = parser.parse_args(argv)
    try:
        net = materialize_plan(args.plan, args.zoo, rank=args.rank)
        print(f"materialized plan rank {args.rank}: {count_params(net)} parameters")
        if args.rerank:
            records = rerank_exact(
                args.plan, args.zoo, top_k=args.rerank,
                num_batches=args.batches, batch_size=args.batch_size,
            )
            for rec in records:
                print(
                    f"rank {rec['rank']}: exact {rec['exact_score']:.4f} "
                    f"(search {rec['original_score']:.4f})"
                )
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        torch.save({"state_dict": net.state_dict(), "rank": args.rank}, args.out)
        print(f"saved checkpoint -> {args.out}")
    return 0
