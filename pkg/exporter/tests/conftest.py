"""Session-scoped exports shared across the exporter tests.

The primary optimizer is exercised strictly through its external
interfaces: the `dery` CLI and the documented file formats.
"""

from __future__ import annotations

import json

import pytest

from cliutil import run_dery
from dery_exporter.export import ZooEntry, export_zoo


@pytest.fixture(scope="session")
def real_zoo(tmp_path_factory):
    """resnet18 + vit_b_16, randomly initialized, 16 probe examples."""
    out = tmp_path_factory.mktemp("real-zoo")
    manifest = export_zoo(
        [ZooEntry("r18", "resnet18"), ZooEntry("vitb", "vit_b_16")],
        out,
        probe_n=16,
        seed=0,
    )
    return out, manifest


@pytest.fixture(scope="session")
def resnet_pair_zoo(tmp_path_factory):
    """Two residual ImageNet architectures for the similarity report."""
    out = tmp_path_factory.mktemp("resnet-zoo")
    manifest = export_zoo(
        [ZooEntry("r18a", "resnet18"), ZooEntry("r34a", "resnet34")],
        out,
        probe_n=16,
        seed=0,
    )
    return out, manifest


@pytest.fixture(scope="session")
def twin_zoo(tmp_path_factory):
    """Two weight-identical tiny CNNs (pinned init seed) plus optimizer
    artifacts produced through the dery CLI."""
    out = tmp_path_factory.mktemp("twin-zoo")
    manifest = export_zoo(
        [
            ZooEntry("t0", "tinycnn", init_seed=5),
            ZooEntry("t1", "tinycnn", init_seed=5),
        ],
        out,
        probe_n=32,
        seed=1,
    )
    cache = out / "sim.stb"
    r = run_dery(
        "similarity", "--manifest", manifest, "--subsample", "1.0",
        "--sim-cache", cache,
    )
    assert r.returncode == 0, r.stderr
    partition = out / "partition.json"
    r = run_dery(
        "partition", "--manifest", manifest, "--k", "2", "--eps", "1.0",
        "--restarts", "8", "--seed", "3", "--subsample", "1.0",
        "--sim-cache", cache, "--out", partition,
    )
    assert r.returncode == 0, r.stderr
    plans = out / "plans.json"
    r = run_dery(
        "reassemble", "--partition", partition, "--manifest", manifest,
        "--max-params", "1e6", "--max-flops", "1e6", "--candidates", "8",
        "--batches", "2", "--batch-size", "8", "--seed", "3", "--top", "8",
        "--out", plans,
    )
    assert r.returncode == 0, r.stderr
    assert json.loads(plans.read_text())["plans"]
    return out, manifest, plans
