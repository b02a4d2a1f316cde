"""Shared fixtures: synthetic zoos written to disk once per session."""

from __future__ import annotations

import numpy as np
import pytest

from dery import load_manifest
from dery.similarity import build_similarity_table
from dery.synthzoo import SynthSpec, generate, write_zoo

# Frozen acceptance instance: 4 models of 6-8 nodes, widths 8-12, the first
# two sharing all weights. Chosen so every model admits a valid 3-way cut at
# eps=0.2 and the twins have several (cut optimization is exercised).
ACCEPTANCE_SPEC = SynthSpec(
    num_models=4, nodes=(6, 8), widths=(8, 12), probe_n=64, family_size=2
)
ACCEPTANCE_SEED = 183

# Fully weight-shared zoo: every stitched candidate is functionally one
# network, so forwarded codes must equal concatenated per-block codes.
SHARED_SPEC = SynthSpec(
    num_models=4, nodes=(6, 6), widths=(6, 10), probe_n=64, family_size=4
)
SHARED_SEED = 11


@pytest.fixture(scope="session")
def acceptance_zoo(tmp_path_factory):
    zoo = generate(ACCEPTANCE_SPEC, ACCEPTANCE_SEED)
    out = tmp_path_factory.mktemp("acceptance-zoo")
    manifest_path = write_zoo(zoo, out)
    manifest = load_manifest(manifest_path)
    return zoo, manifest, manifest_path


@pytest.fixture(scope="session")
def acceptance_table(acceptance_zoo):
    _, manifest, _ = acceptance_zoo
    return build_similarity_table(manifest, subsample=1.0, seed=0)


@pytest.fixture(scope="session")
def shared_zoo(tmp_path_factory):
    zoo = generate(SHARED_SPEC, SHARED_SEED)
    out = tmp_path_factory.mktemp("shared-zoo")
    manifest_path = write_zoo(zoo, out)
    manifest = load_manifest(manifest_path)
    return zoo, manifest, manifest_path


@pytest.fixture(scope="session")
def shared_table(shared_zoo):
    _, manifest, _ = shared_zoo
    return build_similarity_table(manifest, subsample=1.0, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
