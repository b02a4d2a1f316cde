import json

import numpy as np
import pytest

from dery_exporter.rerank import batched_score, hamming_logdet, rerank_exact
from dery_exporter.wire import read_code_matrix


def concatenated_plan_codes(zoo_dir, manifest_path, plan):
    """The optimizer's scoring signal, rebuilt from the wire files."""
    doc = json.loads(manifest_path.read_text())
    models = {m["model_id"]: m for m in doc["models"]}
    segments = []
    for block in plan["blocks"]:
        nodes = models[block["model_id"]]["nodes"]
        first, last = block["node_range"]
        for node in nodes[first - 1:last]:
            segments.append(read_code_matrix(zoo_dir / node["code_file"]))
    return np.concatenate(segments, axis=1)


def test_hamming_logdet_hand_case():
    codes = np.array([[1, 0, 1], [1, 1, 0]], dtype=np.uint8)
    assert abs(hamming_logdet(codes) - np.log(8)) < 1e-12


def test_rerank_returns_finite_score_for_top_plan(twin_zoo):
    zoo_dir, _, plans = twin_zoo
    results = rerank_exact(plans, zoo_dir, top_k=1, num_batches=2, batch_size=8, seed=0)
    assert len(results) == 1
    assert np.isfinite(results[0]["exact_score"])


def test_exact_equals_concatenated_under_identity_adapters(twin_zoo):
    """Weight-identical twins + pass-through adapters: the stitched network
    is functionally its home network, so exact codes must equal the
    concatenated per-block codes and the scores must agree."""
    zoo_dir, manifest, plans = twin_zoo
    plan_doc = json.loads(plans.read_text())
    seed, num_batches, batch_size = 11, 3, 8
    results = rerank_exact(
        plans, zoo_dir, num_batches=num_batches, batch_size=batch_size,
        seed=seed, identity_init=True,
    )
    assert len(results) == len(plan_doc["plans"])
    probe_n = json.loads(manifest.read_text())["probe_count"]
    rng = np.random.default_rng(seed)
    batches = [rng.choice(probe_n, size=batch_size, replace=False) for _ in range(num_batches)]
    for rec, plan in zip(results, plan_doc["plans"]):
        codes = concatenated_plan_codes(zoo_dir, manifest, plan)
        expected = batched_score(codes, batches)
        assert abs(rec["exact_score"] - expected) <= 1e-9


def test_rerank_skips_broken_plans(twin_zoo, tmp_path):
    zoo_dir, manifest, plans = twin_zoo
    doc = json.loads(plans.read_text())
    doc["plans"][0]["blocks"][0]["model_id"] = "t0"
    doc["plans"][0]["blocks"][0]["node_range"] = [1, 99]  # out of range
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps(doc))
    with pytest.warns(UserWarning, match="skipped"):
        results = rerank_exact(broken, zoo_dir, top_k=1, num_batches=1, batch_size=4)
    assert results == []


def test_default_batch_spec_matches_search_defaults():
    import inspect

    sig = inspect.signature(rerank_exact)
    assert sig.parameters["num_batches"].default == 5
    assert sig.parameters["batch_size"].default == 32
