import json

import pytest
import torch

from dery_exporter.materialize import (
    BackboneBlock,
    count_params,
    materialize_plan,
)
from dery_exporter.nodes import build_model
from planfile import build_plan_file


@pytest.fixture(scope="module")
def r18_four_block_plan(real_zoo, tmp_path_factory):
    zoo_dir, manifest = real_zoo
    out = tmp_path_factory.mktemp("plans") / "plans.json"
    doc = build_plan_file(
        manifest, [("r18", 1, 2), ("r18", 3, 4), ("r18", 5, 6), ("r18", 7, 8)], out
    )
    return zoo_dir, out, doc


def test_four_block_same_model_plan_builds_and_forwards(r18_four_block_plan):
    zoo_dir, plan_path, _ = r18_four_block_plan
    net = materialize_plan(plan_path, zoo_dir)
    with torch.no_grad():
        out = net(torch.randn(2, 3, 224, 224))
    assert out.shape == (2, 512, 7, 7)


def test_built_params_match_plan_total(r18_four_block_plan):
    zoo_dir, plan_path, doc = r18_four_block_plan
    net = materialize_plan(plan_path, zoo_dir)
    built = count_params(net)
    planned = doc["plans"][0]["total_params"]
    assert abs(built - planned) / planned < 0.001
    assert built == planned  # the cost model is exact, not just within 0.1%


def test_identity_adapters_reproduce_the_original_backbone(r18_four_block_plan):
    """Degenerate reassembly: with pass-through adapters the stitched
    network computes exactly the original model's backbone features."""
    zoo_dir, plan_path, _ = r18_four_block_plan
    net = materialize_plan(plan_path, zoo_dir, identity_init=True)
    meta = json.loads((zoo_dir / "export-meta.json").read_text())["models"]["r18"]
    original = build_model(meta["arch"], meta["init_seed"], meta["weights"])
    whole = BackboneBlock("resnet18", original, 1, 8)
    x = torch.randn(2, 3, 224, 224)
    with torch.no_grad():
        stitched = net(x)
        reference = whole(x)
    assert torch.equal(stitched, reference)


def test_hybrid_cnn_transformer_plan_materializes(real_zoo, tmp_path):
    """Residual stages feeding transformer blocks through a cnn->seq stitch."""
    zoo_dir, manifest = real_zoo
    plan_path = tmp_path / "hybrid.json"
    doc = build_plan_file(manifest, [("r18", 1, 4), ("vitb", 7, 12)], plan_path)
    assert doc["plans"][0]["adapters"][0]["kind"] == "cnn->seq"
    net = materialize_plan(plan_path, zoo_dir)
    with torch.no_grad():
        out = net(torch.randn(2, 3, 224, 224))
    assert out.shape == (2, 197, 768)
    assert count_params(net) == doc["plans"][0]["total_params"]


def test_seq_to_cnn_adapter_roundtrip(real_zoo, tmp_path):
    zoo_dir, manifest = real_zoo
    plan_path = tmp_path / "seq2cnn.json"
    doc = build_plan_file(manifest, [("vitb", 1, 2), ("r18", 5, 8)], plan_path)
    assert doc["plans"][0]["adapters"][0]["kind"] == "seq->cnn"
    net = materialize_plan(plan_path, zoo_dir)
    with torch.no_grad():
        out = net(torch.randn(2, 3, 224, 224))
    assert out.shape == (2, 512, 7, 7)


def test_missing_rank_is_an_error(r18_four_block_plan):
    zoo_dir, plan_path, _ = r18_four_block_plan
    with pytest.raises(ValueError, match="rank 7"):
        materialize_plan(plan_path, zoo_dir, rank=7)
