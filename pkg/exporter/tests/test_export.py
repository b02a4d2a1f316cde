import json

import numpy as np
import pytest
import torch

from cliutil import run_dery
from dery_exporter.export import ZooEntry, export_zoo, parse_models_file, reload_probe
from dery_exporter.nodes import arch_spec, assign_parameters, build_model
from dery_exporter.wire import read_code_matrix


def test_resnet18_has_eight_nodes(real_zoo):
    _, manifest = real_zoo
    doc = json.loads(manifest.read_text())
    nodes = {m["model_id"]: len(m["nodes"]) for m in doc["models"]}
    assert nodes["r18"] == 8


def test_vit_b_has_twelve_nodes(real_zoo):
    _, manifest = real_zoo
    doc = json.loads(manifest.read_text())
    nodes = {m["model_id"]: len(m["nodes"]) for m in doc["models"]}
    assert nodes["vitb"] == 12


def test_manifest_passes_primary_validation(real_zoo, tmp_path):
    _, manifest = real_zoo
    r = run_dery(
        "similarity", "--manifest", manifest, "--subsample", "1.0",
        "--sim-cache", tmp_path / "sim.stb",
    )
    assert r.returncode == 0, r.stderr


def test_node_costs_cover_backbone_parameters(real_zoo):
    """Manifest params equal framework introspection minus the head."""
    _, manifest = real_zoo
    doc = json.loads(manifest.read_text())
    meta = json.loads((manifest.parent / "export-meta.json").read_text())["models"]
    for model_doc in doc["models"]:
        info = meta[model_doc["model_id"]]
        model = build_model(info["arch"], info["init_seed"], info["weights"])
        spec = arch_spec(info["arch"])
        head = set()
        for name, p in model.named_parameters():
            if any(name == h or name.startswith(h + ".") for h in spec.head_paths):
                head.add(name)
        backbone_total = sum(
            p.numel() for name, p in model.named_parameters() if name not in head
        )
        assert sum(n["param_count"] for n in model_doc["nodes"]) == backbone_total


def test_interfaces_follow_layouts(real_zoo):
    _, manifest = real_zoo
    doc = json.loads(manifest.read_text())
    by_id = {m["model_id"]: m for m in doc["models"]}
    for node in by_id["r18"]["nodes"]:
        assert node["layout"] == "spatial"
        assert node["out_h"] == node["out_w"]
    for node in by_id["vitb"]["nodes"]:
        assert node["layout"] == "tokens"
        assert (node["out_channels"], node["out_h"], node["out_w"]) == (768, 197, 1)


def test_codes_are_binary_with_probe_rows(real_zoo):
    zoo_dir, manifest = real_zoo
    doc = json.loads(manifest.read_text())
    for model_doc in doc["models"]:
        for node in model_doc["nodes"]:
            codes = read_code_matrix(zoo_dir / node["code_file"])
            assert codes.shape[0] == doc["probe_count"]
            assert set(np.unique(codes)) <= {0, 1}


def test_flops_are_positive_and_depthwise_plausible(real_zoo):
    _, manifest = real_zoo
    doc = json.loads(manifest.read_text())
    for model_doc in doc["models"]:
        flops = [n["flops"] for n in model_doc["nodes"]]
        assert all(f > 0 for f in flops)
        # node 1 carries the stem, so it must be the costliest resnet node
        if model_doc["model_id"] == "r18":
            assert flops[0] == max(flops)


def test_probe_reload_matches_export(real_zoo):
    zoo_dir, _ = real_zoo
    probe = reload_probe(zoo_dir)
    assert probe.shape == (16, 3, 224, 224)
    assert torch.equal(probe, reload_probe(zoo_dir))


def test_pinned_init_seed_gives_identical_twins(twin_zoo):
    zoo_dir, manifest, _ = twin_zoo
    doc = json.loads(manifest.read_text())
    t0, t1 = doc["models"]
    for n0, n1 in zip(t0["nodes"], t1["nodes"]):
        c0 = read_code_matrix(zoo_dir / n0["code_file"])
        c1 = read_code_matrix(zoo_dir / n1["code_file"])
        np.testing.assert_array_equal(c0, c1)


def test_parse_models_file(tmp_path):
    listing = tmp_path / "models.txt"
    listing.write_text(
        "# zoo\nr18 resnet18\nr50pre resnet50:IMAGENET1K_V1\ntwin tinycnn 5\n"
    )
    entries = parse_models_file(listing)
    assert entries[0] == ZooEntry("r18", "resnet18", None, None)
    assert entries[1] == ZooEntry("r50pre", "resnet50", "IMAGENET1K_V1", None)
    assert entries[2] == ZooEntry("twin", "tinycnn", None, 5)


def test_unknown_arch_rejected(tmp_path):
    with pytest.raises(ValueError, match="unsupported"):
        export_zoo([ZooEntry("x", "alexnet")], tmp_path)


def test_parameter_assignment_is_total():
    for arch in ("resnet18", "resnet50", "vit_b_16", "tinycnn"):
        spec = arch_spec(arch)
        model = build_model(arch, init_seed=0)
        counts = assign_parameters(model, spec)
        assert len(counts) == len(spec.node_paths)
        assert all(c > 0 for c in counts)
