"""Dump real networks into the optimizer's zoo formats.

Forward hooks on each node module capture its output on a shared probe
batch; features are flattened per example to float32 matrices, codes are
their sign binarization. Costs come from framework introspection:
parameter counts by module assignment, multiply-accumulates from the
dispatcher-level FLOP counter (halved, per probe example).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.utils.flop_counter import FlopCounterMode

from . import wire
from .nodes import ArchSpec, arch_spec, assign_parameters, build_model, submodule


@dataclass(frozen=True)
class ZooEntry:
    model_id: str
    arch: str
    weights: str | None = None
    init_seed: int | None = None  # pinned random init; derived from id when None

    def resolved_seed(self, base_seed: int) -> int:
        if self.init_seed is not None:
            return self.init_seed
        digest = hashlib.sha256(self.model_id.encode()).digest()
        return base_seed ^ int.from_bytes(digest[:4], "little")


def parse_models_file(path: str | Path) -> list[ZooEntry]:
    """One entry per line: `<model_id> <arch>[:<weights-enum>] [<init_seed>]`."""
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        model_id, archspec = fields[:2]
        arch, _, weights = archspec.partition(":")
        init_seed = int(fields[2]) if len(fields) > 2 else None
        entries.append(ZooEntry(model_id, arch, weights or None, init_seed))
    return entries


def synthetic_probe(n: int, size: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((n, 3, size, size), generator=gen)


def load_probe_dir(probe_dir: str | Path, n: int, size: int, seed: int):
    """Seeded subset of image files from a directory, resized to `size`."""
    from torchvision.io import read_image
    from torchvision.transforms.functional import convert_image_dtype, resize

    files = sorted(
        p for p in Path(probe_dir).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if len(files) < n:
        raise ValueError(f"probe dir holds {len(files)} images, need {n}")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(files), size=n, replace=False).tolist())
    batch = torch.stack(
        [
            convert_image_dtype(
                resize(read_image(str(files[i]))[:3], [size, size]), torch.float32
            )
            for i in chosen
        ]
    )
    return batch, [files[i].name for i in chosen]


def _resize_probe(probe: torch.Tensor, size: int) -> torch.Tensor:
    if probe.shape[-1] == size and probe.shape[-2] == size:
        return probe
    return torch.nn.functional.interpolate(
        probe, size=(size, size), mode="bilinear", align_corners=False
    )


def capture_node_outputs(
    model: nn.Module, spec: ArchSpec, batch: torch.Tensor
) -> list[torch.Tensor]:
    """One forward pass; hooks collect every node module's output."""
    captured: dict[str, torch.Tensor] = {}
    handles = []
    for path in spec.node_paths:
        module = submodule(model, path)

        def hook(_mod, _inp, out, path=path):
            captured[path] = out.detach()

        handles.append(module.register_forward_hook(hook))
    try:
        with torch.no_grad():
            model(batch)
    finally:
        for h in handles:
            h.remove()
    missing = [p for p in spec.node_paths if p not in captured]
    if missing:
        raise RuntimeError(f"{spec.arch}: no output captured for {missing}")
    return [captured[p] for p in spec.node_paths]


def node_flops(model: nn.Module, spec: ArchSpec, size: int) -> list[float]:
    """Multiply-accumulates per node per probe example.

    The counter reports 2*MACs attributed to module paths; stem costs fold
    into node 1, classifier-side costs are dropped.
    """
    counter = FlopCounterMode(display=False)
    with counter, torch.no_grad():
        model(torch.zeros((1, 3, size, size)))
    root = type(model).__name__
    per_path: dict[str, float] = {}
    for key, ops in counter.get_flop_counts().items():
        if not key.startswith(root + "."):
            continue
        per_path[key[len(root) + 1:]] = float(sum(ops.values()))
    flops = []
    for i, path in enumerate(spec.node_paths):
        total = per_path.get(path, 0.0)
        if i == 0:
            total += sum(per_path.get(p, 0.0) for p in spec.stem_paths)
        flops.append(total / 2.0)
    return flops


def iface_of(tensor: torch.Tensor) -> tuple[int, int, int, str]:
    """(out_channels, out_h, out_w, layout) from a captured node output."""
    if tensor.ndim == 4:
        _, c, h, w = tensor.shape
        return int(c), int(h), int(w), "spatial"
    if tensor.ndim == 3:
        _, t, d = tensor.shape
        return int(d), int(t), 1, "tokens"
    if tensor.ndim == 2:
        return int(tensor.shape[1]), 1, 1, "tokens"
    raise ValueError(f"cannot derive an interface from shape {tuple(tensor.shape)}")


def flatten_features(tensor: torch.Tensor) -> np.ndarray:
    return tensor.reshape(tensor.shape[0], -1).cpu().numpy().astype(np.float32)


def export_zoo(
    entries: list[ZooEntry],
    out_dir: str | Path,
    probe_dir: str | Path | None = None,
    probe_n: int = 16,
    subsample: float = 0.05,
    seed: int = 0,
) -> Path:
    """Write manifest + FMX1/BCX1 files for the given backbones.

    The probe batch is shared across models (resized to each model's native
    resolution). Without a probe directory a seeded synthetic batch is used;
    with one, `subsample` picks the seeded fraction of its images (at least
    `probe_n`) and the chosen index list is published alongside the zoo.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "codes").mkdir(parents=True, exist_ok=True)

    specs = [arch_spec(e.arch) for e in entries]
    probe_size = max(s.input_size for s in specs)
    probe_files = None
    if probe_dir is None:
        probe = synthetic_probe(probe_n, probe_size, seed)
    else:
        total = sum(
            1 for p in Path(probe_dir).iterdir()
            if p.suffix.lower() in (".png", ".jpg", ".jpeg")
        )
        n = max(probe_n, int(round(total * subsample)))
        probe, probe_files = load_probe_dir(probe_dir, n, probe_size, seed)
    n = probe.shape[0]

    models_doc = []
    meta_models = {}
    for entry, spec in zip(entries, specs):
        init_seed = entry.resolved_seed(seed)
        model = build_model(entry.arch, init_seed, entry.weights)
        batch = _resize_probe(probe, spec.input_size)
        outputs = capture_node_outputs(model, spec, batch)
        params = assign_parameters(model, spec)
        flops = node_flops(model, spec, spec.input_size)

        nodes_doc = []
        for ordinal, (out, p, f) in enumerate(zip(outputs, params, flops), start=1):
            c, h, w, layout = iface_of(out)
            feature_ref = f"features/{entry.model_id}_n{ordinal:02d}.fmx"
            code_ref = f"codes/{entry.model_id}_n{ordinal:02d}.bcx"
            feats = flatten_features(out)
            wire.write_feature_matrix(out_dir / feature_ref, feats)
            wire.write_code_matrix(out_dir / code_ref, (feats > 0).astype(np.uint8))
            nodes_doc.append(
                {
                    "param_count": int(p),
                    "flops": float(f),
                    "out_channels": c,
                    "out_h": h,
                    "out_w": w,
                    "layout": layout,
                    "feature_file": feature_ref,
                    "code_file": code_ref,
                }
            )
        models_doc.append(
            {
                "model_id": entry.model_id,
                "input_shape": [3, spec.input_size, spec.input_size],
                "nodes": nodes_doc,
            }
        )
        meta_models[entry.model_id] = {
            "arch": entry.arch,
            "weights": entry.weights,
            "init_seed": init_seed,
        }

    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(
            {"version": "dery-zoo/1", "probe_count": n, "models": models_doc},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    meta = {
        "models": meta_models,
        "probe": {
            "n": n,
            "size": probe_size,
            "seed": seed,
            "source": "synthetic" if probe_files is None else "files",
            "files": probe_files,
            "probe_dir": None if probe_dir is None else str(probe_dir),
        },
    }
    (out_dir / "export-meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest_path


def reload_probe(zoo_dir: str | Path) -> torch.Tensor:
    """Reconstruct the export's probe batch from the published metadata."""
    meta = json.loads((Path(zoo_dir) / "export-meta.json").read_text())
    p = meta["probe"]
    if p["source"] == "synthetic":
        return synthetic_probe(p["n"], p["size"], p["seed"])
    batch, files = load_probe_dir(p["probe_dir"], p["n"], p["size"], p["seed"])
    if files != p["files"]:
        raise RuntimeError("probe directory changed since export")
    return batch
