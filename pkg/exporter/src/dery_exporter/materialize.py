"""Materialize a ranked plan into an executable stitched network.

Blocks are module slices of their home backbones (the stem rides along
with a model's first node, the classifier head is dropped). Between
consecutive blocks a stitch adapter aligns interfaces following the
norm -> 1x1 projection -> activation structure, with a declared
nearest-neighbor resample (no parameters) when spatial/token extents
disagree:

  cnn->cnn   BatchNorm2d -> Conv1x1 -> LeakyReLU
  cnn->seq   BatchNorm2d -> Conv1x1 -> LeakyReLU -> flatten to tokens
  seq->cnn   reshape to grid -> BatchNorm2d -> Conv1x1 -> LeakyReLU
  seq->seq   LayerNorm -> Linear -> LeakyReLU
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .nodes import arch_spec, build_model, submodule


class ResnetStem(nn.Module):
    def __init__(self, resnet: nn.Module):
        super().__init__()
        self.conv1 = resnet.conv1
        self.bn1 = resnet.bn1
        self.relu = resnet.relu
        self.maxpool = resnet.maxpool

    def forward(self, x):
        return self.maxpool(self.relu(self.bn1(self.conv1(x))))


class VitStem(nn.Module):
    """Patch embedding, class token, and position embedding of a ViT."""

    def __init__(self, vit: nn.Module):
        super().__init__()
        self.vit = vit

    def forward(self, x):
        x = self.vit._process_input(x)
        n = x.shape[0]
        cls = self.vit.class_token.expand(n, -1, -1)
        x = torch.cat([cls, x], dim=1)
        x = x + self.vit.encoder.pos_embedding
        return self.vit.encoder.dropout(x)


def _stem_for(arch: str, model: nn.Module) -> nn.Module | None:
    if arch.startswith("resnet"):
        return ResnetStem(model)
    if arch.startswith("vit"):
        return VitStem(model)
    return None


class BackboneBlock(nn.Module):
    """Nodes [first, last] of one backbone, stem included when first == 1."""

    def __init__(self, arch: str, model: nn.Module, first: int, last: int):
        super().__init__()
        spec = arch_spec(arch)
        if not 1 <= first <= last <= len(spec.node_paths):
            raise ValueError(
                f"node range [{first}, {last}] outside {arch}'s "
                f"{len(spec.node_paths)} nodes"
            )
        self.stem = _stem_for(arch, model) if first == 1 else None
        self.nodes = nn.ModuleList(
            submodule(model, spec.node_paths[i - 1]) for i in range(first, last + 1)
        )

    def forward(self, x):
        out, _ = self.forward_nodes(x)
        return out

    def forward_nodes(self, x):
        if self.stem is not None:
            x = self.stem(x)
        outputs = []
        for node in self.nodes:
            x = node(x)
            outputs.append(x)
        return x, outputs


def _resample_tokens(x: torch.Tensor, tokens: int) -> torch.Tensor:
    # x: (B, T, D) -> (B, tokens, D), nearest-neighbor along the token axis
    if x.shape[1] == tokens:
        return x
    return F.interpolate(x.transpose(1, 2), size=tokens, mode="nearest").transpose(1, 2)


class StitchAdapter(nn.Module):
    def __init__(self, spec: dict, identity_init: bool = False):
        super().__init__()
        self.kind = spec["kind"]
        self.in_channels = spec["in_channels"]
        self.out_channels = spec["out_channels"]
        self.in_spatial = tuple(spec["in_spatial"])
        self.out_spatial = tuple(spec["out_spatial"])
        c_in, c_out = self.in_channels, self.out_channels
        eps = 0.0 if identity_init else 1e-5
        if self.kind == "seq->seq":
            self.norm = nn.LayerNorm(c_in, eps=eps)
            self.proj = nn.Linear(c_in, c_out)
        else:
            self.norm = nn.BatchNorm2d(c_in, eps=eps)
            self.proj = nn.Conv2d(c_in, c_out, kernel_size=1)
        self.act = nn.LeakyReLU(0.01)
        if identity_init:
            self._init_identity()

    def _init_identity(self):
        if self.in_channels != self.out_channels:
            raise ValueError(
                f"identity init needs matching widths, got "
                f"{self.in_channels} -> {self.out_channels}"
            )
        with torch.no_grad():
            if isinstance(self.proj, nn.Linear):
                self.proj.weight.copy_(torch.eye(self.in_channels))
            else:
                self.proj.weight.zero_()
                for c in range(self.in_channels):
                    self.proj.weight[c, c, 0, 0] = 1.0
            self.proj.bias.zero_()
            self.norm.weight.fill_(1.0)
            self.norm.bias.zero_()
            if isinstance(self.norm, nn.BatchNorm2d):
                self.norm.running_mean.zero_()
                self.norm.running_var.fill_(1.0)

    def forward(self, x):
        if self.kind == "cnn->cnn":
            x = self.act(self.proj(self.norm(x)))
            if x.shape[-2:] != self.out_spatial:
                x = F.interpolate(x, size=self.out_spatial, mode="nearest")
            return x
        if self.kind == "cnn->seq":
            x = self.act(self.proj(self.norm(x)))
            x = x.flatten(2).transpose(1, 2)  # (B, H*W, C)
            return _resample_tokens(x, self.out_spatial[0])
        if self.kind == "seq->cnn":
            h, w = self.out_spatial
            x = _resample_tokens(x, h * w)
            x = x.transpose(1, 2).reshape(x.shape[0], self.in_channels, h, w)
            return self.act(self.proj(self.norm(x)))
        if self.kind == "seq->seq":
            x = self.act(self.proj(self.norm(x)))
            return _resample_tokens(x, self.out_spatial[0])
        raise ValueError(f"unknown adapter kind {self.kind!r}")


class StitchedBackbone(nn.Module):
    def __init__(self, blocks: list[BackboneBlock], adapters: list[StitchAdapter]):
        super().__init__()
        assert len(adapters) == len(blocks) - 1
        self.blocks = nn.ModuleList(blocks)
        self.adapters = nn.ModuleList(adapters)

    def forward(self, x):
        out, _ = self.forward_with_nodes(x)
        return out

    def forward_with_nodes(self, x):
        node_outputs = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.adapters[i - 1](x)
            x, outs = block.forward_nodes(x)
            node_outputs.extend(outs)
        return x, node_outputs


def load_plan(plans_path: str | Path, rank: int = 1) -> dict:
    doc = json.loads(Path(plans_path).read_text())
    for plan in doc["plans"]:
        if plan["rank"] == rank:
            return plan
    raise ValueError(f"no plan with rank {rank} in {plans_path}")


def materialize_plan(
    plans_path: str | Path,
    zoo_dir: str | Path,
    rank: int = 1,
    identity_init: bool = False,
) -> StitchedBackbone:
    """Instantiate the rank-th plan against the exported zoo's backbones."""
    plan = load_plan(plans_path, rank)
    meta = json.loads((Path(zoo_dir) / "export-meta.json").read_text())["models"]

    cache: dict[str, nn.Module] = {}
    blocks = []
    for entry in plan["blocks"]:
        mid = entry["model_id"]
        if mid not in cache:
            info = meta[mid]
            cache[mid] = build_model(info["arch"], info["init_seed"], info["weights"])
        first, last = entry["node_range"]
        blocks.append(BackboneBlock(meta[mid]["arch"], cache[mid], first, last))
    adapters = [StitchAdapter(spec, identity_init) for spec in plan["adapters"]]
    net = StitchedBackbone(blocks, adapters)
    net.eval()
    return net


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
