"""Per-architecture node tables.

Every supported backbone is described as an ordered list of atomic-node
module paths forming a path graph. Stem parameters (everything upstream
of the first node's output that is not a node itself) are folded into
node 1; classifier-side parameters are excluded. Each node must yield a
capturable output tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn
import torchvision.models as tvm


@dataclass(frozen=True)
class ArchSpec:
    arch: str
    input_size: int
    node_paths: tuple[str, ...]
    stem_paths: tuple[str, ...]
    head_paths: tuple[str, ...]
    build: Callable[[], nn.Module]


class TinyCnn(nn.Module):
    """Four 1x1-conv+ReLU blocks on a small spatial grid; test-scale stand-in."""

    def __init__(self, channels: int = 4, depth: int = 4):
        super().__init__()
        blocks = []
        c_in = 3
        for _ in range(depth):
            blocks.append(
                nn.Sequential(nn.Conv2d(c_in, channels, kernel_size=1), nn.ReLU())
            )
            c_in = channels
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


def _resnet_paths(layers_per_stage: tuple[int, ...]) -> tuple[str, ...]:
    return tuple(
        f"layer{stage}.{idx}"
        for stage, count in enumerate(layers_per_stage, start=1)
        for idx in range(count)
    )


_RESNET_STAGES = {"resnet18": (2, 2, 2, 2), "resnet34": (3, 4, 6, 3), "resnet50": (3, 4, 6, 3)}

_VIT_LAYERS = {"vit_b_16": 12, "vit_b_32": 12}

ARCHS: dict[str, ArchSpec] = {}

for _name, _stages in _RESNET_STAGES.items():
    ARCHS[_name] = ArchSpec(
        arch=_name,
        input_size=224,
        node_paths=_resnet_paths(_stages),
        stem_paths=("conv1", "bn1"),
        head_paths=("fc",),
        build=getattr(tvm, _name),
    )

for _name, _depth in _VIT_LAYERS.items():
    ARCHS[_name] = ArchSpec(
        arch=_name,
        input_size=224,
        node_paths=tuple(f"encoder.layers.encoder_layer_{i}" for i in range(_depth)),
        stem_paths=("conv_proj", "class_token", "encoder.pos_embedding"),
        head_paths=("encoder.ln", "heads"),
        build=getattr(tvm, _name),
    )

ARCHS["tinycnn"] = ArchSpec(
    arch="tinycnn",
    input_size=6,
    node_paths=tuple(f"blocks.{i}" for i in range(4)),
    stem_paths=(),
    head_paths=(),
    build=TinyCnn,
)


def arch_spec(arch: str) -> ArchSpec:
    try:
        return ARCHS[arch]
    except KeyError:
        raise ValueError(f"unsupported architecture {arch!r}; known: {sorted(ARCHS)}")


def build_model(arch: str, init_seed: int, weights: str | None = None) -> nn.Module:
    """Construct a backbone reproducibly.

    With `weights=None` the random initialization is pinned by `init_seed`,
    so export and materialization reconstruct identical parameters. A
    torchvision weights enum name (e.g. "IMAGENET1K_V1") is honored when
    the environment can fetch it.
    """
    spec = arch_spec(arch)
    torch.manual_seed(init_seed)
    if weights is None or spec.build is TinyCnn:
        model = spec.build()
    else:
        enum = tvm.get_model_weights(arch)[weights]
        model = spec.build(weights=enum)
    model.eval()
    return model


def submodule(model: nn.Module, path: str) -> nn.Module:
    return model.get_submodule(path)


def assign_parameters(model: nn.Module, spec: ArchSpec) -> list[int]:
    """Parameter count per node: prefix match, stem into node 1, heads dropped.

    Raises if any parameter matches no rule (a node table gap).
    """
    counts = [0] * len(spec.node_paths)
    for name, param in model.named_parameters():
        target = None
        for i, path in enumerate(spec.node_paths):
            if name == path or name.startswith(path + "."):
                target = i
                break
        if target is None:
            if any(name == p or name.startswith(p + ".") for p in spec.stem_paths):
                target = 0
            elif any(name == p or name.startswith(p + ".") for p in spec.head_paths):
                continue
            else:
                raise ValueError(
                    f"{spec.arch}: parameter {name!r} not covered by the node table"
                )
        counts[target] += param.numel()
    return counts
