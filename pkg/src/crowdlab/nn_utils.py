"""Glue between torch modules, the archive format, and optimizers."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import CheckpointArchive
from .errors import InvalidConfig, ShapeMismatch


def module_tensors(module: nn.Module, prefix: str) -> list[tuple[str, np.ndarray]]:
    """Parameters and float buffers as ``prefix/a/b/weight`` archive entries."""
    out = []
    for key, tensor in module.state_dict().items():
        if not tensor.is_floating_point():
            continue  # BatchNorm step counters
        name = f"{prefix}/{key.replace('.', '/')}" if prefix else key.replace(".", "/")
        out.append((name, tensor.detach().cpu().numpy().astype(np.float32)))
    return out


def load_module_tensors(module: nn.Module, archive: CheckpointArchive, prefix: str) -> None:
    state = module.state_dict()
    updates = {}
    for key, tensor in state.items():
        if not tensor.is_floating_point():
            continue
        name = f"{prefix}/{key.replace('.', '/')}" if prefix else key.replace(".", "/")
        if name not in archive:
            raise ShapeMismatch(f"archive lacks tensor {name!r}")
        value = archive[name]
        if tuple(value.shape) != tuple(tensor.shape):
            raise ShapeMismatch(f"{name}: archive shape {value.shape} != model shape {tuple(tensor.shape)}")
        updates[key] = torch.from_numpy(np.array(value)).to(tensor.dtype)
    module.load_state_dict(updates, strict=False)


def tensor_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63))
    return g


def he_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """He-uniform weights and zero biases for every conv / linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)


def make_optimizer(params, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if cfg.name == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    if cfg.name == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr)
    raise InvalidConfig(f"unknown optimizer {cfg.name!r}")


def nhwc_to_nchw(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t.permute(0, 3, 1, 2).contiguous()


def nchw_to_nhwc(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1).contiguous()
