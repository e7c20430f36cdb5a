"""Five-column multi-scale feature extraction network (FEN).

Each column is four same-padded convolutions with one kernel size; 2x2 max
pooling follows the layers listed in ``pool_after``. Column outputs are
concatenated along channels in column order, smallest kernel first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidConfig, ShapeError
from .nn_utils import he_uniform_, nchw_to_nhwc, nhwc_to_nchw, seeded_generator

DEFAULT_KERNELS = (3, 5, 7, 9, 11)


@dataclass
class ColumnSpec:
    kernel_size: int
    channels: tuple[int, ...] = (16, 32, 16, 8)
    pool_after: tuple[int, ...] = (1, 2)  # 1-based layer indices

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.pool_after = tuple(sorted(int(i) for i in self.pool_after))
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise InvalidConfig(f"a column needs 4 positive conv widths, got {self.channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidConfig(f"kernel size must be odd, got {self.kernel_size}")
        if not set(self.pool_after) <= {1, 2, 3, 4}:
            raise InvalidConfig(f"pool_after must be a subset of {{1,2,3,4}}, got {self.pool_after}")


@dataclass
class FenConfig:
    columns: list[ColumnSpec] = field(
        default_factory=lambda: [ColumnSpec(k) for k in DEFAULT_KERNELS]
    )
    input_channels: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.columns) != 5:
            raise InvalidConfig(f"FEN needs exactly 5 columns, got {len(self.columns)}")
        if self.input_channels not in (1, 3):
            raise InvalidConfig(f"input_channels must be 1 or 3, got {self.input_channels}")
        pools = {c.pool_after for c in self.columns}
        if len(pools) != 1:
            raise InvalidConfig("all columns must share the same pool_after set")

    @classmethod
    def uniform(cls, channels=(16, 32, 16, 8), input_channels=3, pool_after=(1, 2)):
        return cls([ColumnSpec(k, channels, pool_after) for k in DEFAULT_KERNELS], input_channels)

    @property
    def stride(self) -> int:
        return 2 ** len(self.columns[0].pool_after)

    @property
    def out_channels(self) -> int:
        return sum(c.channels[-1] for c in self.columns)

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "columns": [
                {"kernel_size": c.kernel_size, "channels": list(c.channels), "pool_after": list(c.pool_after)}
                for c in self.columns
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FenConfig":
        unknown = set(d) - {"input_channels", "columns", "channels"}
        if unknown:
            raise InvalidConfig(f"unknown fen keys: {sorted(unknown)}")
        if "columns" in d:
            cols = [ColumnSpec(**c) for c in d["columns"]]
            return cls(cols, d.get("input_channels", 3))
        return cls.uniform(tuple(d.get("channels", (16, 32, 16, 8))), d.get("input_channels", 3))


class Column(nn.Module):
    def __init__(self, spec: ColumnSpec, in_channels: int):
        super().__init__()
        self.pool_after = spec.pool_after
        c_in = in_channels
        for i, c_out in enumerate(spec.channels, start=1):
            self.add_module(f"conv{i}", nn.Conv2d(c_in, c_out, spec.kernel_size, padding=spec.kernel_size // 2))
            c_in = c_out

    def forward(self, x):
        for i, conv in enumerate(self.children(), start=1):
            x = F.relu(conv(x))
            if i in self.pool_after:
                x = F.max_pool2d(x, 2)
        return x


class FEN(nn.Module):
    def __init__(self, config: FenConfig):
        super().__init__()
        config.validate()
        self.config = config
        for i, spec in enumerate(config.columns, start=1):
            self.add_module(f"col{i}", Column(spec, config.input_channels))

    @property
    def stride(self) -> int:
        return self.config.stride

    @property
    def out_channels(self) -> int:
        return self.config.out_channels

    def forward(self, x):
        """NCHW in, NCHW out at 1/stride resolution."""
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected N x {self.config.input_channels} x H x W, got {tuple(x.shape)}")
        if x.shape[2] % self.stride or x.shape[3] % self.stride:
            raise ShapeError(f"H and W must be divisible by {self.stride}, got {tuple(x.shape[2:])}")
        return torch.cat([col(x) for col in self.children()], dim=1)


def build_fen(config: FenConfig, seed: int = 0) -> FEN:
    model = FEN(config)
    he_uniform_(model, seeded_generator(seed))
    return model


def fen_forward(model: FEN, batch) -> torch.Tensor:
    """Channels-last convenience wrapper: B x H x W x C -> B x H/4 x W/4 x K."""
    x = torch.as_tensor(np.asarray(batch)) if not isinstance(batch, torch.Tensor) else batch
    if x.ndim != 4:
        raise ShapeError(f"expected B x H x W x C, got {tuple(x.shape)}")
    x = x.to(next(model.parameters()).dtype)
    return nchw_to_nhwc(model(nhwc_to_nchw(x)))


def column_channel_slices(config: FenConfig) -> list[slice]:
    out, start = [], 0
    for c in config.columns:
        out.append(slice(start, start + c.channels[-1]))
        start += c.channels[-1]
    return out
