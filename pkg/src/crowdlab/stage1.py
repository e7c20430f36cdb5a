"""Stage 1: self-supervised rotation classification on 112x112 crops.

Rotation labels are generated from the crops themselves; point annotations
are never read here.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .augment import crop_random, make_rotation_example, rotate90
from .checkpoint import CheckpointArchive
from .errors import InvalidConfig, NonFiniteLoss, ShapeError
from .fen import FEN, FenConfig, build_fen
from .manifest import DatasetManifest, load_image
from .nn_utils import (
    OptimizerConfig,
    he_uniform_,
    load_module_tensors,
    make_optimizer,
    module_tensors,
    nhwc_to_nchw,
    seeded_generator,
)

log = logging.getLogger(__name__)

CROP_SIZE = 112


def vgg_block(c_in: int, width: int, n_conv: int = 2) -> nn.Module:
    block = nn.Module()
    for i in range(1, n_conv + 1):
        block.add_module(f"conv{i}", nn.Conv2d(c_in if i == 1 else width, width, 3, padding=1))
    return block


def run_block(block: nn.Module, x, pool: bool = True):
    for conv in block.children():
        x = F.relu(conv(x))
    return F.max_pool2d(x, 2) if pool else x


@dataclass
class RotationHeadConfig:
    widths: tuple[int, ...] = (64, 128)
    num_classes: int = 4

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.num_classes != 4:
            raise InvalidConfig("the rotation head predicts exactly 4 classes")
        if len(self.widths) != 2:
            raise InvalidConfig(f"rotation head has 2 VGG blocks, got widths {self.widths}")


class RotationHead(nn.Module):
    def __init__(self, in_channels: int, config: RotationHeadConfig):
        super().__init__()
        c = in_channels
        for b, w in enumerate(config.widths, start=1):
            self.add_module(f"block{b}", vgg_block(c, w))
            c = w
        self.fc = nn.Linear(c, config.num_classes)

    def forward(self, x):
        for name, module in self.named_children():
            if name.startswith("block"):
                x = run_block(module, x)
        return self.fc(x.mean(dim=(2, 3)))


class RotationNet(nn.Module):
    def __init__(self, fen: FEN, head: RotationHead):
        super().__init__()
        self.fen = fen
        self.rot_head = head

    def forward(self, x):
        return self.rot_head(self.fen(x))


def build_rotation_net(fen_config: FenConfig, head_config: RotationHeadConfig, seed: int = 0) -> RotationNet:
    fen = build_fen(fen_config, seed)
    head = RotationHead(fen.out_channels, head_config)
    he_uniform_(head, seeded_generator(int(seed) + 1))
    return RotationNet(fen, head)


def stage1_forward(model: RotationNet, crops) -> torch.Tensor:
    """B x 112 x 112 x C crops (channels last) -> B x 4 logits."""
    x = torch.as_tensor(np.asarray(crops)) if not isinstance(crops, torch.Tensor) else crops
    if x.ndim != 4 or x.shape[1] != CROP_SIZE or x.shape[2] != CROP_SIZE:
        raise ShapeError(f"expected B x {CROP_SIZE} x {CROP_SIZE} x C, got {tuple(x.shape)}")
    x = x.to(next(model.parameters()).dtype)
    return model(nhwc_to_nchw(x))


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-softmax of the true class, max-subtracted."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ShapeError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_z = torch.log(torch.exp(shifted).sum(dim=1))
    picked = shifted.gather(1, labels[:, None])[:, 0]
    return (log_z - picked).mean()


@dataclass
class TrainLog:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def append(self, *values) -> None:
        self.rows.append(tuple(values))

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            rows = [tuple(int(v) if i == 0 else float(v) for i, v in enumerate(r)) for r in reader]
        return cls(header, rows)


def _as_images(data, channels: int) -> list[np.ndarray]:
    if isinstance(data, DatasetManifest):
        return [load_image(data.resolve(r), channels) for r in data.records]
    return [np.asarray(im, dtype=np.float32) for im in data]


def rotation_batch(images, batch_size: int, rng: np.random.Generator, crop_size: int = CROP_SIZE):
    idx = rng.integers(0, len(images), size=batch_size)
    crops, labels = [], []
    for i in idx:
        img, label = make_rotation_example(crop_random(images[i], crop_size, rng), rng)
        crops.append(img)
        labels.append(label)
    return np.stack(crops).astype(np.float32), np.array(labels, dtype=np.int64)


def stage1_archive(model: RotationNet, metadata: dict) -> CheckpointArchive:
    items = module_tensors(model.fen, "fen") + module_tensors(model.rot_head, "rot_head")
    return CheckpointArchive.from_items(items, {k: str(v) for k, v in metadata.items()})


def load_rotation_net(archive: CheckpointArchive, fen_config: FenConfig, head_config: RotationHeadConfig) -> RotationNet:
    model = build_rotation_net(fen_config, head_config, 0)
    load_module_tensors(model.fen, archive, "fen")
    load_module_tensors(model.rot_head, archive, "rot_head")
    return model


def train_stage1(
    data,
    fen_config: FenConfig | None = None,
    head_config: RotationHeadConfig | None = None,
    optim: OptimizerConfig | None = None,
    seed: int = 0,
    steps: int = 100,
    crop_size: int = CROP_SIZE,
    model: RotationNet | None = None,
):
    """Train FEN + rotation head; returns ``(checkpoint, log, model)``.

    ``data`` is a manifest or a list of H x W x C float images in [0, 1].
    """
    fen_config = fen_config or FenConfig()
    head_config = head_config or RotationHeadConfig()
    optim = optim or OptimizerConfig()
    init_seed, data_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    images = _as_images(data, fen_config.input_channels)
    if model is None:
        model = build_rotation_net(fen_config, head_config, init_seed)
    rng = np.random.default_rng(data_seed)
    opt = make_optimizer(model.parameters(), optim)
    trace = TrainLog(("step", "loss", "rot_acc"))
    model.train()
    for step in range(1, steps + 1):
        crops, labels = rotation_batch(images, optim.batch_size, rng, crop_size)
        logits = model(nhwc_to_nchw(torch.from_numpy(crops)))
        loss = cross_entropy(logits, labels)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"stage 1 loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        acc = float((logits.argmax(1).numpy() == labels).mean())
        trace.append(step, float(loss.item()), acc)
        if step % 50 == 0:
            log.info("stage1 step %d loss %.4f acc %.3f", step, loss.item(), acc)
    archive = stage1_archive(model, {"seed": seed, "stage": "rotation", "steps": steps})
    return archive, trace, model


@torch.no_grad()
def predict_rotations(model: RotationNet, crops, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(crops), batch_size):
        x = nhwc_to_nchw(torch.as_tensor(np.asarray(crops[i:i + batch_size], dtype=np.float32)))
        out.append(model(x.to(next(model.parameters()).dtype)).argmax(1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def rotation_eval_set(images, n: int, rng: np.random.Generator, crop_size: int = CROP_SIZE):
    """``n`` crops with labels balanced over the four rotations."""
    crops, labels = [], []
    for i in range(n):
        crop = crop_random(images[i % len(images)], crop_size, rng)
        label = i % 4
        crops.append(rotate90(crop, label))
        labels.append(label)
    return np.stack(crops).astype(np.float32), np.array(labels)
