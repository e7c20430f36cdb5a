"""Stage 2: density regression on a frozen FEN, trained by Sinkhorn matching
of per-crop predicted counts against a crowd-count prior."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .augment import crop_random
from .checkpoint import CheckpointArchive
from .density import DensityMap, downsample_density
from .errors import DegenerateBatch, ImageTooSmall, InvalidConfig, NonFiniteLoss, ShapeError, ZeroPrediction
from .fen import FEN, FenConfig, build_fen
from .nn_utils import (
    OptimizerConfig,
    he_uniform_,
    load_module_tensors,
    make_optimizer,
    module_tensors,
    nhwc_to_nchw,
    seeded_generator,
)
from .ot import PriorSpec, SinkhornConfig, sample_prior, sinkhorn, squared_cost
from .stage1 import CROP_SIZE, TrainLog, _as_images, run_block, vgg_block

log = logging.getLogger(__name__)


@dataclass
class DensityHeadConfig:
    widths: tuple[int, ...] = (64, 128)
    # one flag per VGG block plus the final 1x1 layer
    trainable: tuple[bool, ...] = (True, True, True)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.trainable = tuple(bool(t) for t in self.trainable)
        if len(self.widths) != 2:
            raise InvalidConfig(f"density head has 2 VGG blocks, got widths {self.widths}")
        if len(self.trainable) != len(self.widths) + 1:
            raise InvalidConfig("trainable needs one flag per block plus one for the output layer")

    @classmethod
    def from_dict(cls, d: dict) -> "DensityHeadConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown density head keys: {sorted(unknown)}")
        return cls(**d)


class DensityHead(nn.Module):
    """Two unpooled VGG blocks, then a 1x1 conv and ReLU to one channel."""

    def __init__(self, in_channels: int, config: DensityHeadConfig):
        super().__init__()
        c = in_channels
        for b, w in enumerate(config.widths, start=1):
            self.add_module(f"block{b}", vgg_block(c, w))
            c = w
        self.out = nn.Conv2d(c, 1, 1)
        for flag, module in zip(config.trainable, self.children()):
            module.requires_grad_(flag)

    def forward(self, x):
        for name, module in self.named_children():
            if name.startswith("block"):
                x = run_block(module, x, pool=False)
        return F.relu(self.out(x))


class DensityNet(nn.Module):
    def __init__(self, fen: FEN, head: DensityHead):
        super().__init__()
        self.fen = fen
        self.density_head = head
        self.fen.requires_grad_(False)

    def forward(self, x):
        with torch.no_grad():
            feats = self.fen(x)
        return self.density_head(feats)


def build_density_net(fen: FEN, head_config: DensityHeadConfig, seed: int = 0) -> DensityNet:
    head = DensityHead(fen.out_channels, head_config)
    he_uniform_(head, seeded_generator(seed))
    return DensityNet(fen, head)


def load_fen(archive: CheckpointArchive, fen_config: FenConfig) -> FEN:
    fen = build_fen(fen_config, 0)
    load_module_tensors(fen, archive, "fen")
    return fen


def matching_loss(pred_sums: torch.Tensor, spec: PriorSpec, rng: np.random.Generator | None = None,
                  sinkhorn_cfg: SinkhornConfig | None = None, prior_support=None):
    """Sinkhorn distance between sorted predicted crop counts and prior draws.

    The converged plan is held constant, so the gradient with respect to
    prediction ``i`` is ``sum_j P[i, j] * 2 * (x_i - y_j)``. Returns
    ``(loss, SinkhornResult)``.
    """
    cfg = sinkhorn_cfg or SinkhornConfig()
    if pred_sums.ndim != 1 or pred_sums.shape[0] < 2:
        raise DegenerateBatch(f"need at least 2 predictions, got shape {tuple(pred_sums.shape)}")
    n = pred_sums.shape[0]
    x, _ = torch.sort(pred_sums)
    if prior_support is None:
        prior_support = sample_prior(spec, n, rng)
    y = np.sort(np.asarray(prior_support, dtype=np.float64))
    if y.shape != (n,):
        raise DegenerateBatch(f"prior support has shape {y.shape}, expected ({n},)")
    w = np.full(n, 1.0 / n)
    x_np = x.detach().cpu().double().numpy()
    result = sinkhorn(w, w, squared_cost(x_np, y), cfg.eps, cfg.max_iter, cfg.tol)
    plan = torch.as_tensor(result.plan, dtype=pred_sums.dtype)
    y_t = torch.as_tensor(y, dtype=pred_sums.dtype)
    loss = (plan * (x[:, None] - y_t[None, :]) ** 2).sum()
    return loss, result


def crop_sums(model: DensityNet, crops) -> torch.Tensor:
    x = nhwc_to_nchw(torch.as_tensor(np.asarray(crops, dtype=np.float32)))
    return model(x.to(next(model.density_head.parameters()).dtype)).sum(dim=(1, 2, 3))


def stage2_step(model: DensityNet, opt: torch.optim.Optimizer, crops, spec: PriorSpec,
                sinkhorn_cfg: SinkhornConfig, rng=None, prior_support=None):
    sums = crop_sums(model, crops)
    loss, result = matching_loss(sums, spec, rng, sinkhorn_cfg, prior_support)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"stage 2 matching loss became {loss.item()}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.item()), result


def stage2_archive(model: DensityNet, metadata: dict) -> CheckpointArchive:
    items = module_tensors(model.fen, "fen") + module_tensors(model.density_head, "density_head")
    return CheckpointArchive.from_items(items, {k: str(v) for k, v in metadata.items()})


def load_density_net(archive: CheckpointArchive, fen_config: FenConfig, head_config: DensityHeadConfig) -> DensityNet:
    model = build_density_net(load_fen(archive, fen_config), head_config, 0)
    load_module_tensors(model.density_head, archive, "density_head")
    return model


def train_stage2(
    stage1: CheckpointArchive,
    data,
    fen_config: FenConfig | None = None,
    head_config: DensityHeadConfig | None = None,
    prior: PriorSpec | None = None,
    sinkhorn_cfg: SinkhornConfig | None = None,
    optim: OptimizerConfig | None = None,
    seed: int = 0,
    steps: int = 100,
    crop_size: int = CROP_SIZE,
):
    """Fit the density head on unlabeled crops; returns ``(archive, log, model)``.

    The rotation head in ``stage1`` is ignored and the FEN stays frozen.
    """
    fen_config = fen_config or FenConfig()
    head_config = head_config or DensityHeadConfig()
    prior = prior or PriorSpec()
    sinkhorn_cfg = sinkhorn_cfg or SinkhornConfig()
    optim = optim or OptimizerConfig()
    init_seed, data_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    images = _as_images(data, fen_config.input_channels)
    model = build_density_net(load_fen(stage1, fen_config), head_config, init_seed)
    rng = np.random.default_rng(data_seed)
    opt = make_optimizer(model.density_head.parameters(), optim)
    trace = TrainLog(("step", "loss"))
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(images), size=optim.batch_size)
        crops = np.stack([crop_random(images[i], crop_size, rng) for i in idx])
        loss, result = stage2_step(model, opt, crops, prior, sinkhorn_cfg, rng)
        if not result.converged:
            log.debug("step %d: sinkhorn marginal error %.2e", step, result.marginal_error)
        trace.append(step, loss)
    archive = stage2_archive(model, {"seed": seed, "stage": "density", "steps": steps})
    return archive, trace, model


@torch.no_grad()
def raw_density(model: DensityNet, image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ShapeError(f"expected H x W x C image, got {image.shape}")
    stride = model.fen.stride
    if image.shape[0] % stride or image.shape[1] % stride:
        raise ShapeError(f"image dims {image.shape[:2]} must be divisible by {stride}")
    model.eval()
    out = model(nhwc_to_nchw(torch.from_numpy(image[None])))
    return out[0, 0].double().numpy()


def predict_count(model: DensityNet, image, scale: float = 1.0) -> tuple[DensityMap, float]:
    dmap = DensityMap(scale * raw_density(model, image))
    return dmap, float(dmap.values.sum())


def scale_from_reference(true_count: float, raw_sum: float) -> float:
    if not raw_sum > 0:
        raise ZeroPrediction(f"reference prediction sums to {raw_sum}")
    if not true_count > 0:
        raise ZeroPrediction(f"reference count must be > 0, got {true_count}")
    return float(true_count) / float(raw_sum)


def scale_from_prior(spec: PriorSpec, raw_crop_sums) -> float:
    mean = float(np.mean(np.asarray(raw_crop_sums, dtype=np.float64)))
    if not mean > 0:
        raise ZeroPrediction("calibration crops predict zero mass")
    return spec.mean() / mean


def calibrate_scale(model: DensityNet, reference=None, prior: PriorSpec | None = None,
                    images=None, n_crops: int = 64, seed: int = 0, crop_size: int = CROP_SIZE) -> float:
    """Count scale from ``reference=(image, true_count)``, or else from the prior
    mean over a pass of random crops drawn from ``images``."""
    if reference is not None:
        image, true_count = reference
        return scale_from_reference(true_count, float(raw_density(model, image).sum()))
    if prior is None or images is None:
        raise InvalidConfig("calibration needs a labeled reference or a prior with images")
    rng = np.random.default_rng(seed)
    sums = []
    with torch.no_grad():
        model.eval()
        for _ in range(n_crops):
            crop = crop_random(images[int(rng.integers(0, len(images)))], crop_size, rng)
            sums.append(float(crop_sums(model, crop[None]).sum()))
    return scale_from_prior(prior, sums)


def train_supervised(model: DensityNet, images, density_maps, optim: OptimizerConfig | None = None,
                     steps: int = 100, seed: int = 0, crop_size: int = CROP_SIZE) -> TrainLog:
    """Pixel-wise MSE between predicted maps and sum-pooled ground truth on
    aligned random crops. ``density_maps`` are full-resolution H x W grids."""
    optim = optim or OptimizerConfig()
    rng = np.random.default_rng(seed)
    stride = model.fen.stride
    opt = make_optimizer(model.density_head.parameters(), optim)
    trace = TrainLog(("step", "loss"))
    for step in range(1, steps + 1):
        xs, ys = [], []
        for i in rng.integers(0, len(images), size=optim.batch_size):
            h, w = images[i].shape[:2]
            if h < crop_size or w < crop_size:
                raise ImageTooSmall(f"{h}x{w} image cannot give a {crop_size}x{crop_size} crop")
            top = int(rng.integers(0, h - crop_size + 1))
            left = int(rng.integers(0, w - crop_size + 1))
            xs.append(images[i][top:top + crop_size, left:left + crop_size])
            gt = DensityMap(density_maps[i][top:top + crop_size, left:left + crop_size])
            ys.append(downsample_density(gt, stride).values)
        x = nhwc_to_nchw(torch.as_tensor(np.stack(xs), dtype=torch.float32))
        y = torch.as_tensor(np.stack(ys), dtype=torch.float32)[:, None]
        loss = F.mse_loss(model(x), y)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"supervised loss became {loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(step, float(loss.item()))
    return trace
