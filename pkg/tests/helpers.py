"""Synthetic corpora shared by the unit, CLI and acceptance tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from crowdlab.anomaly import AnomalyModelSpec
from crowdlab.fen import FenConfig
from crowdlab.stage1 import RotationHeadConfig
from crowdlab.video import ClipDatasetArrays

TINY_FEN = FenConfig.uniform((4, 8, 4, 2), input_channels=1)
TINY_ROT_HEAD = RotationHeadConfig((8, 16))


def grad_image(theta: float, size: int = 128, channels: int = 1) -> np.ndarray:
    """Linear ramp whose gradient points along ``theta``; its orientation
    reveals any right-angle rotation."""
    yy, xx = np.mgrid[:size, :size].astype(np.float32) / size - 0.5
    img = 0.5 + 0.8 * (np.cos(theta) * xx + np.sin(theta) * yy)
    return np.repeat(np.clip(img, 0, 1)[:, :, None], channels, 2).astype(np.float32)


def oriented_train_set():
    return [grad_image(t) for t in np.deg2rad([-30, -10, 10, 30])]


def oriented_test_set():
    return [grad_image(t) for t in np.deg2rad([-25, -5, 5, 25, 0])]


def flashing_corpus(n_frames: int = 6, size: int = 128) -> ClipDatasetArrays:
    """4 clips whose blob flickers bright/dark, 4 whose blob is static."""
    X, Y = [], []
    yy, xx = np.mgrid[:size, :size]
    for k in range(8):
        violent = k < 4
        blob = (((yy - 40 - 10 * k) ** 2 + (xx - 30 - 8 * k) ** 2) < 15 ** 2).astype(np.float32)
        frames = []
        for t in range(n_frames):
            level = (0.9 if t % 2 == 0 else 0.1) if violent else 0.5
            frames.append(np.repeat((blob * level)[:, :, None], 3, 2))
        X.append(np.stack(frames))
        Y.append(int(violent))
    return ClipDatasetArrays(np.stack(X), np.array(Y, dtype=np.int64), np.ones((8, n_frames), bool))


def tiny_anomaly_spec(**kw) -> AnomalyModelSpec:
    return AnomalyModelSpec.tiny(**kw)


def save_png(array: np.ndarray, path: Path) -> None:
    data = np.clip(np.round(np.asarray(array) * 255), 0, 255).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(path)


def write_counting_fixture(root: Path, n_images: int = 3, size: int = 128, seed: int = 0) -> Path:
    """Grayscale images with bright dots at annotated heads, plus a manifest."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_images):
        n = int(rng.integers(3, 15))
        pts = rng.uniform(0, size - 1, size=(n, 2))
        img = np.full((size, size), 0.2, dtype=np.float32)
        for x, y in pts:
            img[int(y), int(x)] = 1.0
        save_png(img, root / f"img_{i:02d}.png")
        records.append({"image": f"img_{i:02d}.png", "width": size, "height": size,
                        "points": [[float(x), float(y)] for x, y in pts]})
    path = root / "manifest.json"
    path.write_text(json.dumps({"name": "synthetic", "split": "train", "records": records}, indent=2))
    return path


def write_clip_dir(path: Path, frames, fps: float = 25.0) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        save_png(frame, path / f"frame_{t:05d}.png")
    (path / "meta.json").write_text(json.dumps({"fps": fps}))
    return path


def write_clip_corpus(root: Path, n_frames: int = 6, size: int = 32) -> tuple[Path, Path]:
    """Flashing clips under ``violent/``, static ones under ``nonviolent/``."""
    data = flashing_corpus(n_frames, size)
    for i, (clip, label) in enumerate(zip(data.X, data.Y)):
        sub = "violent" if label == 1 else "nonviolent"
        write_clip_dir(root / sub / f"clip_{i:02d}", clip)
    return root / "violent", root / "nonviolent"


def fixed_batch_losses(model, crops, spec, prior_support, cfg, steps: int = 50, frac: float = 0.05):
    """Matching losses over ``steps`` plain-SGD steps on one batch.

    The step size is set once to ``frac * L0 / |g0|^2``, a fixed fraction of
    the first-order prediction of the initial loss, so "small" does not
    depend on the feature scale of the FEN.
    """
    import torch

    from crowdlab.nn_utils import OptimizerConfig, make_optimizer
    from crowdlab.stage2 import crop_sums, matching_loss, stage2_step

    params = [p for p in model.density_head.parameters() if p.requires_grad]
    loss, _ = matching_loss(crop_sums(model, crops), spec, sinkhorn_cfg=cfg, prior_support=prior_support)
    grads = torch.autograd.grad(loss, params)
    lr = frac * loss.item() / sum(float(g.square().sum()) for g in grads)
    opt = make_optimizer(params, OptimizerConfig("sgd", lr))
    out = []
    for _ in range(steps):
        value, result = stage2_step(model, opt, crops, spec, cfg, prior_support=prior_support)
        out.append((value, result.converged))
    return out
