"""Clip decoding, fixed-length frame extraction and dataset assembly.

Decoders are looked up by container suffix. Two are built in: a directory
of ``frame_%05d.png`` files with a ``meta.json`` holding ``{"fps": ...}``
(the hermetic reference format), and OpenCV for ``.avi`` files.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch.nn import functional as F

from .checkpoint import CheckpointArchive, read_checkpoint, write_checkpoint
from .errors import DecodeFailure, EmptyClip, EmptyDataset, MissingDirectory, MissingFps

log = logging.getLogger(__name__)

TARGET_FPS = 25.0
FRAME_SIZE = 128
DEFAULT_MAX_FRAMES = 20


@dataclass
class DecodedClip:
    frames: list  # H x W x 3 float arrays in [0, 1]
    fps: float | None


@dataclass
class FrameSequence:
    frames: np.ndarray  # T x S x S x 3 float32
    valid: np.ndarray  # T bools, real frames first
    label: int | None = None
    source: str = ""

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


@dataclass
class ClipDatasetArrays:
    X: np.ndarray  # N x T x S x S x 3
    Y: np.ndarray  # N labels
    mask: np.ndarray  # N x T
    sources: list[str] = field(default_factory=list)
    permutation: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.Y)


def decode_frame_dir(path: Path) -> DecodedClip:
    from PIL import Image

    meta_path = path / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DecodeFailure(f"{path}: unreadable meta.json ({exc})") from exc
    frames = []
    for f in sorted(path.glob("frame_*.png")):
        with Image.open(f) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    return DecodedClip(frames, meta.get("fps"))


def decode_opencv(path: Path) -> DecodedClip:
    try:
        import cv2
    except ImportError as exc:  # pragma: no cover - opencv is optional
        raise DecodeFailure(f"{path}: no video decoder available") from exc
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DecodeFailure(f"{path}: cannot open video")
    fps = cap.get(cv2.CAP_PROP_FPS) or None
    frames = []
    while True:
        ok, bgr = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0)
    cap.release()
    if not frames:
        raise DecodeFailure(f"{path}: no frames decoded")
    return DecodedClip(frames, fps)


DECODERS: dict[str, Callable[[Path], DecodedClip]] = {".avi": decode_opencv}


def register_decoder(suffix: str, fn: Callable[[Path], DecodedClip]) -> None:
    DECODERS[suffix.lower()] = fn


def decoder_for(path: Path):
    if path.is_dir():
        return decode_frame_dir if (path / "meta.json").is_file() else None
    return DECODERS.get(path.suffix.lower())


def resize_frame(frame: np.ndarray, size: int = FRAME_SIZE) -> np.ndarray:
    """Bilinear resize of an H x W x C frame to size x size."""
    if frame.shape[0] == size and frame.shape[1] == size:
        return np.asarray(frame, dtype=np.float32)
    t = torch.from_numpy(np.ascontiguousarray(frame, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def resample_indices(n_frames: int, fps: float, target_fps: float = TARGET_FPS) -> np.ndarray:
    """Nearest source frame for every tick of a ``target_fps`` timeline."""
    n_out = max(1, int(round(n_frames * target_fps / fps)))
    ticks = np.arange(n_out) * (fps / target_fps)
    return np.minimum(np.floor(ticks + 0.5).astype(int), n_frames - 1)


def extract_frames(clip: DecodedClip, max_frames: int = DEFAULT_MAX_FRAMES,
                   target_size: int = FRAME_SIZE) -> FrameSequence:
    if not clip.frames:
        raise EmptyClip("clip has no frames")
    if not clip.fps or clip.fps <= 0:
        raise MissingFps("clip has no usable fps metadata")
    timeline = resample_indices(len(clip.frames), float(clip.fps))
    if len(timeline) > max_frames:
        picks = (np.arange(max_frames) * len(timeline)) // max_frames
        timeline = timeline[picks]
    out = np.zeros((max_frames, target_size, target_size, 3), dtype=np.float32)
    valid = np.zeros(max_frames, dtype=bool)
    for i, src in enumerate(timeline):
        frame = np.asarray(clip.frames[src], dtype=np.float32)
        if frame.ndim == 2:
            frame = np.repeat(frame[:, :, None], 3, axis=2)
        out[i] = resize_frame(frame, target_size)
        valid[i] = True
    return FrameSequence(out, valid)


def list_clips(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingDirectory(f"clip directory not found: {directory}")
    return [p for p in sorted(directory.iterdir(), key=lambda p: p.name) if decoder_for(p) is not None]


def process_videos(directory, label: int, max_frames: int = DEFAULT_MAX_FRAMES,
                   failures: list | None = None, target_size: int = FRAME_SIZE):
    """Decode every supported clip in lexicographic order.

    Clips that fail to decode are skipped; their paths and reasons are appended
    to ``failures`` when given.
    """
    data, labels = [], []
    for path in list_clips(directory):
        try:
            seq = extract_frames(decoder_for(path)(path), max_frames, target_size)
        except (DecodeFailure, EmptyClip, MissingFps) as exc:
            log.warning("skipping %s: %s", path, exc)
            if failures is not None:
                failures.append((str(path), str(exc)))
            continue
        seq.label = int(label)
        seq.source = str(path)
        data.append(seq)
        labels.append(int(label))
    return data, labels


def assemble_and_shuffle(violent: list, nonviolent: list, seed: int) -> ClipDatasetArrays:
    """Violent clips first, then non-violent, then one joint permutation."""
    seqs = list(violent) + list(nonviolent)
    if not seqs:
        raise EmptyDataset("no clips to assemble")
    labels = [1] * len(violent) + [0] * len(nonviolent)
    X = np.stack([s.frames for s in seqs])
    mask = np.stack([s.valid for s in seqs])
    Y = np.array(labels, dtype=np.int64)
    perm = np.random.default_rng(seed).permutation(len(Y))
    sources = [seqs[i].source for i in perm]
    return ClipDatasetArrays(X[perm], Y[perm], mask[perm], sources, perm)


def save_clip_cache(dataset: ClipDatasetArrays, archive_path, labels_csv) -> None:
    archive = CheckpointArchive(metadata={"clips": str(len(dataset))})
    rows = []
    for i in range(len(dataset)):
        cid = f"{i:05d}"
        archive.add(f"clips/{cid}/frames", dataset.X[i])
        archive.add(f"clips/{cid}/mask", dataset.mask[i].astype(np.float32))
        rows.append((cid, int(dataset.Y[i]), dataset.sources[i] if dataset.sources else ""))
    write_checkpoint(archive, archive_path)
    with open(labels_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "label", "source"))
        w.writerows(rows)


def load_clip_cache(archive_path, labels_csv) -> ClipDatasetArrays:
    archive = read_checkpoint(archive_path)
    with open(labels_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    X = np.stack([archive[f"clips/{r['id']}/frames"] for r in rows])
    mask = np.stack([archive[f"clips/{r['id']}/mask"] > 0.5 for r in rows])
    Y = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    return ClipDatasetArrays(X, Y, mask, [r["source"] for r in rows])
