"""Seeded augmentation: crops and right-angle rotations for the counting
pretext task, flip/zoom/brightness/rotation for video frames.

Every function takes an explicit ``numpy.random.Generator`` and draws a fixed
number of variates per call, so a seed fully determines the stream.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import BadPixelRange, ImageTooSmall, InvalidConfig, NonSquareCrop

NUM_ROTATIONS = 4


def crop_random(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ImageTooSmall(f"{h}x{w} image cannot give a {size}x{size} crop")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top:top + size, left:left + size].copy()


def rotate90(image: np.ndarray, k: int) -> np.ndarray:
    """Lossless counter-clockwise rotation by ``k * 90`` degrees."""
    return np.ascontiguousarray(np.rot90(image, k % NUM_ROTATIONS, axes=(0, 1)))


def make_rotation_example(crop: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    if crop.shape[0] != crop.shape[1]:
        raise NonSquareCrop(f"crop must be square, got {crop.shape[:2]}")
    label = int(rng.integers(0, NUM_ROTATIONS))
    return rotate90(crop, label), label


@dataclass
class AugmentSpec:
    flip_p: float = 1.0
    zoom: float = 1.3
    brightness: tuple[float, float] = (1.0, 1.3)
    rotation_deg: tuple[float, float] = (-25.0, 25.0)
    # optional extras, off by default
    noise_std: float = 0.0
    salt_pepper: float = 0.0

    def __post_init__(self):
        self.brightness = tuple(float(v) for v in self.brightness)
        self.rotation_deg = tuple(float(v) for v in self.rotation_deg)
        if not 0.0 <= self.flip_p <= 1.0 or not 0.0 <= self.salt_pepper <= 1.0:
            raise InvalidConfig("probabilities must lie in [0, 1]")
        if self.zoom < 1.0:
            raise InvalidConfig(f"zoom must be >= 1, got {self.zoom}")
        for name in ("brightness", "rotation_deg"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(f"{name} range is inverted: {lo} > {hi}")
        if self.noise_std < 0:
            raise InvalidConfig("noise_std must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(flip_p=0.0, zoom=1.0, brightness=(1.0, 1.0), rotation_deg=(0.0, 0.0))

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown augment keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["brightness"] = list(self.brightness)
        d["rotation_deg"] = list(self.rotation_deg)
        return d


def _affine(frame: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    # matrix maps output (row, col) offsets from the centre to input offsets
    h, w = frame.shape[:2]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    out = np.empty_like(frame)
    for c in range(frame.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            frame[:, :, c], matrix, offset=offset, order=1, mode="constant", cval=0.0
        )
    return out


def _apply(frame: np.ndarray, spec: AugmentSpec, draws, rng: np.random.Generator) -> np.ndarray:
    u_flip, u_bright, u_rot = draws
    out = np.array(frame, dtype=np.float32, copy=True)
    if u_flip < spec.flip_p:
        out = np.ascontiguousarray(out[:, ::-1])
    if spec.zoom != 1.0:
        out = _affine(out, np.eye(2) / spec.zoom)
    lo, hi = spec.brightness
    factor = lo + (hi - lo) * u_bright
    if factor != 1.0:
        out = np.clip(out * np.float32(factor), 0.0, 1.0)
    lo, hi = spec.rotation_deg
    angle = np.deg2rad(lo + (hi - lo) * u_rot)
    if angle != 0.0:
        # positive angles turn the picture counter-clockwise on screen
        c, s = np.cos(angle), np.sin(angle)
        out = _affine(out, np.array([[c, s], [-s, c]]))
    if spec.noise_std > 0:
        out = out + rng.normal(0.0, spec.noise_std, out.shape).astype(np.float32)
    if spec.salt_pepper > 0:
        u = rng.random(out.shape[:2])
        out[u < spec.salt_pepper / 2] = 0.0
        out[(u >= spec.salt_pepper / 2) & (u < spec.salt_pepper)] = 1.0
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)


def _check_range(x: np.ndarray) -> None:
    if x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
        raise BadPixelRange("frame values must lie in [0, 1]")


def augment_frame(frame: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Flip, zoom, brightness, rotation (then optional noise), in that order."""
    _check_range(frame)
    return _apply(frame, spec, rng.random(3), rng)


def augment_clip(frames: np.ndarray, valid: np.ndarray, spec: AugmentSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """One parameter draw shared by every real frame; padding stays zero."""
    _check_range(frames)
    draws = rng.random(3)
    out = np.zeros_like(frames, dtype=np.float32)
    for t in np.flatnonzero(valid):
        out[t] = _apply(frames[t], spec, draws, rng)
    return out
