"""JSON dataset manifests pairing counting images with head-point annotations.

Coordinates are ``(x, y)`` = (column, row) with the origin at the top-left
corner; sub-pixel floats are allowed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedManifest, MissingFile, OutOfBoundsPoint

SPLITS = ("train", "test")


@dataclass(frozen=True)
class PointAnnotation:
    x: float
    y: float


@dataclass
class ImageRecord:
    image_path: str
    width: int
    height: int
    points: list[PointAnnotation] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.points)

    @property
    def stem(self) -> str:
        return Path(self.image_path).stem

    def points_array(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 2))
        return np.array([[p.x, p.y] for p in self.points], dtype=np.float64)

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise MalformedManifest(
                f"{self.image_path}: image size must be positive, got {self.width}x{self.height}"
            )
        for p in self.points:
            if not (0 <= p.x < self.width and 0 <= p.y < self.height):
                raise OutOfBoundsPoint(
                    f"{self.image_path}: point ({p.x}, {p.y}) outside {self.width}x{self.height}"
                )


@dataclass
class DatasetManifest:
    name: str
    split: str
    records: list[ImageRecord]
    root: Path | None = None  # directory relative image paths resolve against

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.image_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def validate(self, check_images: bool = False) -> None:
        if self.split not in SPLITS:
            raise MalformedManifest(f"split must be one of {SPLITS}, got {self.split!r}")
        if not self.records:
            raise MalformedManifest("manifest has no records")
        for rec in self.records:
            rec.validate()
            if check_images and not self.resolve(rec).is_file():
                raise MissingFile(f"image not found: {self.resolve(rec)}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "split": self.split,
            "records": [
                {
                    "image": r.image_path,
                    "width": r.width,
                    "height": r.height,
                    "points": [[p.x, p.y] for p in r.points],
                }
                for r in self.records
            ],
        }


def _parse_record(raw) -> ImageRecord:
    try:
        points = [PointAnnotation(float(x), float(y)) for x, y in raw["points"]]
        rec = ImageRecord(
            image_path=str(raw["image"]),
            width=int(raw["width"]),
            height=int(raw["height"]),
            points=points,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifest(f"bad record {raw!r}: {exc}") from exc
    return rec


def parse_manifest(data: dict, root: Path | None = None, check_images: bool = False) -> DatasetManifest:
    if not isinstance(data, dict):
        raise MalformedManifest("manifest root must be a JSON object")
    try:
        manifest = DatasetManifest(
            name=str(data["name"]),
            split=data["split"],
            records=[_parse_record(r) for r in data["records"]],
            root=root,
        )
    except (KeyError, TypeError) as exc:
        raise MalformedManifest(f"missing or invalid key: {exc}") from exc
    manifest.validate(check_images=check_images)
    return manifest


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    """Load and validate a manifest.

    Relative image paths are resolved against the manifest's directory; with
    ``check_images`` every image must exist on disk.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedManifest(f"{path}: invalid JSON ({exc})") from exc
    return parse_manifest(data, root=path.parent, check_images=check_images)


def dumps_manifest(manifest: DatasetManifest) -> str:
    return json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_manifest(manifest), encoding="utf-8")


def load_image(path, channels: int = 3) -> np.ndarray:
    """Read an image as an H x W x C float32 array scaled to [0, 1]."""
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"image not found: {path}")
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr
