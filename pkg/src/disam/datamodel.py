"""Core record types, manifest I/O and flip augmentation.

Manifest format (UTF-8, tab separated, one record per line)::

    #domains: reference,dusk,snow
    #image_size: 64,64
    id<TAB>image_path<TAB>domain<TAB>place<TAB>tx ty tz qw qx qy qz<TAB>split

The pose column holds seven space separated numbers or ``-`` when absent.
Image paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DuplicateId,
    MalformedRecord,
    MissingPoseForDatabase,
    UnknownDomain,
    ValidationError,
)

SPLITS = ("database", "query", "train")
FLIP_SUFFIX = "#flip"


@dataclass(frozen=True)
class Pose:
    """6-DoF pose: position in meters, orientation as unit quaternion (w, x, y, z)."""

    position: tuple
    orientation: tuple

    def __post_init__(self):
        position = tuple(float(v) for v in self.position)
        orientation = tuple(float(v) for v in self.orientation)
        if len(position) != 3 or len(orientation) != 4:
            raise ValidationError("pose needs 3 position and 4 quaternion components")
        if not np.all(np.isfinite(position + orientation)):
            raise ValidationError("pose components must be finite")
        if abs(np.linalg.norm(orientation) - 1.0) > 1e-6:
            raise ValidationError(f"quaternion {orientation} is not unit norm")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "orientation", orientation)

    @classmethod
    def from_yaw(cls, position, yaw):
        """Pose rotated by ``yaw`` radians about the z axis."""
        return cls(position, (np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)))

    def as_array(self):
        return np.array(self.position + self.orientation, dtype=np.float64)


@dataclass(frozen=True)
class ImageSample:
    id: str
    pixels: np.ndarray  # (3, H, W) float32 in [-1, 1]
    domain: int
    place: int
    pose: Optional[Pose] = None
    split: str = "train"

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[0] != 3:
            raise ValidationError(f"pixels must have shape (3, H, W), got {pixels.shape}")
        if pixels.size and (pixels.min() < -1.0 or pixels.max() > 1.0):
            raise ValidationError("pixel values must lie in [-1, 1]")
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def image_size(self):
        return self.pixels.shape[1:]


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    domain: int
    place: int
    pose: Optional[Pose]
    split: str


@dataclass(frozen=True)
class Manifest:
    records: tuple
    domain_names: tuple
    image_size: tuple
    root: Path = field(default=Path("."), compare=False)

    @property
    def n_domains(self):
        return len(self.domain_names)

    def by_split(self, split):
        return [r for r in self.records if r.split == split]

    def by_id(self):
        return {r.id: r for r in self.records}

    def resolve(self, record):
        return self.root / record.path

    def load_sample(self, record):
        pixels = read_image(self.resolve(record))
        if pixels.shape[1:] != tuple(self.image_size):
            raise ValidationError(
                f"{record.id}: image is {pixels.shape[1:]}, manifest says {self.image_size}"
            )
        return ImageSample(record.id, pixels, record.domain, record.place, record.pose, record.split)


def read_image(path):
    """Read an 8-bit RGB image into a (3, H, W) float32 array in [-1, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return np.ascontiguousarray((arr.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32))


def write_image(path, pixels):
    """Write a (3, H, W) array in [-1, 1] as an 8-bit PNG."""
    arr = np.clip(np.rint((np.asarray(pixels) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def quantize(pixels):
    """Round pixels to the values an 8-bit PNG round trip produces."""
    arr = np.clip(np.rint((np.asarray(pixels) + 1.0) * 127.5), 0, 255)
    return (arr / 127.5 - 1.0).astype(np.float32)


def _fmt(x):
    return repr(float(x))


def _parse_pose(text, lineno):
    if text == "-":
        return None
    parts = text.split()
    if len(parts) != 7:
        raise MalformedRecord(f"pose needs 7 numbers, got {len(parts)}", lineno)
    try:
        values = [float(p) for p in parts]
        return Pose(values[:3], values[3:])
    except ValueError as exc:
        raise MalformedRecord(f"bad pose: {exc}", lineno) from None


def _parse_int(text, what, lineno):
    try:
        value = int(text)
    except ValueError:
        raise MalformedRecord(f"{what} {text!r} is not an integer", lineno) from None
    if value < 0:
        raise MalformedRecord(f"{what} must be nonnegative", lineno)
    return value


def parse_manifest(text, root=Path(".")):
    domain_names = None
    image_size = None
    records = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            key = key.strip()
            if key == "domains":
                domain_names = tuple(v.strip() for v in value.split(",") if v.strip())
            elif key == "image_size":
                try:
                    image_size = tuple(int(v) for v in value.split(","))
                except ValueError:
                    raise MalformedRecord("bad image_size header", lineno) from None
                if len(image_size) != 2:
                    raise MalformedRecord("image_size needs H,W", lineno)
            continue
        if domain_names is None or image_size is None:
            raise MalformedRecord("record before #domains / #image_size headers", lineno)
        fields = line.split("\t")
        if len(fields) != 6:
            raise MalformedRecord(f"expected 6 tab-separated fields, got {len(fields)}", lineno)
        rid, path, dom, place, pose, split = fields
        if not rid:
            raise MalformedRecord("empty id", lineno)
        domain = _parse_int(dom, "domain", lineno)
        if domain >= len(domain_names):
            raise UnknownDomain(
                f"domain {domain} but only {len(domain_names)} domains declared", lineno
            )
        place = _parse_int(place, "place", lineno)
        if split not in SPLITS:
            raise MalformedRecord(f"unknown split {split!r}", lineno)
        pose = _parse_pose(pose, lineno)
        if split == "database" and pose is None:
            raise MissingPoseForDatabase(f"database record {rid!r} has no pose", lineno)
        if rid in seen:
            raise DuplicateId(f"duplicate id {rid!r}", lineno)
        seen.add(rid)
        records.append(ManifestRecord(rid, path, domain, place, pose, split))
    if domain_names is None:
        domain_names = ()
    if image_size is None:
        image_size = (0, 0)
    return Manifest(tuple(records), domain_names, image_size, Path(root))


def load_manifest(path):
    """Load and validate a manifest file; record order is preserved."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, root=path.parent)


def format_manifest(manifest):
    lines = [
        "#domains: " + ",".join(manifest.domain_names),
        "#image_size: {},{}".format(*manifest.image_size),
    ]
    for r in manifest.records:
        pose = "-" if r.pose is None else " ".join(_fmt(v) for v in r.pose.position + r.pose.orientation)
        lines.append("\t".join([r.id, r.path, str(r.domain), str(r.place), pose, r.split]))
    return "\n".join(lines) + "\n"


def write_manifest(manifest, path):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(format_manifest(manifest), encoding="utf-8")
    os.replace(tmp, path)


def flip_horizontal(img: ImageSample) -> ImageSample:
    """Mirror the pixel columns; metadata is kept and the id gets a ``#flip`` suffix."""
    return dataclasses.replace(
        img, id=img.id + FLIP_SUFFIX, pixels=np.ascontiguousarray(img.pixels[:, :, ::-1])
    )


def stack_pixels(samples: Sequence[ImageSample]):
    return np.stack([s.pixels for s in samples])
