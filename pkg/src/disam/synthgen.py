"""Procedural multi-domain place dataset.

Every place is a random layered scene (smooth textured background plus a
stack of flat-coloured polygons and ellipses).  A domain is a photometric
transform only: hue rotation about the grey axis, a monotone
brightness/contrast curve, a smooth additive tint field and pixel noise.
Renderings of one place therefore share their geometry across domains.
Views are horizontal shifts of the camera window along the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import Manifest, ManifestRecord, Pose, write_image, write_manifest
from .errors import InvalidConfig

PLACE_SPACING = 10.0  # meters between consecutive places
VIEW_STEP = 1.0  # meters between views of one place
VIEW_SHIFT_PX = 4
COLOR_RANGE = 0.45
MIN_COLOR_DIST = 0.35
# noise-free renderings of one place in two domains differ by at least this
# mean absolute pixel value (checked by the test suite for the defaults)
MIN_PHOTOMETRIC_DIFFERENCE = 0.05


@dataclass(frozen=True)
class DomainTransform:
    hue: float = 0.0  # radians about the grey axis
    gain: float = 1.0
    bias: float = 0.0
    curve: float = 0.0  # quadratic term of the tone curve
    tint_amplitude: float = 0.0
    tint_seed: int = 0
    noise: float = 0.0

    def apply(self, rgb, rng=None, noise=True):
        """Map a (3, H, W) scene raster to this domain's appearance."""
        h, w = rgb.shape[1:]
        out = np.tensordot(hue_rotation(self.hue), rgb, axes=1)
        out = self.gain * out + self.bias + self.curve * (out ** 2 - 1.0 / 3.0)
        if self.tint_amplitude:
            out = out + self.tint_amplitude * tint_field(self.tint_seed, h, w)
        if noise and self.noise and rng is not None:
            out = out + rng.normal(0.0, self.noise, size=out.shape)
        return np.clip(out, -1.0, 1.0).astype(np.float32)


def hue_rotation(angle):
    """3x3 rotation about the (1,1,1) axis; preserves RGB distances."""
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def tint_field(seed, h, w):
    """Per-channel smooth field in [-1, 1] with wavelength >= the image width."""
    rng = np.random.default_rng([seed, 7919])
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    out = np.empty((3, h, w))
    for c in range(3):
        fx, fy = rng.uniform(-1.0, 1.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out[c] = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return out


def default_transforms(n_domains, seed):
    """Domain 0 is the untouched reference; others get random appearance shifts."""
    rng = np.random.default_rng([seed, 104729])
    transforms = [DomainTransform(noise=0.02, tint_seed=seed)]
    for d in range(1, n_domains):
        transforms.append(DomainTransform(
            hue=float(rng.uniform(0.6, 2.4) * rng.choice([-1, 1])),
            gain=float(rng.uniform(0.75, 1.1)),
            bias=float(rng.uniform(-0.1, 0.1)),
            curve=float(rng.uniform(-0.15, 0.15)),
            tint_amplitude=float(rng.uniform(0.05, 0.12)),
            tint_seed=seed * 1000 + d,
            noise=0.02,
        ))
    return tuple(transforms)


@dataclass(frozen=True)
class SynthConfig:
    n_places: int = 24
    n_domains: int = 3
    views_per_place: int = 2
    image_size: int = 64
    seed: int = 0
    transforms: tuple = field(default=None)

    def __post_init__(self):
        if self.n_places < 2 or self.n_domains < 2:
            raise InvalidConfig("need at least 2 places and 2 domains")
        if self.views_per_place < 1 or self.image_size < 8:
            raise InvalidConfig("need views_per_place >= 1 and image_size >= 8")
        if self.transforms is None:
            object.__setattr__(self, "transforms", default_transforms(self.n_domains, self.seed))
        if len(self.transforms) != self.n_domains:
            raise InvalidConfig("one transform per domain required")

    @property
    def domain_names(self):
        return tuple(["reference"] + [f"condition{d}" for d in range(1, self.n_domains)])


def _distinct_colors(rng, n):
    colors = []
    while len(colors) < n:
        c = rng.uniform(-COLOR_RANGE, COLOR_RANGE, size=3)
        if all(np.linalg.norm(c - o) >= MIN_COLOR_DIST for o in colors):
            colors.append(c)
    return colors


def render_scene(seed, place, width, height):
    """Geometry of one place: returns (rgb, labels) over a wide canvas.

    ``labels`` holds the index of the layer visible at each pixel (0 = background).
    """
    rng = np.random.default_rng([seed, place, 31])
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    n_shapes = int(rng.integers(5, 9))
    colors = _distinct_colors(rng, n_shapes + 1)
    rgb = np.empty((3, height, width))
    rgb[:] = colors[0][:, None, None]
    for _ in range(3):
        wavelength = rng.uniform(24, 48)
        theta = rng.uniform(0, np.pi)
        wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / wavelength
                      + rng.uniform(0, 2 * np.pi))
        rgb += 0.03 * wave * rng.uniform(-1, 1, size=3)[:, None, None]
    labels = np.zeros((height, width), dtype=np.int32)
    for k in range(1, n_shapes + 1):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        kind = rng.integers(3)
        if kind == 0:
            rx, ry = rng.uniform(4, height / 3, size=2)
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        elif kind == 1:
            hw, hh = rng.uniform(3, height / 3, size=2)
            ang = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
            v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
            mask = (np.abs(u) <= hw) & (np.abs(v) <= hh)
        else:
            pts = np.stack([cx, cy]) + rng.uniform(-height / 3, height / 3, size=(3, 2))
            mask = _triangle_mask(xx, yy, pts)
        rgb[:, mask] = colors[k][:, None]
        labels[mask] = k
    return rgb, labels


def _triangle_mask(xx, yy, pts):
    def side(a, b):
        return (xx - b[0]) * (a[1] - b[1]) - (a[0] - b[0]) * (yy - b[1])

    d1, d2, d3 = side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def view_window(config: SynthConfig, view):
    return slice(view * VIEW_SHIFT_PX, view * VIEW_SHIFT_PX + config.image_size)


def render(config: SynthConfig, place, domain, view, noise=True):
    """Pixels (3, S, S) in [-1, 1] of one place/domain/view."""
    s = config.image_size
    width = s + VIEW_SHIFT_PX * (config.views_per_place - 1)
    rgb, _ = render_scene(config.seed, place, width, s)
    crop = rgb[:, :, view_window(config, view)]
    rng = np.random.default_rng([config.seed, place, domain, view, 59])
    return config.transforms[domain].apply(crop, rng=rng, noise=noise)


def render_labels(config: SynthConfig, place, view):
    s = config.image_size
    width = s + VIEW_SHIFT_PX * (config.views_per_place - 1)
    _, labels = render_scene(config.seed, place, width, s)
    return labels[:, view_window(config, view)]


def place_pose(place, view):
    """Ground-truth pose on a gently curving trajectory (places 10 m apart)."""
    s = place * PLACE_SPACING + view * VIEW_STEP
    yaw = 0.3 * np.sin(s / 40.0)
    pos = (s, 8.0 * np.sin(s / 60.0), 0.0)
    return Pose.from_yaw(pos, yaw)


def generate(config: SynthConfig, out_dir) -> Manifest:
    """Render the dataset to ``out_dir`` and write ``out_dir/manifest.tsv``.

    Domain 0 renderings form the database split, all other domains the query
    split.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for domain in range(config.n_domains):
        split = "database" if domain == 0 else "query"
        for place in range(config.n_places):
            for view in range(config.views_per_place):
                rid = f"d{domain}_p{place:03d}_v{view}"
                rel = f"images/{rid}.png"
                write_image(out_dir / rel, render(config, place, domain, view))
                records.append(ManifestRecord(rid, rel, domain, place, place_pose(place, view), split))
    manifest = Manifest(tuple(records), config.domain_names,
                        (config.image_size, config.image_size), out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
