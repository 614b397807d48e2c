"""Activation-map overlays for visual inspection."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402


def overlay(pixels, activation, alpha=0.5, cmap="jet"):
    """Blend an activation map (upsampled to the image) over a [-1, 1] raster.

    Returns an (H, W, 3) uint8 array.
    """
    img = np.clip((np.asarray(pixels).transpose(1, 2, 0) + 1.0) / 2.0, 0, 1)
    h, w = img.shape[:2]
    act = np.asarray(activation, dtype=np.float64)
    peak = act.max()
    act = act / peak if peak > 0 else act
    up = Image.fromarray((act * 255).astype(np.uint8)).resize((w, h), Image.BILINEAR)
    heat = matplotlib.colormaps[cmap](np.asarray(up) / 255.0)[..., :3]
    return (255 * ((1 - alpha) * img + alpha * heat)).astype(np.uint8)


def save_overlay_pair(path, query_pixels, query_map, ref_pixels, ref_map, scale=4):
    """Side-by-side PNG: query with its map, reference with its map."""
    left = overlay(query_pixels, query_map)
    right = overlay(ref_pixels, ref_map)
    gap = np.full((left.shape[0], 4, 3), 255, dtype=np.uint8)
    canvas = np.concatenate([left, gap, right], axis=1)
    im = Image.fromarray(canvas)
    im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG")
