"""Colour overlays for label and cluster maps."""
from __future__ import annotations

import warnings

import numpy as np
from PIL import Image, ImageDraw

from .evaluation import resize_nearest
from .netpbm import write_ppm

# index 0 is reserved for background and stays gray
PALETTE = np.array([
    (128, 128, 128), (230, 25, 75), (60, 180, 75), (255, 225, 25),
    (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240),
    (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128),
    (220, 190, 255), (170, 110, 40), (128, 0, 0), (0, 0, 128),
], dtype=np.float32) / 255.0

ROW_HEIGHT = 12


def palette_colors(n: int) -> np.ndarray:
    if n > len(PALETTE):
        warnings.warn(f"{n} classes but only {len(PALETTE)} palette colours; colours repeat", stacklevel=2)
    return PALETTE[np.arange(n) % len(PALETTE)]


def blend(image: np.ndarray, label_map: np.ndarray, n_classes: int | None = None, alpha: float = 0.5) -> np.ndarray:
    """``(1 - alpha) * image + alpha * colour`` after nearest upsampling of the map."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    lm = np.asarray(label_map)
    if lm.shape[0] > h or lm.shape[1] > w:
        raise ValueError(f"map {lm.shape} is larger than the image {image.shape[:2]}")
    lm = resize_nearest(lm, (h, w))
    if lm.min() < 0:
        raise ValueError("negative label ids")
    colors = palette_colors(n_classes or int(lm.max()) + 1)
    return (1 - alpha) * image + alpha * colors[lm % len(colors)]


def legend_strip(names: list[str], width: int) -> np.ndarray:
    """One row per label: a colour swatch followed by the name."""
    colors = palette_colors(len(names))
    canvas = Image.new("RGB", (width, ROW_HEIGHT * max(len(names), 1)), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for i, name in enumerate(names):
        y = i * ROW_HEIGHT
        rgb = tuple(int(round(c * 255)) for c in colors[i])
        draw.rectangle([1, y + 1, ROW_HEIGHT - 2, y + ROW_HEIGHT - 2], fill=rgb)
        draw.text((ROW_HEIGHT + 2, y), name, fill=(0, 0, 0))
    return np.asarray(canvas, dtype=np.float32) / 255.0


def render_overlay(image, label_map, names: list[str] | None = None, alpha: float = 0.5) -> np.ndarray:
    n = len(names) if names else None
    out = blend(image, label_map, n, alpha)
    if names:
        out = np.concatenate([out, legend_strip(names, out.shape[1])], axis=0)
    return out


def save_overlay(path, image, label_map, names=None, alpha: float = 0.5) -> None:
    write_ppm(path, np.clip(render_overlay(image, label_map, names, alpha), 0.0, 1.0))
