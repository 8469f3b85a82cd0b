"""Image renderings of flow fields and instance masks (PPM output)."""

from __future__ import annotations

import numpy as np
from matplotlib import colormaps
from matplotlib.colors import hsv_to_rgb

from . import io


def flow_to_rgb(flow, max_flow=None) -> np.ndarray:
    """Color-code a 2×H×W flow as H×W×3 uint8.

    Hue encodes direction, saturation encodes magnitude relative to
    ``max_flow``. Zero motion maps to mid-gray.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError("flow must be 2×H×W")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    u, v = flow
    mag = np.hypot(u, v)
    scale = float(mag.max()) if max_flow is None else float(max_flow)
    if scale <= 0:
        scale = 1.0
    sat = np.clip(mag / scale, 0.0, 1.0)
    hue = (np.arctan2(-v, -u) / np.pi + 1.0) / 2.0
    val = 0.5 + 0.5 * sat
    rgb = hsv_to_rgb(np.stack([hue, sat, val], axis=-1))
    return np.round(rgb * 255).astype(np.uint8)


def instance_overlay(image, masks, alpha=0.5) -> np.ndarray:
    """Blend instance masks over a grayscale image in [0, 1]; returns H×W×3 uint8."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.repeat(image[..., None], 3, axis=-1)
    palette = colormaps["tab10"].colors
    for i, m in enumerate(masks):
        m = np.asarray(m, dtype=bool)
        if m.shape != image.shape:
            raise ValueError("mask and image sizes differ")
        rgb[m] = (1 - alpha) * rgb[m] + alpha * np.asarray(palette[i % len(palette)])
    return np.round(rgb * 255).astype(np.uint8)


def write_flow_image(path, flow, max_flow=None):
    io.write_ppm(path, flow_to_rgb(flow, max_flow))


def write_overlay(path, image, masks, alpha=0.5):
    io.write_ppm(path, instance_overlay(image, masks, alpha))
