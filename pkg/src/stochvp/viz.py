"""Flow/depth colouring and PPM strip montages."""
from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

ROWS = ("final", "static", "dynamic", "depth", "residual_flow", "ego_flow")


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """``[2,H,W]`` flow to ``[3,H,W]`` RGB: hue = direction, saturation = magnitude.

    Zero flow is white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[0], flow[1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag.max())
    sat = np.clip(mag / max_mag, 0.0, 1.0) if max_mag > 0 else np.zeros_like(mag)
    hue = (np.arctan2(-v, -u) / np.pi + 1.0) / 2.0
    rgb = np.vectorize(colorsys.hsv_to_rgb)(hue, sat, np.ones_like(mag))
    return np.stack(rgb, 0)


def depth_to_gray(depth: np.ndarray) -> np.ndarray:
    """``[1,H,W]`` depth to normalised inverse-depth grayscale ``[3,H,W]`` (near = bright)."""
    inv = 1.0 / np.asarray(depth, dtype=np.float64)[0]
    lo, hi = inv.min(), inv.max()
    g = (inv - lo) / (hi - lo) if hi > lo else np.ones_like(inv)
    return np.repeat(g[None], 3, 0)


def montage(rows: dict[str, np.ndarray | None], pad: int = 1) -> np.ndarray:
    """Grid with one row per entry of :data:`ROWS` and one column per step.

    Images are ``[T,C,H,W]``; missing rows (e.g. Depth-Only has no dynamic
    branch) are filled with mid gray.
    """
    ref = next(v for v in rows.values() if v is not None)
    t, _, h, w = ref.shape
    out = np.ones((3, len(ROWS) * (h + pad) - pad, t * (w + pad) - pad))
    for r, name in enumerate(ROWS):
        seq = rows.get(name)
        for k in range(t):
            if seq is None:
                tile = np.full((3, h, w), 0.5)
            elif name == "depth":
                tile = depth_to_gray(seq[k])
            elif name.endswith("flow"):
                tile = flow_to_color(seq[k])
            else:
                tile = np.clip(seq[k], 0, 1)
            y, x = r * (h + pad), k * (w + pad)
            out[:, y:y + h, x:x + w] = tile
    return out


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    h, w = img.shape[1:]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.transpose(1, 2, 0).tobytes())
