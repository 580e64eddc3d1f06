"""Procedural RGBA targets for demos and tests (straight alpha, values in [0, 1])."""

from __future__ import annotations

import numpy as np


def _coords(size: int):
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return (x - c) / (size / 2.0), (y - c) / (size / 2.0)


def _soft(d: np.ndarray, edge: float) -> np.ndarray:
    """Coverage of a region given a signed distance ``d`` (negative inside)."""
    return np.clip(0.5 - d / edge, 0.0, 1.0)


def _disc(x, y, cx, cy, r, edge):
    return _soft(np.hypot(x - cx, y - cy) - r, edge)


def _compose(layers, size):
    """Paint ``(coverage, rgb)`` layers back to front with the over operator."""
    out = np.zeros((size, size, 4))  # premultiplied while compositing
    for cov, rgb in layers:
        a = cov[..., None]
        out[..., :3] = np.asarray(rgb) * a + out[..., :3] * (1 - a)
        out[..., 3:] = a + out[..., 3:] * (1 - a)
    alpha = out[..., 3:]
    out[..., :3] = np.divide(out[..., :3], alpha, out=np.zeros_like(out[..., :3]), where=alpha > 0)
    return out


def blob3(size: int = 24) -> np.ndarray:
    """Three overlapping colored discs; no rotational or mirror symmetry."""
    x, y = _coords(size)
    e = 2.0 / size
    return _compose([
        (_disc(x, y, -0.22, 0.12, 0.52, e), (0.9, 0.2, 0.2)),
        (_disc(x, y, 0.30, 0.28, 0.36, e), (0.2, 0.75, 0.25)),
        (_disc(x, y, 0.12, -0.42, 0.30, e), (0.2, 0.3, 0.9)),
    ], size)


def blob2(size: int = 24) -> np.ndarray:
    """An off-center two-color blob without mirror symmetry."""
    x, y = _coords(size)
    e = 2.0 / size
    return _compose([
        (_disc(x, y, -0.1, 0.05, 0.55, e), (0.95, 0.6, 0.1)),
        (_disc(x, y, 0.35, -0.35, 0.3, e), (0.15, 0.35, 0.85)),
    ], size)


def lizard(size: int = 40) -> np.ndarray:
    """Elongated body with head, tapering curled tail and four legs.

    Head and tail have similar silhouettes, so a 180 degree turn matches the
    shape far better than other angles.
    """
    x, y = _coords(size)
    e = 2.0 / size
    body = _soft(np.hypot(x / 0.24, (y - 0.05) / 0.62) - 1.0, e * 4)
    head = _disc(x, y, 0.0, -0.62, 0.2, e)
    t = np.clip((y - 0.5) / 0.4, 0, 1)
    tail_cx = 0.12 * t ** 2
    tail = _soft(np.abs(x - tail_cx) - (0.12 * (1 - t) + 0.02), e) * ((y > 0.45) & (y < 0.92))
    legs = np.zeros_like(x)
    for sy in (-0.3, 0.35):
        for sx in (-1, 1):
            legs = np.maximum(legs, _soft(np.hypot((x - sx * 0.34) / 0.2, (y - sy) / 0.08) - 1.0, e * 4))
    silhouette = np.maximum.reduce([body, head, tail, legs])
    eyes = np.maximum(_disc(x, y, -0.08, -0.68, 0.045, e), _disc(x, y, 0.08, -0.68, 0.045, e))
    return _compose([(silhouette, (0.35, 0.7, 0.25)), (eyes, (0.05, 0.1, 0.05))], size)


def heart(size: int = 32) -> np.ndarray:
    x, y = _coords(size)
    xs, ys = x / 0.62, -y / 0.62 + 0.12
    f = (xs ** 2 + ys ** 2 - 1) ** 3 - xs ** 2 * ys ** 3
    return _compose([(_soft(f, 0.08), (0.9, 0.1, 0.2))], size)


SHAPES = {"blob3": blob3, "blob2": blob2, "lizard": lizard, "heart": heart}


def save_shape_png(name: str, path, size: int | None = None) -> None:
    from PIL import Image

    rgba = SHAPES[name](size) if size else SHAPES[name]()
    Image.fromarray(np.round(rgba * 255).astype(np.uint8)).save(path)
