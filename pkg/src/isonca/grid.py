"""Cell lattice, seeds and alive masking.

A grid is a plain ``(H, W, C)`` float array (optionally with leading batch
axes).  Channels 0-3 hold premultiplied RGBA, the rest are hidden state.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ALPHA = 3
ALIVE_THRESHOLD = 0.1
DEFAULT_CHANNELS = 16


@dataclass
class SeedPoint:
    dx: int
    dy: int
    encoding: np.ndarray  # full channel vector, alpha == 1


@dataclass
class StructuredSeed:
    points: list[SeedPoint]
    radius: float | None = None
    channels: int = DEFAULT_CHANNELS

    def __post_init__(self):
        for p in self.points:
            if len(p.encoding) != self.channels:
                raise ValueError("seed encoding length does not match channels")
            if p.encoding[ALPHA] != 1.0:
                raise ValueError("seed point alpha must be 1")

    @property
    def orientable(self) -> bool:
        """True when the points fix an orientation: >= 3 of them, not collinear."""
        if len(self.points) < 3:
            return False
        xy = np.array([(p.dx, p.dy) for p in self.points], dtype=float)
        return np.linalg.matrix_rank(xy - xy.mean(axis=0), tol=1e-9) == 2

    def transformed(self, rot90: int = 0, flip: bool = False) -> "StructuredSeed":
        """Apply the same D4 element used by :func:`d4_transform` to point offsets."""
        pts = []
        for p in self.points:
            dx, dy = p.dx, p.dy
            if flip:
                dx = -dx
            for _ in range(rot90 % 4):
                # np.rot90 (counter-clockwise on screen): (row, col) -> (W-1-col, row)
                dx, dy = dy, -dx
            pts.append(SeedPoint(dx, dy, p.encoding.copy()))
        return StructuredSeed(pts, self.radius, self.channels)

    def to_json(self) -> dict:
        return {
            "channels": self.channels,
            "points": [
                {"dx": p.dx, "dy": p.dy, "rgb": [float(v) for v in p.encoding[:3]]}
                for p in self.points
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StructuredSeed":
        channels = int(doc.get("channels", DEFAULT_CHANNELS))
        pts = []
        for entry in doc["points"]:
            pts.append(SeedPoint(int(entry["dx"]), int(entry["dy"]),
                                 point_encoding(entry["rgb"], channels)))
        return cls(pts, doc.get("radius"), channels)

    @classmethod
    def load(cls, path: str | Path) -> "StructuredSeed":
        return cls.from_json(json.loads(Path(path).read_text()))


def point_encoding(rgb, channels: int = DEFAULT_CHANNELS) -> np.ndarray:
    enc = np.zeros(channels)
    enc[:3] = rgb
    enc[ALPHA] = 1.0
    return enc


def hue_to_rgb(hue_deg: float) -> tuple[float, float, float]:
    """Hexcone HSV to RGB with S = V = 1."""
    return colorsys.hsv_to_rgb((hue_deg % 360.0) / 360.0, 1.0, 1.0)


def make_uniform_circle_seed(n_points: int, radius: float = 8.0, phase_deg: float = 90.0,
                             channels: int = DEFAULT_CHANNELS) -> StructuredSeed:
    """Points evenly spaced on a circle, colored by equidistant hues.

    ``dy`` grows downward (row axis); the phase is measured counter-clockwise
    on screen, so the default 90 degrees puts the first point straight up.
    """
    if n_points < 3:
        raise ValueError("n_points must be >= 3")
    if radius < 2:
        raise ValueError("radius must be >= 2 cells")
    pts = []
    seen = set()
    for k in range(n_points):
        a = math.radians(phase_deg) + 2 * math.pi * k / n_points
        dx = int(round(radius * math.cos(a)))
        dy = int(round(-radius * math.sin(a)))
        if (dx, dy) in seen:
            raise ValueError(f"seed points collide after rounding at offset {(dx, dy)}")
        seen.add((dx, dy))
        pts.append(SeedPoint(dx, dy, point_encoding(hue_to_rgb(360.0 * k / n_points), channels)))
    return StructuredSeed(pts, radius, channels)


def init_single_seed(height: int, width: int, channels: int = DEFAULT_CHANNELS,
                     dtype=np.float32) -> np.ndarray:
    if height < 3 or width < 3:
        raise ValueError("grid must be at least 3x3")
    if channels < 4:
        raise ValueError("need at least 4 channels (RGBA)")
    grid = np.zeros((height, width, channels), dtype=dtype)
    grid[height // 2, width // 2, ALPHA] = 1.0
    return grid


def init_structured_seed(height: int, width: int, seed: StructuredSeed,
                         channels: int | None = None, dtype=np.float32) -> np.ndarray:
    channels = seed.channels if channels is None else channels
    if channels < seed.channels:
        raise ValueError("grid has fewer channels than the seed encodings")
    grid = np.zeros((height, width, channels), dtype=dtype)
    cy, cx = height // 2, width // 2
    taken = set()
    for p in seed.points:
        r, c = cy + p.dy, cx + p.dx
        if not (0 <= r < height and 0 <= c < width):
            raise ValueError(f"seed point ({p.dx}, {p.dy}) falls outside a {height}x{width} grid")
        if (r, c) in taken:
            raise ValueError(f"two seed points share cell ({r}, {c})")
        taken.add((r, c))
        grid[r, c, :seed.channels] = p.encoding
    return grid


def _max3x3(a: np.ndarray) -> np.ndarray:
    """3x3 max filter over the last two axes, zero padded."""
    h, w = a.shape[-2:]
    p = np.zeros(a.shape[:-2] + (h + 2, w + 2), dtype=a.dtype)
    p[..., 1:-1, 1:-1] = a
    rows = np.maximum(np.maximum(p[..., :-2, :], p[..., 1:-1, :]), p[..., 2:, :])
    return np.maximum(np.maximum(rows[..., :, :w], rows[..., :, 1:w + 1]), rows[..., :, 2:])


def alive_mask(grid: np.ndarray, threshold: float = ALIVE_THRESHOLD) -> np.ndarray:
    """Boolean ``(..., H, W)`` mask: some alpha in the 3x3 neighbourhood exceeds threshold.

    Out-of-bounds neighbours count as alpha 0.  Comparing before taking the
    max keeps negative alphas from interacting with the zero padding.
    """
    over = (grid[..., ALPHA] > threshold).astype(np.uint8)
    return _max3x3(over).astype(bool)


def apply_alive_masking(pre_mask: np.ndarray, post_mask: np.ndarray, grid: np.ndarray) -> np.ndarray:
    if pre_mask.shape != post_mask.shape or pre_mask.shape != grid.shape[:-1]:
        raise ValueError("mask and grid dimensions differ")
    keep = (pre_mask & post_mask)[..., None]
    return np.where(keep, grid, np.zeros((), dtype=grid.dtype))


# D4 acting on the two spatial axes of an (..., H, W, C) array.
D4 = [(k, f) for f in (False, True) for k in range(4)]


def d4_transform(a: np.ndarray, rot90: int = 0, flip: bool = False, spatial=(-3, -2)) -> np.ndarray:
    """Left-right flip (optional) followed by ``rot90`` quarter turns."""
    if flip:
        a = np.flip(a, axis=spatial[1])
    return np.rot90(a, k=rot90, axes=spatial)


def to_rgba8(grid: np.ndarray) -> np.ndarray:
    rgba = np.clip(np.asarray(grid[..., :4], dtype=np.float64), 0.0, 1.0)
    return np.round(rgba * 255.0).astype(np.uint8)


def save_png(grid: np.ndarray, path: str | Path, scale: int = 1) -> None:
    from PIL import Image

    img = to_rgba8(grid)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    Image.fromarray(img).save(path)


@dataclass
class SeedEdit:
    """One mutation applied to a structured seed (see :func:`mutate_seed`)."""

    op: str
    index: int
    other: int | None = None
    dx: int | None = None
    dy: int | None = None
    rgb: list[float] | None = field(default=None)


def mutate_seed(seed: StructuredSeed, edits: list[SeedEdit]) -> StructuredSeed:
    pts = [SeedPoint(p.dx, p.dy, p.encoding.copy()) for p in seed.points]
    for e in edits:
        if not 0 <= e.index < len(pts):
            raise ValueError(f"edit {e.op!r}: point index {e.index} out of range")
        if e.op == "move":
            if e.dx is None or e.dy is None:
                raise ValueError("move needs dx and dy")
            pts[e.index].dx, pts[e.index].dy = e.dx, e.dy
        elif e.op == "recolor":
            if e.rgb is None:
                raise ValueError("recolor needs rgb")
            pts[e.index].encoding = point_encoding(e.rgb, seed.channels)
        elif e.op in ("swap", "copy-encoding"):
            if e.other is None or not 0 <= e.other < len(pts):
                raise ValueError(f"{e.op} needs a valid 'other' index")
            a, b = pts[e.index], pts[e.other]
            if e.op == "swap":
                a.encoding, b.encoding = b.encoding, a.encoding
            else:
                a.encoding = b.encoding.copy()
        elif e.op == "delete":
            pts.pop(e.index)
        elif e.op == "duplicate":
            if e.dx is None or e.dy is None:
                raise ValueError("duplicate needs dx and dy for the new point")
            pts.append(SeedPoint(e.dx, e.dy, pts[e.index].encoding.copy()))
        else:
            raise ValueError(f"unknown seed edit {e.op!r}")
    return StructuredSeed(pts, seed.radius, seed.channels)
