"""Running square-grid rules on Voronoi cells of Poisson-disk samples."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import Delaunay

from .grid import ALIVE_THRESHOLD, ALPHA, StructuredSeed
from .rng import StepRng
from .rule import RuleParams, rule_forward

LAPLACIAN_GAIN = 12.0
MIN_EDGE = 1e-9


@dataclass
class PointSet:
    points: np.ndarray  # (n, 2) as (x, y)
    width: float
    height: float
    min_distance: float

    def __len__(self) -> int:
        return len(self.points)


def poisson_disk_sample(width: float, height: float, r_pd: float, k_attempts: int = 30,
                        rng=None) -> PointSet:
    """Bridson dart throwing with a background grid of cell size ``r_pd / sqrt(2)``."""
    if r_pd <= 0:
        raise ValueError("r_pd must be positive")
    if width <= 0 or height <= 0:
        raise ValueError("degenerate sampling domain")
    rng = np.random.default_rng(rng)
    cell = r_pd / math.sqrt(2)
    gw, gh = int(math.ceil(width / cell)), int(math.ceil(height / cell))
    owner = -np.ones((gh, gw), dtype=np.int64)
    pts: list[tuple[float, float]] = []

    def add(p):
        owner[min(int(p[1] / cell), gh - 1), min(int(p[0] / cell), gw - 1)] = len(pts)
        pts.append(p)

    def fits(x, y):
        if not (0 <= x < width and 0 <= y < height):
            return False
        gx, gy = int(x / cell), int(y / cell)
        for j in range(max(gy - 2, 0), min(gy + 3, gh)):
            for i in range(max(gx - 2, 0), min(gx + 3, gw)):
                o = owner[j, i]
                if o >= 0:
                    qx, qy = pts[o]
                    if (qx - x) ** 2 + (qy - y) ** 2 < r_pd * r_pd:
                        return False
        return True

    add((float(rng.uniform(0, width)), float(rng.uniform(0, height))))
    active = [0]
    while active:
        slot = int(rng.integers(len(active)))
        px, py = pts[active[slot]]
        for _ in range(k_attempts):
            rad = r_pd * math.sqrt(rng.uniform(1.0, 4.0))
            ang = rng.uniform(0, 2 * math.pi)
            x, y = px + rad * math.cos(ang), py + rad * math.sin(ang)
            if fits(x, y):
                add((x, y))
                active.append(len(pts) - 1)
                break
        else:
            active[slot] = active[-1]
            active.pop()
    return PointSet(np.array(pts), float(width), float(height), float(r_pd))


# -- Voronoi adjacency ------------------------------------------------------


def _clip(poly: list[tuple[np.ndarray, int]], a: np.ndarray, b: float, tag: int):
    """Clip a convex polygon to ``a . p <= b``.

    Vertices carry the tag of the edge that *leaves* them, so each edge of
    the result remembers which half-plane produced it.
    """
    out = []
    n = len(poly)
    for k in range(n):
        p, ptag = poly[k]
        q, _ = poly[(k + 1) % n]
        fp, fq = a @ p - b, a @ q - b
        if fp <= 0:
            out.append((p, ptag))
            if fq > 0:
                t = fp / (fp - fq)
                out.append((p + t * (q - p), tag))
        elif fq <= 0:
            t = fp / (fp - fq)
            out.append((p + t * (q - p), ptag))
    return out


@dataclass
class IrregularGrid:
    nodes: PointSet
    neighbors: list[np.ndarray]  # per node, neighbor indices (ascending)
    lengths: list[np.ndarray]  # shared Voronoi edge lengths, aligned with neighbors
    polygons: list[np.ndarray]  # clipped Voronoi cell of each node, (k, 2)
    state: np.ndarray = field(default=None)  # (n, C)
    gain: float = LAPLACIAN_GAIN

    def __post_init__(self):
        if self.state is None:
            self.state = np.zeros((len(self.nodes), 0))
        rows, cols, vals = [], [], []
        for i, (nb, ln) in enumerate(zip(self.neighbors, self.lengths)):
            if len(nb):
                rows.extend([i] * len(nb))
                cols.extend(nb.tolist())
                vals.extend((ln / ln.sum()).tolist())
        n = len(self.nodes)
        self.weights = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        self._adjacency = adj + sparse.identity(n, format="csr")

    def __len__(self) -> int:
        return len(self.nodes)

    def with_state(self, state: np.ndarray) -> "IrregularGrid":
        g = IrregularGrid(self.nodes, self.neighbors, self.lengths, self.polygons, state, self.gain)
        return g

    def node_weights(self, i: int) -> np.ndarray:
        return self.lengths[i] / self.lengths[i].sum()

    def to_json(self) -> dict:
        return {
            "width": self.nodes.width,
            "height": self.nodes.height,
            "min_distance": self.nodes.min_distance,
            "gain": self.gain,
            "nodes": [
                {
                    "x": float(x), "y": float(y),
                    "neighbors": [int(j) for j in nb],
                    "edge_lengths": [float(v) for v in ln],
                    "polygon": [[float(a), float(b)] for a, b in poly],
                }
                for (x, y), nb, ln, poly in zip(self.nodes.points, self.neighbors, self.lengths, self.polygons)
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "IrregularGrid":
        nodes = doc["nodes"]
        pts = PointSet(np.array([(n["x"], n["y"]) for n in nodes], dtype=float).reshape(-1, 2),
                       doc["width"], doc["height"], doc["min_distance"])
        return cls(pts,
                   [np.array(n["neighbors"], dtype=np.int64) for n in nodes],
                   [np.array(n["edge_lengths"], dtype=float) for n in nodes],
                   [np.array(n["polygon"], dtype=float).reshape(-1, 2) for n in nodes],
                   gain=doc.get("gain", LAPLACIAN_GAIN))


def build_voronoi_adjacency(points: PointSet, gain: float = LAPLACIAN_GAIN) -> IrregularGrid:
    """Voronoi cells clipped to the domain; neighbours share an edge longer than ``MIN_EDGE``.

    Each cell is the domain rectangle clipped by the bisectors towards its
    Delaunay neighbours (the Voronoi dual), which is exact for a convex domain.
    """
    pts = np.asarray(points.points, dtype=float)
    n = len(pts)
    if n < 3:
        raise ValueError("need at least 3 points")
    if np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9) < 2:
        raise ValueError("points are collinear")
    tri = Delaunay(pts)
    indptr, indices = tri.vertex_neighbor_vertices
    box = [np.array(v, float) for v in ((0, 0), (points.width, 0), (points.width, points.height),
                                         (0, points.height))]
    polygons, shared = [], {}
    for i in range(n):
        poly = [(v, -1) for v in box]
        for j in indices[indptr[i]:indptr[i + 1]]:
            a = pts[j] - pts[i]
            b = a @ (pts[j] + pts[i]) / 2.0
            poly = _clip(poly, a, b, int(j))
        m = len(poly)
        for k in range(m):
            p, tag = poly[k]
            if tag >= 0:
                length = float(np.linalg.norm(poly[(k + 1) % m][0] - p))
                key = (min(i, tag), max(i, tag))
                shared.setdefault(key, []).append(length)
        polygons.append(np.array([v for v, _ in poly]).reshape(-1, 2))
    nbrs: list[list[int]] = [[] for _ in range(n)]
    lens: list[list[float]] = [[] for _ in range(n)]
    for (i, j), ls in sorted(shared.items()):
        # each side measures the edge once; a missing side counts as zero
        length = sum(ls) / 2.0
        if length > MIN_EDGE:
            nbrs[i].append(j)
            lens[i].append(length)
            nbrs[j].append(i)
            lens[j].append(length)
    order = [np.argsort(nb) for nb in nbrs]
    neighbors = [np.array(nb, dtype=np.int64)[o] for nb, o in zip(nbrs, order)]
    lengths = [np.array(ln, dtype=float)[o] for ln, o in zip(lens, order)]
    return IrregularGrid(points, neighbors, lengths, polygons, np.zeros((n, 0)), gain)


# -- dynamics ---------------------------------------------------------------


def graph_laplacian(grid: IrregularGrid, state: np.ndarray | None = None) -> np.ndarray:
    """``gain * (weighted neighbour average - own state)``; isolated nodes get 0."""
    s = grid.state if state is None else state
    out = grid.weights @ s - s
    isolated = np.array([len(nb) == 0 for nb in grid.neighbors])
    out[isolated] = 0.0
    return grid.gain * out


def graph_alive_mask(grid: IrregularGrid, state: np.ndarray, threshold: float = ALIVE_THRESHOLD) -> np.ndarray:
    over = (state[:, ALPHA] > threshold).astype(np.float64)
    return (grid._adjacency @ over) > 0


def graph_nca_step(grid: IrregularGrid, params: RuleParams, rng: StepRng,
                   p_upd: float | None = None, synchronous: bool = False) -> IrregularGrid:
    """The square-grid step with the graph Laplacian as perception.

    Node ``i`` draws its update gate from stream 0, row 0, column ``i``.
    """
    s = grid.state
    if s.shape[-1] != params.channels:
        raise ValueError(f"graph state has {s.shape[-1]} channels, rule expects {params.channels}")
    p_upd = params.p_upd if p_upd is None else p_upd
    pre = graph_alive_mask(grid, s)
    perception = np.concatenate([s, graph_laplacian(grid, s)], axis=-1)
    delta = np.zeros_like(s)
    delta[pre] = rule_forward(perception[pre], params)
    if not synchronous:
        gate = rng.update_mask((1, len(s)), p_upd)[0]
        delta[~gate] = 0
    updated = s + delta
    keep = pre & graph_alive_mask(grid, updated)
    return grid.with_state(np.where(keep[:, None], updated, 0.0).astype(s.dtype))


def graph_rollout(grid: IrregularGrid, params: RuleParams, n_steps: int, rng: StepRng,
                  record_every: int | None = None):
    frames = [(0, grid.state)] if record_every else []
    g = grid
    for t in range(n_steps):
        g = graph_nca_step(g, params, rng.at(rng.counter + t))
        if record_every and ((t + 1) % record_every == 0 or t + 1 == n_steps):
            frames.append((t + 1, g.state))
    return g, frames


def seed_irregular(grid: IrregularGrid, seed: StructuredSeed | None = None, channels: int = 16,
                   scale: float = 1.0) -> IrregularGrid:
    """Write seed encodings onto the nodes nearest each seed point.

    Seed offsets are in square-grid cells, multiplied by ``scale`` plane
    units, measured from the domain center with ``dy`` pointing down (toward
    decreasing ``y``).  ``None`` places a single alpha-only seed.
    """
    pts = grid.nodes.points
    cx, cy = grid.nodes.width / 2.0, grid.nodes.height / 2.0
    if seed is None:
        placements = [((cx, cy), _alpha_only(channels))]
    else:
        channels = seed.channels
        placements = [((cx + p.dx * scale, cy - p.dy * scale), p.encoding) for p in seed.points]
    state = np.zeros((len(pts), channels))
    used = set()
    for (x, y), enc in placements:
        if not (0 <= x <= grid.nodes.width and 0 <= y <= grid.nodes.height):
            raise ValueError(f"seed point ({x:.2f}, {y:.2f}) is outside the domain")
        d2 = (pts[:, 0] - x) ** 2 + (pts[:, 1] - y) ** 2
        k = int(np.argmin(d2))  # argmin breaks ties by lowest index
        if k in used:
            raise ValueError(f"two seed points map to node {k}")
        used.add(k)
        state[k] = enc
    return grid.with_state(state)


def _alpha_only(channels: int) -> np.ndarray:
    enc = np.zeros(channels)
    enc[ALPHA] = 1.0
    return enc


# -- rendering --------------------------------------------------------------


def _node_colors(state: np.ndarray) -> np.ndarray:
    return np.round(np.clip(state[:, :4], 0, 1) * 255).astype(np.uint8)


def render_png(grid: IrregularGrid, path: str | Path, pixels_per_unit: float = 8.0,
               state: np.ndarray | None = None, show_centers: bool = False) -> None:
    """Fill each Voronoi polygon with its node's clamped RGBA (y axis up)."""
    from PIL import Image, ImageDraw

    s = grid.state if state is None else state
    w = max(1, int(round(grid.nodes.width * pixels_per_unit)))
    h = max(1, int(round(grid.nodes.height * pixels_per_unit)))
    img = Image.new("RGBA", (w, h), (0, 0, 0, 0))
    draw = ImageDraw.Draw(img)
    for poly, rgba in zip(grid.polygons, _node_colors(s)):
        if rgba[3] == 0 or len(poly) < 3:
            continue
        xy = [(x * pixels_per_unit, h - y * pixels_per_unit) for x, y in poly]
        draw.polygon(xy, fill=tuple(int(v) for v in rgba))
    if show_centers:
        for x, y in grid.nodes.points:
            px, py = x * pixels_per_unit, h - y * pixels_per_unit
            draw.point((px, py), fill=(0, 0, 0, 255))
    img.save(path)


def render_svg(grid: IrregularGrid, state: np.ndarray | None = None) -> str:
    s = grid.state if state is None else state
    h = grid.nodes.height
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {grid.nodes.width:g} {h:g}">']
    for poly, rgba in zip(grid.polygons, _node_colors(s)):
        if rgba[3] == 0 or len(poly) < 3:
            continue
        pts = " ".join(f"{x:.6g},{h - y:.6g}" for x, y in poly)
        parts.append(f'<polygon points="{pts}" fill="rgb({rgba[0]},{rgba[1]},{rgba[2]})" '
                     f'fill-opacity="{rgba[3] / 255:.4g}"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def save_graph_json(grid: IrregularGrid, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grid.to_json(), sort_keys=True))


def load_graph_json(path: str | Path) -> IrregularGrid:
    return IrregularGrid.from_json(json.loads(Path(path).read_text()))
