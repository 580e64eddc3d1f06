"""Counter-based random numbers for stochastic cell updates.

Every draw is a pure hash of ``(seed, stream, step, row, col)`` so update
masks do not depend on evaluation order or on how work is split up.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64) + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def hash_uniform(*keys) -> np.ndarray:
    """Uniform [0, 1) doubles from integer keys (broadcast together)."""
    with np.errstate(over="ignore"):
        h = np.zeros(np.broadcast_shapes(*(np.shape(k) for k in keys)), dtype=np.uint64)
        for k in keys:
            h = splitmix64(h ^ np.asarray(k).astype(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class StepRng:
    """Seed plus step counter; ``rot90``/``flip`` re-express masks in a transformed frame.

    With a transform set, the mask for a grid is the D4-transformed mask of
    the untransformed grid, which lets a rotated run replay the exact
    stochastic schedule of the original one.
    """

    seed: int = 0
    counter: int = 0
    rot90: int = 0
    flip: bool = False

    def at(self, counter: int) -> "StepRng":
        return replace(self, counter=counter)

    def advanced(self, n: int = 1) -> "StepRng":
        return replace(self, counter=self.counter + n)

    def uniform(self, shape: tuple[int, ...]) -> np.ndarray:
        """Uniforms for an ``(..., H, W)`` block; leading axes index independent streams."""
        *lead, h, w = shape
        if self.rot90 % 2:
            h, w = w, h
        n_streams = int(np.prod(lead)) if lead else 1
        stream = np.arange(n_streams, dtype=np.uint64)[:, None, None]
        rows = np.arange(h, dtype=np.uint64)[None, :, None]
        cols = np.arange(w, dtype=np.uint64)[None, None, :]
        with np.errstate(over="ignore"):
            u = hash_uniform(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF), stream,
                             np.uint64(self.counter), rows, cols)
        if self.flip:
            u = u[:, :, ::-1]
        u = np.rot90(u, k=self.rot90, axes=(1, 2))
        return np.ascontiguousarray(u).reshape(shape)

    def update_mask(self, shape: tuple[int, ...], p_upd: float) -> np.ndarray:
        return self.uniform(shape) < p_upd
