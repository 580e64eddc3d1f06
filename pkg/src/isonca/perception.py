"""Isotropic perception: cell state plus per-channel 3x3 Laplacian."""

from __future__ import annotations

import numpy as np

LAPLACIAN = np.array([[1, 2, 1],
                      [2, -12, 2],
                      [1, 2, 1]], dtype=np.int64)
FRAC_BITS = 16


def _padded(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-3:-1]
    xp = np.zeros(x.shape[:-3] + (h + 2, w + 2, x.shape[-1]), dtype=x.dtype)
    xp[..., 1:-1, 1:-1, :] = x
    return xp


def _laplacian(x: np.ndarray) -> np.ndarray:
    # K = [1,2,1]^T [1,2,1] - 16 * identity: a vertical pass, a horizontal
    # pass, then the center correction, always in this order.
    xp = _padded(x)
    v = xp[..., :-2, :, :] + xp[..., 2:, :, :]
    v += 2 * xp[..., 1:-1, :, :]
    out = v[..., :, :-2, :] + v[..., :, 2:, :]
    out += 2 * v[..., :, 1:-1, :]
    out -= 16 * x
    return out


def laplacian_conv(grid: np.ndarray) -> np.ndarray:
    """Per-channel Laplacian of an ``(..., H, W, C)`` grid, zero padded.

    The evaluation order is fixed (separable passes), so a given platform is
    reproducible, but float addition is not associative: a D4-transformed
    input can differ from the transformed output in the last bits.
    """
    return _laplacian(grid)


def max_fixed_point_magnitude(frac_bits: int = FRAC_BITS) -> float:
    return float(2 ** (31 - frac_bits - 4))


def quantize(grid: np.ndarray, frac_bits: int = FRAC_BITS) -> np.ndarray:
    limit = max_fixed_point_magnitude(frac_bits)
    peak = float(np.max(np.abs(grid))) if grid.size else 0.0
    if not np.isfinite(peak) or peak >= limit:
        raise OverflowError(
            f"state magnitude {peak:g} exceeds fixed-point limit {limit:g} at {frac_bits} fractional bits")
    return np.rint(np.asarray(grid, dtype=np.float64) * (1 << frac_bits)).astype(np.int64)


def laplacian_conv_fixed_point(grid: np.ndarray, frac_bits: int = FRAC_BITS) -> np.ndarray:
    """Laplacian with states quantized to ``frac_bits`` and integer accumulation.

    Integer sums are exactly associative, so the result does not depend on
    tap order and commutes bitwise with every symmetry of the square.
    """
    acc = _laplacian(quantize(grid, frac_bits))
    return (acc.astype(np.float64) / (1 << frac_bits)).astype(grid.dtype)


def perceive(grid: np.ndarray, fixed_point: bool = False, frac_bits: int = FRAC_BITS) -> np.ndarray:
    """``(..., H, W, 2C)`` field: state channels then their Laplacians."""
    if fixed_point:
        lap = laplacian_conv_fixed_point(grid, frac_bits)
    else:
        lap = laplacian_conv(grid)
    return np.concatenate([grid, lap], axis=-1)
