"""The learned update rule, stepping, rollouts and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import alive_mask, apply_alive_masking
from .perception import FRAC_BITS, perceive
from .rng import StepRng

DEFAULT_HIDDEN = 192
DEFAULT_P_UPD = 0.5


@dataclass
class RuleParams:
    W0: np.ndarray  # (2C, hidden)
    b0: np.ndarray  # (hidden,)
    W1: np.ndarray  # (hidden, C)
    p_upd: float = DEFAULT_P_UPD
    frac_bits: int | None = None

    def __post_init__(self):
        two_c, hidden = self.W0.shape
        if two_c % 2 or self.b0.shape != (hidden,) or self.W1.shape != (hidden, two_c // 2):
            raise ValueError(
                f"inconsistent parameter shapes W0{self.W0.shape} b0{self.b0.shape} W1{self.W1.shape}")

    @property
    def channels(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_params(self) -> int:
        return self.W0.size + self.b0.size + self.W1.size

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.W0, self.b0, self.W1

    def astype(self, dtype) -> "RuleParams":
        return RuleParams(self.W0.astype(dtype), self.b0.astype(dtype), self.W1.astype(dtype),
                          self.p_upd, self.frac_bits)

    def copy(self) -> "RuleParams":
        return self.astype(self.W0.dtype)


def param_count(channels: int, hidden: int) -> int:
    return 2 * channels * hidden + hidden + hidden * channels


def init_params(channels: int = 16, hidden: int = DEFAULT_HIDDEN, rng=None,
                p_upd: float = DEFAULT_P_UPD, dtype=np.float32) -> RuleParams:
    """Variance-scaled W0, zero b0 and zero W1 (the initial rule changes nothing)."""
    rng = np.random.default_rng(rng)
    W0 = rng.normal(0.0, 1.0 / np.sqrt(2 * channels), size=(2 * channels, hidden))
    return RuleParams(W0.astype(dtype), np.zeros(hidden, dtype), np.zeros((hidden, channels), dtype), p_upd)


def _matmul_fixed_order(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> np.ndarray:
    # Elementwise multiply-adds in a fixed k order: every cell sees the same
    # rounding sequence regardless of its position in the array.
    for k in range(b.shape[0]):
        out += a[..., k:k + 1] * b[k]
    return out


def hidden_activations(perception: np.ndarray, params: RuleParams, fixed_order: bool = False) -> np.ndarray:
    if perception.shape[-1] != params.W0.shape[0]:
        raise ValueError(f"perception has {perception.shape[-1]} channels, rule expects {params.W0.shape[0]}")
    if fixed_order:
        z = _matmul_fixed_order(perception, params.W0,
                                np.broadcast_to(params.b0, perception.shape[:-1] + params.b0.shape).copy())
    else:
        z = perception @ params.W0 + params.b0
    return np.maximum(z, 0, out=z)


def rule_forward(perception: np.ndarray, params: RuleParams, fixed_order: bool = False) -> np.ndarray:
    """Per-cell state increment ``relu(p @ W0 + b0) @ W1``."""
    h = hidden_activations(perception, params, fixed_order)
    if fixed_order:
        return _matmul_fixed_order(h, params.W1, np.zeros(h.shape[:-1] + (params.channels,), h.dtype))
    return h @ params.W1


def nca_step(grid: np.ndarray, params: RuleParams, rng: StepRng, synchronous: bool = False,
             fixed_point: bool = False) -> np.ndarray:
    """One CA step on an ``(..., H, W, C)`` grid, using ``rng.counter`` as the step index.

    Fixed-point mode quantizes the Laplacian and evaluates the network with
    fixed-order accumulation, so the step commutes exactly with grid
    rotations and reflections.
    """
    if grid.shape[-1] != params.channels:
        raise ValueError(f"grid has {grid.shape[-1]} channels, rule expects {params.channels}")
    frac_bits = params.frac_bits or FRAC_BITS
    C = params.channels
    pre = alive_mask(grid)
    cells = np.flatnonzero(pre)
    p = perceive(grid, fixed_point, frac_bits).reshape(-1, 2 * C)[cells]
    # cells outside the pre-step alive mask are zeroed anyway, so skip them
    delta = np.zeros(grid.shape, dtype=grid.dtype)
    delta.reshape(-1, C)[cells] = rule_forward(p, params, fixed_order=fixed_point)
    if synchronous:
        updated = grid + delta
    else:
        m = rng.update_mask(grid.shape[:-1], params.p_upd)
        updated = grid + np.where(m[..., None], delta, np.zeros((), delta.dtype))
    return apply_alive_masking(pre, alive_mask(updated), updated)


def rollout(grid: np.ndarray, params: RuleParams, n_steps: int, rng: StepRng,
            record_every: int | None = None, synchronous: bool = False, fixed_point: bool = False,
            callback=None):
    """Run ``n_steps`` steps with counters ``rng.counter, rng.counter + 1, ...``.

    Returns ``(final_grid, frames)``; frames holds ``(step, grid)`` pairs at
    multiples of ``record_every`` (step 0 and the last step included), or is
    empty when no stride is given.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    frames = []
    if record_every:
        frames.append((0, grid))
    x = grid
    for t in range(n_steps):
        x = nca_step(x, params, rng.at(rng.counter + t), synchronous, fixed_point)
        if callback is not None:
            callback(t + 1, x)
        if record_every and ((t + 1) % record_every == 0 or t + 1 == n_steps):
            frames.append((t + 1, x))
    return x, frames


# -- checkpoints ------------------------------------------------------------

MAGIC = b"ISONCA1\n"


def save_checkpoint(params: RuleParams, path: str | Path, extra: dict | None = None) -> None:
    """Binary layout: magic, u32 LE header length, JSON header, f32 LE blob (W0, b0, W1)."""
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays())
    header = {
        "channels": params.channels,
        "hidden": params.hidden,
        "p_upd": params.p_upd,
        "frac_bits": params.frac_bits,
        "n_floats": params.n_params,
        "byte_length": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        header["meta"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(hbytes)) + hbytes + blob)


def read_checkpoint_header(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not an isonca checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(raw[start:start + hlen])
    return header, raw[start + hlen:]


def load_checkpoint(path: str | Path, dtype=np.float32) -> RuleParams:
    header, blob = read_checkpoint_header(path)
    if len(blob) != header["byte_length"]:
        raise ValueError(f"{path}: truncated blob ({len(blob)} of {header['byte_length']} bytes)")
    if hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    c, h = header["channels"], header["hidden"]
    if header["n_floats"] != param_count(c, h):
        raise ValueError(f"{path}: header sizes disagree")
    flat = np.frombuffer(blob, dtype="<f4").astype(dtype)
    W0 = flat[:2 * c * h].reshape(2 * c, h)
    b0 = flat[2 * c * h:2 * c * h + h]
    W1 = flat[2 * c * h + h:].reshape(h, c)
    return RuleParams(W0.copy(), b0.copy(), W1.copy(), header["p_upd"], header["frac_bits"])
