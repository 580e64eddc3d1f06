"""Backpropagation-through-time training with a persistence sample pool."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .grid import alive_mask
from .invariant_loss import PolarConfig, TargetSpec, invariant_loss
from .perception import laplacian_conv, perceive
from .rng import StepRng
from .rule import RuleParams, init_params, save_checkpoint

log = logging.getLogger(__name__)

STRATEGIES = ("structured_seed", "single_seed")


class NumericalCollapse(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass
class TrainConfig:
    strategy: str = "structured_seed"
    batch_size: int = 8
    pool_size: int = 256
    steps_range: tuple[int, int] = (48, 96)
    lr: float = 1e-3
    lr_decay_at: float = 0.7  # fraction of training after which lr is halved
    total_steps: int = 8000
    grad_norm: bool = True
    rng_seed: int = 0
    channels: int = 16
    hidden: int = 192
    p_upd: float = 0.5
    checkpoint_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        self.steps_range = tuple(int(v) for v in self.steps_range)
        n_min, n_max = self.steps_range
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if n_min < 1 or n_max < n_min:
            raise ValueError(f"invalid steps_range {self.steps_range}")
        if self.pool_size < self.batch_size:
            raise ValueError("pool_size must be >= batch_size")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> dict:
        d = asdict(self)
        d["steps_range"] = list(self.steps_range)
        return d

    def lr_at(self, step: int) -> float:
        return self.lr * (0.5 if step >= self.lr_decay_at * self.total_steps else 1.0)


# -- reverse-mode rollout ---------------------------------------------------


@dataclass
class _StepRecord:
    active: np.ndarray  # sample indices updated at this step
    cells: np.ndarray  # flat indices (into the active block) of pre-alive cells
    p: np.ndarray  # (n_cells, 2C) perception of those cells
    h: np.ndarray  # (n_cells, hidden) relu activations
    update: np.ndarray  # (n_cells, 1) stochastic update gate
    life: np.ndarray  # (n_active, H, W) combined alive mask


@dataclass
class GradientTape:
    """Forward intermediates of a batched rollout, replayed in reverse.

    Memory is O(steps * alive_cells * (2C + hidden)).
    """

    shape: tuple[int, ...]
    records: list[_StepRecord] = field(default_factory=list)
    overflowed: np.ndarray | None = None  # (B,) samples that produced a non-finite value

    def frozen_masks(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        return [(r.active, r.cells, r.life) for r in self.records]


def forward_rollout(x0: np.ndarray, params: RuleParams, n_steps, rng: StepRng,
                    frozen=None, record: bool = True) -> tuple[np.ndarray, GradientTape]:
    """Roll a ``(B, H, W, C)`` batch forward, sample ``b`` for ``n_steps[b]`` steps.

    Samples that have finished pass through unchanged.  ``frozen`` replays
    alive masks from an earlier tape instead of thresholding, which keeps
    finite-difference probes on the same piecewise branch.
    """
    x = np.array(x0)
    B, H, W, C = x.shape
    steps = np.broadcast_to(np.asarray(n_steps, dtype=np.int64), (B,))
    tape = GradientTape(x.shape, overflowed=np.zeros(B, bool))
    W0, b0, W1 = params.arrays()
    for t in range(int(steps.max(initial=0))):
        mask_all = rng.at(rng.counter + t).update_mask((B, H, W), params.p_upd)
        if frozen is not None:
            active, cells, life = frozen[t]
        else:
            active = np.flatnonzero(steps > t)
        xa = x[active]
        if frozen is None:
            cells = np.flatnonzero(alive_mask(xa))
        p = perceive(xa).reshape(-1, 2 * C)[cells]
        h = p @ W0
        h += b0
        np.maximum(h, 0, out=h)
        upd = mask_all[active].reshape(-1)[cells][:, None].astype(x.dtype)
        y = xa.reshape(-1, C).copy()
        y[cells] += upd * (h @ W1)
        y = y.reshape(xa.shape)
        # dead-cell masking can hide an overflow, so check before it
        tape.overflowed[active] |= ~np.isfinite(y.reshape(len(active), -1)).all(axis=1)
        if frozen is None:
            pre = np.zeros(xa.shape[:-1], bool)
            pre.reshape(-1)[cells] = True
            life = pre & alive_mask(y)
        x[active] = np.where(life[..., None], y, np.zeros((), y.dtype))
        if record:
            tape.records.append(_StepRecord(active, cells, p, h, upd, life))
    return x, tape


def backward_rollout(tape: GradientTape, params: RuleParams, grad_out: np.ndarray,
                     skip: np.ndarray | None = None):
    """Gradients of a scalar w.r.t. (W0, b0, W1, x0) given d(scalar)/d(final state).

    ``skip`` flags samples whose tape entries are ignored (e.g. ones that
    overflowed); their gradient contribution is zero.
    """
    W0, b0, W1 = params.arrays()
    C = params.channels
    gW0, gb0, gW1 = np.zeros_like(W0), np.zeros_like(b0), np.zeros_like(W1)
    g = np.array(grad_out, dtype=W0.dtype)
    if skip is not None:
        g[skip] = 0
    plane = int(np.prod(tape.shape[1:3]))
    for rec in reversed(tape.records):
        cells, p, h, upd = rec.cells, rec.p, rec.h, rec.update
        if skip is not None and skip[rec.active].any():
            keep = ~skip[rec.active][cells // plane]
            cells, p, h, upd = cells[keep], p[keep], h[keep], upd[keep]
        gy = g[rec.active] * rec.life[..., None]
        gd = gy.reshape(-1, C)[cells] * upd
        gW1 += h.T @ gd
        gz = gd @ W1.T
        gz[h <= 0] = 0
        gW0 += p.T @ gz
        gb0 += gz.sum(axis=0)
        gp = np.zeros(gy.shape[:-1] + (2 * C,), dtype=gy.dtype)
        gp.reshape(-1, 2 * C)[cells] = gz @ W0.T
        # the zero-padded Laplacian with a symmetric kernel is its own adjoint
        g[rec.active] = gy + gp[..., :C] + laplacian_conv(gp[..., C:])
    return (gW0, gb0, gW1), g


LossFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, dict]]
"""Maps final states ``(B, H, W, C)`` to (per-sample losses, d(sum of losses)/d(states), info)."""


def backprop_rollout(initial: np.ndarray, params: RuleParams, n_steps, rng: StepRng, loss_fn: LossFn):
    """Mean per-sample loss after the rollout, and its gradients for (W0, b0, W1).

    Update gates, alive masks and any alignment chosen inside ``loss_fn`` are
    constants of the forward pass.  Samples that overflowed at any step
    are left out of the mean and the gradient (``info["bad"]`` flags them);
    if every sample is affected the rollout has collapsed.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        final, tape = forward_rollout(initial, params, n_steps, rng)
    n = len(final)
    bad = tape.overflowed | ~np.all(np.isfinite(final.reshape(n, -1)), axis=1)
    if bad.all():
        raise NumericalCollapse(f"every sample overflowed within {len(tape.records)} steps")
    good = ~bad
    losses, grad_states, info = loss_fn(np.where(bad[:, None, None, None], 0, final))
    loss = float(np.mean(losses[good]))
    if not np.isfinite(loss):
        raise NumericalCollapse(f"non-finite loss {loss} (per-sample {losses.tolist()})")
    grads, _ = backward_rollout(tape, params, grad_states / good.sum(), bad if bad.any() else None)
    for name, gr in zip(("W0", "b0", "W1"), grads):
        if not np.all(np.isfinite(gr)):
            raise NumericalCollapse(f"non-finite gradient in {name} after {len(tape.records)} steps")
    info = dict(info, final=final, losses=losses, bad=bad)
    return loss, grads, info


# -- losses -----------------------------------------------------------------


def loss_fixed(state: np.ndarray, target: TargetSpec) -> float:
    """Weighted MSE of the compared channels at a fixed orientation (single grid)."""
    losses, _ = fixed_loss_batch(state[None], target)
    return float(losses[0])


def fixed_loss_batch(states: np.ndarray, target: TargetSpec):
    tgt = target.stacked()
    k = target.n_compared
    diff = states[..., :k].astype(np.float64) - tgt
    scale = target.weights / diff[0].size
    losses = np.sum(scale * diff * diff, axis=(1, 2, 3))
    grad = np.zeros(states.shape, dtype=states.dtype)
    grad[..., :k] = 2.0 * scale * diff
    return losses, grad


def make_loss_fn(strategy: str, target: TargetSpec, polar: PolarConfig | None = None) -> LossFn:
    if strategy == "structured_seed":
        def fixed(states):
            losses, grad = fixed_loss_batch(states, target)
            return losses, grad, {}
        return fixed

    def invariant(states):
        losses = np.zeros(len(states))
        grad = np.zeros(states.shape, dtype=states.dtype)
        bins = []
        for i, s in enumerate(states):
            if not np.all(np.isfinite(s[..., :target.n_compared])):
                losses[i] = np.inf
                bins.append(-1)
                continue
            losses[i], _, prof, g = invariant_loss(s, target, polar, return_grad=True)
            grad[i] = g
            bins.append(prof.theta_bin)
        return losses, grad, {"theta_bins": bins}
    return invariant


def sample_losses(states: np.ndarray, loss_fn: LossFn) -> np.ndarray:
    return np.asarray(loss_fn(states)[0])


# -- optimizer and pool -----------------------------------------------------


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def update(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def normalize_gradients(grads):
    return tuple(g / (np.linalg.norm(g) + 1e-8) for g in grads)


@dataclass
class SamplePool:
    states: np.ndarray  # (N, H, W, C)
    seed: np.ndarray  # (H, W, C)
    ages: np.ndarray = None

    def __post_init__(self):
        if self.ages is None:
            self.ages = np.zeros(len(self.states), dtype=np.int64)
        if self.states.shape[1:] != self.seed.shape:
            raise ValueError("pool entries must match the seed grid")

    @classmethod
    def filled(cls, seed: np.ndarray, size: int) -> "SamplePool":
        return cls(np.repeat(seed[None], size, axis=0).copy(), seed.copy())

    def reseed(self, idx) -> None:
        self.states[idx] = self.seed
        self.ages[idx] = 0


# -- training loop ----------------------------------------------------------


@dataclass
class TrainState:
    params: RuleParams
    pool: SamplePool
    opt: Adam
    rng: np.random.Generator
    step: int = 0


def new_train_state(config: TrainConfig, seed_grid: np.ndarray) -> TrainState:
    rng = np.random.default_rng(config.rng_seed)
    params = init_params(config.channels, config.hidden, rng, config.p_upd)
    pool = SamplePool.filled(seed_grid.astype(np.float32), config.pool_size)
    return TrainState(params, pool, Adam(), rng)


def train_step(state: TrainState, config: TrainConfig, loss_fn: LossFn) -> dict:
    """One optimizer update; mutates ``state`` and returns the step's metrics."""
    rng, pool = state.rng, state.pool
    idx = np.sort(rng.choice(len(pool.states), config.batch_size, replace=False))
    batch = pool.states[idx].copy()
    worst = int(np.argmax(sample_losses(batch, loss_fn)))
    batch[worst] = pool.seed
    resets = 1
    n_min, n_max = config.steps_range
    n_steps = rng.integers(n_min, n_max + 1, size=config.batch_size)
    step_rng = StepRng(seed=int(rng.integers(0, 2 ** 63)))

    loss, grads, info = backprop_rollout(batch, state.params, n_steps, step_rng, loss_fn)
    if config.grad_norm:
        grads = normalize_gradients(grads)
    state.opt.update(list(state.params.arrays()), list(grads), config.lr_at(state.step))

    final, bad = info["final"], info["bad"]
    final[bad] = pool.seed
    resets += int(np.count_nonzero(bad))
    pool.states[idx] = final
    pool.ages[idx] += n_steps
    pool.ages[idx[worst]] = n_steps[worst]
    pool.ages[idx[bad]] = 0
    state.step += 1

    metrics = {"step": state.step, "loss": loss, "pool_resets": resets, "theta_star_bin": ""}
    bins = [b for b, skipped in zip(info.get("theta_bins", []), bad) if b >= 0 and not skipped]
    if bins:
        counts = Counter(bins)
        top = max(counts.values())
        metrics["theta_star_bin"] = min(b for b, c in counts.items() if c == top)
    return metrics


METRICS_HEADER = ["step", "loss", "pool_resets", "theta_star_bin"]


def train(config: TrainConfig, target: TargetSpec, seed_grid: np.ndarray, out_dir: str | Path,
          polar: PolarConfig | None = None, progress: Callable[[dict], None] | None = None,
          stop: Callable[[TrainState, dict], bool] | None = None, meta: dict | None = None) -> TrainState:
    """Train from scratch, writing ``ckpt_XXXXXX.bin`` files and ``metrics.csv`` to ``out_dir``.

    ``stop`` is polled after every step; returning True ends training early
    (the learning-rate schedule still follows ``config.total_steps``).
    ``meta`` is stored in every checkpoint header next to the step number.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if seed_grid.shape[:2] != target.shape:
        raise ValueError(f"seed grid {seed_grid.shape[:2]} and target {target.shape} differ in size")
    if seed_grid.shape[-1] != config.channels or config.channels < target.n_compared:
        raise ValueError("channel count does not fit the seed grid or target")
    loss_fn = make_loss_fn(config.strategy, target, polar)
    state = new_train_state(config, seed_grid)

    def checkpoint():
        save_checkpoint(state.params, out / f"ckpt_{state.step:06d}.bin",
                        {**(meta or {}), "step": state.step, "strategy": config.strategy})

    checkpoint()
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
        for _ in range(config.total_steps):
            m = train_step(state, config, loss_fn)
            writer.writerow({**m, "loss": repr(m["loss"])})
            if progress and (state.step % config.log_every == 0 or state.step == config.total_steps):
                progress(m)
            done = bool(stop and stop(state, m))
            if done or state.step % config.checkpoint_every == 0 or state.step == config.total_steps:
                checkpoint()
            if done:
                break
    (out / "train_config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))
    return state

