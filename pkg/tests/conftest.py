import numpy as np
import pytest

from isonca.rule import init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_params(channels=5, hidden=8, seed=0, w1_scale=0.1, dtype=np.float64):
    """Random rule with a non-zero output layer (fresh params are the identity)."""
    r = np.random.default_rng(seed)
    p = init_params(channels, hidden, r, dtype=dtype)
    p.b0 = r.normal(0, 0.1, hidden).astype(dtype)
    p.W1 = r.normal(0, w1_scale, (hidden, channels)).astype(dtype)
    return p


def d4_symmetric_grid(rng, size, channels):
    """Average of a random grid over all 8 square symmetries."""
    from isonca.grid import D4, d4_transform

    base = rng.normal(size=(size, size, channels))
    return sum(d4_transform(base, k, f) for k, f in D4) / 8.0


def bounded_params(channels=6, n_random=16, seed=0, decay=0.5, w1_scale=0.005, dtype=np.float64):
    """Random rule plus decay units that keep states bounded.

    Units ``relu(s_c)`` and ``relu(-s_c)`` feed back ``-decay * s_c`` and a
    bias unit pulls alpha toward 1, so long rollouts stay inside the
    fixed-point range while the living region keeps spreading.
    """
    from isonca.rule import RuleParams

    r = np.random.default_rng(seed)
    c = channels
    hidden = 2 * c + 1 + n_random
    W0 = np.zeros((2 * c, hidden))
    b0 = np.zeros(hidden)
    W1 = np.zeros((hidden, c))
    for ch in range(c):
        W0[ch, 2 * ch], W0[ch, 2 * ch + 1] = 1.0, -1.0
        W1[2 * ch, ch], W1[2 * ch + 1, ch] = -decay, decay
    b0[2 * c] = 1.0
    W1[2 * c, 3] = decay
    W0[:, 2 * c + 1:] = r.normal(0, 1 / np.sqrt(2 * c), (2 * c, n_random))
    b0[2 * c + 1:] = r.normal(0, 0.1, n_random)
    W1[2 * c + 1:] = r.normal(0, w1_scale, (n_random, c))
    return RuleParams(W0.astype(dtype), b0.astype(dtype), W1.astype(dtype))


def gradient_check(seed, h=1e-6, n_steps=None, size=6, channels=5, hidden=8):
    """Worst relative error of backprop gradients vs central differences.

    The finite-difference rollouts replay the alive masks and update gates of
    the analytic pass, so both see the same piecewise branch.
    """
    from isonca.invariant_loss import TargetSpec
    from isonca.rng import StepRng
    from isonca.trainer import backprop_rollout, fixed_loss_batch, forward_rollout

    r = np.random.default_rng(seed)
    params = small_params(channels, hidden, seed=seed, w1_scale=0.3)
    x0 = r.normal(0, 0.5, (1, size, size, channels))
    x0[0, ..., 3] = r.uniform(0, 1, (size, size)) * (r.uniform(size=(size, size)) < 0.6)
    target = TargetSpec(r.uniform(0, 1, (size, size, 4)), np.zeros((size, size, 0)))
    n = int(r.integers(1, 4)) if n_steps is None else n_steps
    step_rng = StepRng(seed)

    def loss_fn(states):
        losses, grad = fixed_loss_batch(states, target)
        return losses, grad, {}

    _, grads, _ = backprop_rollout(x0, params, n, step_rng, loss_fn)
    _, tape = forward_rollout(x0, params, n, step_rng)
    frozen = tape.frozen_masks()

    def loss_at(q):
        final, _ = forward_rollout(x0, q, n, step_rng, frozen=frozen, record=False)
        return fixed_loss_batch(final, target)[0].mean()

    worst = 0.0
    for k, name in enumerate(("W0", "b0", "W1")):
        for idx in np.ndindex(getattr(params, name).shape):
            plus, minus = params.copy(), params.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            fd = (loss_at(plus) - loss_at(minus)) / (2 * h)
            g = grads[k][idx]
            worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
    return worst


# Filled by tests/test_acceptance.py: (number, title, passed, seconds, detail).
_BLOB3_CACHE: dict = {}


def train_blob3_structured(out_dir, time_limit=840.0):
    """Train the desk-scale structured-seed rule on the 24x24 three-colour blob.

    Stops once the 20-step moving mean of the loss reaches a tenth of the
    first loss, or after ``time_limit`` seconds. The result is deterministic,
    so it is cached for reuse by later tests.
    """
    if "result" in _BLOB3_CACHE:
        return _BLOB3_CACHE["result"]
    import time

    from isonca import shapes
    from isonca.grid import init_structured_seed, make_uniform_circle_seed
    from isonca.invariant_loss import target_from_rgba
    from isonca.trainer import TrainConfig, train

    target = target_from_rgba(shapes.blob3(24), pad=0, premultiplied=False)
    seed = make_uniform_circle_seed(3, radius=5)
    seed_grid = init_structured_seed(24, 24, seed)
    start = time.perf_counter()
    losses = []

    def stop(state, metrics):
        losses.append(metrics["loss"])
        reached = len(losses) >= 20 and np.mean(losses[-20:]) <= 0.1 * losses[0]
        return reached or time.perf_counter() - start > time_limit

    state = train(TrainConfig(total_steps=2000), target, seed_grid, out_dir, stop=stop)
    result = {"state": state, "losses": losses, "seed": seed, "seed_grid": seed_grid, "target": target}
    if np.mean(losses[-20:]) <= 0.1 * losses[0]:
        _BLOB3_CACHE["result"] = result
    return result


ACCEPTANCE_RESULTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, secs, detail in sorted(ACCEPTANCE_RESULTS):
        line = f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title} ({secs:.1f} s)"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
