"""``isonca`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical collapse, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .grid import (
    SeedEdit, StructuredSeed, init_single_seed, init_structured_seed, make_uniform_circle_seed,
    mutate_seed, save_png,
)
from .invariant_loss import PolarConfig, load_target_config, matching_profile, spurious_rotation_minimum
from .irregular import (
    build_voronoi_adjacency, graph_rollout, poisson_disk_sample, render_png, render_svg, save_graph_json,
    seed_irregular,
)
from .rng import StepRng
from .rule import load_checkpoint, read_checkpoint_header, rollout
from .trainer import NumericalCollapse, TrainConfig, train

log = logging.getLogger("isonca")

EXIT_OK, EXIT_CONFIG, EXIT_COLLAPSE, EXIT_IO = 0, 2, 3, 4

# below this relative self-match loss away from 0 degrees a target is easy to
# learn in the wrong orientation (the lizard without aux scores about 0.13)
SPURIOUS_MINIMUM_WARNING = 0.2


class ConfigError(Exception):
    pass


class IOFailure(Exception):
    pass


# -- helpers ----------------------------------------------------------------


def _read_json(path: str | Path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from None


def _load_params(path: str | Path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise IOFailure(f"bad checkpoint {path}: {exc}") from None


def _checkpoint_meta(path: str | Path) -> dict:
    try:
        return read_checkpoint_header(path)[0].get("meta", {})
    except (OSError, ValueError):
        return {}


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 48x48, got {text!r}") from None
    if h < 3 or w < 3:
        raise argparse.ArgumentTypeError("grid must be at least 3x3")
    return h, w


def _seed_from_doc(doc: dict | None, channels: int) -> StructuredSeed | None:
    """``None``/``{"kind": "single"}``, ``{"kind": "circle", ...}`` or a structured-seed document."""
    if not doc or doc.get("kind") == "single":
        return None
    if doc.get("kind") == "circle":
        return make_uniform_circle_seed(int(doc.get("n_points", 3)), float(doc.get("radius", 8.0)),
                                        float(doc.get("phase_deg", 90.0)), channels)
    if "points" in doc:
        return StructuredSeed.from_json({**doc, "channels": channels})
    raise ConfigError(f"unrecognised seed document: {doc}")


def _seed_grid(size: tuple[int, int], seed: StructuredSeed | None, channels: int) -> np.ndarray:
    if seed is None:
        return init_single_seed(*size, channels=channels)
    return init_structured_seed(*size, seed, channels=channels)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _write_manifest(out: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    recorded = {k: v for k, v in vars(args).items() if k not in ("func",) and v is not None}
    config_bytes = b""
    if getattr(args, "config", None):
        try:
            config_bytes = Path(args.config).read_bytes()
        except OSError:
            pass
    manifest = {
        "command": args.command,
        "args": recorded,
        "config_digest": hashlib.sha256(config_bytes).hexdigest() if config_bytes else _digest(recorded),
        "rng_seed": getattr(args, "rng_seed", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "output_dir": str(out),
        "frame_stride": getattr(args, "stride", None),
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create output directory {out}: {exc}") from None
    return out


def _export_frames(frames, out: Path, scale: int, dump_states: bool, gif: bool) -> list[str]:
    names = []
    for step, grid in frames:
        name = f"frame_{step:06d}.png"
        save_png(grid, out / name, scale)
        names.append(name)
    if dump_states and frames:
        np.savez_compressed(out / "states.npz", steps=np.array([s for s, _ in frames]),
                            states=np.stack([g for _, g in frames]).astype(np.float32))
    if gif and names:
        from PIL import Image

        imgs = [Image.open(out / n).convert("RGBA") for n in names]
        imgs[0].save(out / "frames.gif", save_all=True, append_images=imgs[1:], duration=60, loop=0,
                     disposal=2)
    return names


# -- commands ---------------------------------------------------------------


def load_train_config(path: str | Path):
    """Training file: ``{"target": {...} | "target.json", "seed": {...}, "train": {...}}``."""
    path = Path(path)
    doc = _read_json(path, "config")
    if "target" not in doc:
        raise ConfigError(f"{path}: missing 'target'")
    try:
        train_cfg = TrainConfig.from_json(doc.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    target_doc = doc["target"]
    base = path.parent
    if isinstance(target_doc, str):
        target_path = base / target_doc
        target_doc = _read_json(target_path, "target config")
        base = target_path.parent
    try:
        target, polar = load_target_config(target_doc, base)
    except FileNotFoundError as exc:
        raise ConfigError(f"target image not found: {exc.filename}") from None
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid target: {exc}") from None
    seed_doc = doc.get("seed")
    if seed_doc is None and train_cfg.strategy == "structured_seed":
        seed_doc = {"kind": "circle"}
    if isinstance(seed_doc, str):
        seed_doc = _read_json(base / seed_doc, "seed file")
    seed = _seed_from_doc(seed_doc, train_cfg.channels)
    return train_cfg, target, polar, seed, seed_doc


def cmd_train(args) -> int:
    cfg, target, polar, seed, seed_doc = load_train_config(args.config)
    if args.rng_seed is not None:
        cfg.rng_seed = args.rng_seed
    if args.total_steps is not None:
        cfg.total_steps = args.total_steps
    try:
        grid = _seed_grid(target.shape, seed, cfg.channels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.strategy == "single_seed" and target.n_aux == 0:
        angle, rel = spurious_rotation_minimum(target.stacked(), polar)
        if rel < SPURIOUS_MINIMUM_WARNING:
            log.warning("target nearly matches itself rotated by %.0f degrees (relative loss %.3f); "
                        "single-seed training may settle in that orientation, consider adding a "
                        "'binary' aux channel", angle, rel)
    out = _out_dir(args.out)

    def progress(m):
        print(f"step {m['step']:6d}  loss {m['loss']:.6f}  resets {m['pool_resets']}"
              + (f"  theta_bin {m['theta_star_bin']}" if m["theta_star_bin"] != "" else ""), flush=True)

    meta = {"grid": list(target.shape), "seed": seed.to_json() if seed else {"kind": "single"}}
    try:
        state = train(cfg, target, grid, out, polar=polar, progress=progress, meta=meta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _write_manifest(out, args, {"train_config": cfg.to_json(), "final_step": state.step})
    return EXIT_OK


def _resolve_run_inputs(args, params):
    meta = _checkpoint_meta(args.checkpoint)
    size = args.size or tuple(meta.get("grid", (49, 49)))
    if args.seed_file:
        seed = _seed_from_doc(_read_json(args.seed_file, "seed file"), params.channels)
    elif args.single_seed:
        seed = None
    else:
        seed = _seed_from_doc(meta.get("seed"), params.channels)
    return tuple(size), seed


def _rollout_to_frames(args, params, size, seed, out: Path) -> dict:
    k = (args.rotate // 90) % 4
    if args.rotate % 90:
        raise ConfigError("--rotate must be a multiple of 90 degrees")
    if seed is not None and (k or args.reflect):
        seed = seed.transformed(k, args.reflect)
    try:
        grid = _seed_grid(size, seed, params.channels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.fixed_point:
        grid = grid.astype(np.float64)
    rng = StepRng(args.rng_seed or 0)
    if args.rotate_rng:
        rng = StepRng(rng.seed, rng.counter, rot90=k, flip=args.reflect)
    try:
        _, frames = rollout(grid, params, args.steps, rng, record_every=args.stride or args.steps or 1,
                            synchronous=args.synchronous, fixed_point=args.fixed_point)
    except OverflowError as exc:
        raise NumericalCollapse(str(exc)) from None
    if not np.all(np.isfinite(frames[-1][1])):
        raise NumericalCollapse(f"non-finite state by step {frames[-1][0]}")
    names = _export_frames(frames, out, args.scale, args.dump_states, args.gif)
    return {"frames": names, "grid": list(size)}


def cmd_run(args) -> int:
    params = _load_params(args.checkpoint)
    size, seed = _resolve_run_inputs(args, params)
    out = _out_dir(args.out)
    extra = _rollout_to_frames(args, params, size, seed, out)
    if seed is not None:
        (out / "seed.json").write_text(json.dumps(seed.to_json(), indent=2))
    _write_manifest(out, args, extra)
    print(f"wrote {len(extra['frames'])} frames to {out}")
    return EXIT_OK


def _parse_edits(text: str) -> list[SeedEdit]:
    doc = _read_json(text, "edit file") if Path(text).suffix == ".json" and Path(text).exists() else None
    if doc is None:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--edits is neither a JSON file nor JSON text: {exc}") from None
    if isinstance(doc, dict):
        doc = doc.get("edits", [])
    try:
        return [SeedEdit(**e) for e in doc]
    except TypeError as exc:
        raise ConfigError(f"invalid edit: {exc}") from None


def cmd_mutate_seed(args) -> int:
    params = _load_params(args.checkpoint)
    size, seed = _resolve_run_inputs(args, params)
    if seed is None:
        raise ConfigError("mutate-seed needs a structured seed (--seed-file or a structured checkpoint)")
    try:
        mutated = mutate_seed(seed, _parse_edits(args.edits))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args.out)
    (out / "seed.json").write_text(json.dumps(mutated.to_json(), indent=2))
    extra = _rollout_to_frames(args, params, size, mutated, out)
    _write_manifest(out, args, extra)
    print(f"wrote {len(extra['frames'])} frames to {out}")
    return EXIT_OK


def _load_image(path: str) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        img = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise ConfigError(f"image not found: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise ConfigError(f"cannot decode {path}: {exc}") from None
    img[..., :3] *= img[..., 3:]
    return img


def cmd_polar_debug(args) -> int:
    a, b = _load_image(args.image_a), _load_image(args.image_b)
    if a.shape != b.shape:
        raise ConfigError(f"images differ in size: {a.shape[:2]} vs {b.shape[:2]}")
    cfg = PolarConfig(n_theta=args.n_theta)
    try:
        prof = matching_profile(a, b, cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args.out)
    lines = ["bin,degrees,original,reflected"]
    for k in range(cfg.n_theta):
        lines.append(f"{k},{360.0 * k / cfg.n_theta!r},{prof.losses[0, k]!r},{prof.losses[1, k]!r}")
    (out / "polar_profile.csv").write_text("\n".join(lines) + "\n")
    summary = {"theta_bin": prof.theta_bin, "theta_deg": 360.0 * prof.theta_bin / cfg.n_theta,
               "reflected": prof.reflected, "min_loss": prof.min_value}
    _write_manifest(out, args, summary)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_voronoi_run(args) -> int:
    params = _load_params(args.checkpoint)
    width, height = args.domain
    try:
        points = poisson_disk_sample(width, height, args.r_pd, rng=args.rng_seed or 0)
        graph = build_voronoi_adjacency(points, gain=args.gain)
    except ValueError as exc:
        raise ConfigError(f"cannot build grid: {exc}") from None
    seed = None
    if args.seed_file:
        seed = _seed_from_doc(_read_json(args.seed_file, "seed file"), params.channels)
    elif not args.single_seed:
        seed = _seed_from_doc(_checkpoint_meta(args.checkpoint).get("seed"), params.channels)
    try:
        graph = seed_irregular(graph, seed, channels=params.channels, scale=args.seed_scale)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args.out)
    save_graph_json(graph, out / "graph.json")
    final, frames = graph_rollout(graph, params, args.steps, StepRng(args.rng_seed or 0),
                                  record_every=args.stride or args.steps or 1)
    if not np.all(np.isfinite(final.state)):
        raise NumericalCollapse("non-finite node state")
    names = []
    for step, state in frames:
        name = f"frame_{step:06d}.png"
        render_png(graph, out / name, args.pixels_per_unit, state=state)
        names.append(name)
    (out / "final.svg").write_text(render_svg(final))
    _write_manifest(out, args, {"frames": names, "nodes": len(graph)})
    print(f"{len(graph)} nodes, wrote {len(names)} frames to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        header, blob = read_checkpoint_header(args.checkpoint)
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {args.checkpoint}: {exc}") from None
    except (ValueError, json.JSONDecodeError) as exc:
        raise IOFailure(str(exc)) from None
    header["blob_ok"] = (len(blob) == header.get("byte_length")
                         and hashlib.sha256(blob).hexdigest() == header.get("sha256"))
    print(json.dumps(header, indent=2, sort_keys=True))
    return EXIT_OK if header["blob_ok"] else EXIT_IO


def cmd_replay(args) -> int:
    """Re-run the command recorded in a manifest, optionally into a new folder."""
    manifest = _read_json(args.manifest, "manifest")
    recorded = dict(manifest["args"])
    if args.out:
        recorded["out"] = args.out
    ns = build_parser().parse_args([recorded["command"]] + _args_to_argv(recorded))
    return ns.func(ns)


def _args_to_argv(recorded: dict) -> list[str]:
    argv = []
    for key, value in recorded.items():
        if key in ("command", "threads", "verbose"):
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        elif value is False:
            continue
        elif isinstance(value, (list, tuple)):
            if key == "size":
                argv += [flag, "x".join(str(v) for v in value)]
            else:
                argv += [flag, *map(str, value)]
        else:
            argv += [flag, str(value)]
    return argv


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--rng-seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None,
                        help="cap on library threads (env ISONCA_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    rollout_opts = argparse.ArgumentParser(add_help=False)
    rollout_opts.add_argument("--checkpoint", required=True)
    rollout_opts.add_argument("--steps", type=int, default=200)
    rollout_opts.add_argument("--stride", type=int, default=None, help="frame stride (default: last frame only)")
    rollout_opts.add_argument("--size", type=_parse_size, default=None, help="grid HxW (default: from checkpoint)")
    rollout_opts.add_argument("--seed-file", default=None, help="structured seed JSON")
    rollout_opts.add_argument("--single-seed", action="store_true", help="ignore the checkpoint's seed")
    rollout_opts.add_argument("--synchronous", action="store_true", help="update every cell each step")
    rollout_opts.add_argument("--fixed-point", action="store_true", help="exact integer Laplacian")
    rollout_opts.add_argument("--rotate", type=int, default=0, help="rotate the seed (multiple of 90 degrees)")
    rollout_opts.add_argument("--reflect", action="store_true", help="mirror the seed left-right")
    rollout_opts.add_argument("--rotate-rng", action="store_true",
                              help="rotate the update masks along with the seed")
    rollout_opts.add_argument("--scale", type=int, default=4, help="pixels per cell in frames")
    rollout_opts.add_argument("--dump-states", action="store_true", help="also save states.npz")
    rollout_opts.add_argument("--gif", action="store_true", help="assemble frames.gif")

    p = argparse.ArgumentParser(prog="isonca", description="Isotropic neural cellular automata")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a rule from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--total-steps", type=int, default=None, help="override train.total_steps")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", parents=[common, rollout_opts], help="roll out a checkpoint to PNG frames")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("mutate-seed", parents=[common, rollout_opts], help="edit a structured seed and roll out")
    m.add_argument("--edits", required=True, help="JSON list of edits, or a .json file holding one")
    m.set_defaults(func=cmd_mutate_seed)

    d = sub.add_parser("polar-debug", parents=[common], help="rotation/reflection loss profile of two images")
    d.add_argument("--image-a", required=True)
    d.add_argument("--image-b", required=True)
    d.add_argument("--n-theta", type=int, default=256)
    d.set_defaults(func=cmd_polar_debug)

    v = sub.add_parser("voronoi-run", parents=[common], help="run a checkpoint on a Voronoi grid")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--r-pd", type=float, default=1.0, help="Poisson-disk radius (plane units)")
    v.add_argument("--domain", type=float, nargs=2, default=(48.0, 48.0), metavar=("W", "H"))
    v.add_argument("--steps", type=int, default=200)
    v.add_argument("--stride", type=int, default=None)
    v.add_argument("--gain", type=float, default=12.0, help="Laplacian gain (1 = unscaled)")
    v.add_argument("--seed-file", default=None)
    v.add_argument("--single-seed", action="store_true")
    v.add_argument("--seed-scale", type=float, default=1.0, help="plane units per seed offset cell")
    v.add_argument("--pixels-per-unit", type=float, default=8.0)
    v.set_defaults(func=cmd_voronoi_run)

    i = sub.add_parser("inspect", help="print checkpoint metadata")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)

    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest.json")
    rp.add_argument("manifest")
    rp.add_argument("--out", default=None, help="write to this folder instead of the recorded one")
    rp.set_defaults(func=cmd_replay)
    return p


def _thread_limit(n: int | None):
    if n is None:
        env = os.environ.get("ISONCA_THREADS")
        n = int(env) if env and env.isdigit() else None
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        with _thread_limit(getattr(args, "threads", None)):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalCollapse, OverflowError) as exc:
        print(f"numerical collapse: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    except IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
