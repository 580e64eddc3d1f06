"""Targets, auxiliary channels and the rotation/reflection-invariant loss.

Angles follow the screen convention used throughout the package: positive
angles turn an image counter-clockwise as displayed (rows grow downward),
the same sense as ``np.rot90``.  Polar images sample angle ``theta`` at
``col = cx + r cos(theta)``, ``row = cy - r sin(theta)``, so rotating an
image by ``a`` shifts its polar image by ``+a`` along the angle axis.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

# -- targets ----------------------------------------------------------------


@dataclass
class TargetSpec:
    rgba: np.ndarray  # (H, W, 4), premultiplied
    aux: np.ndarray  # (H, W, n_aux)
    aux_kinds: list = field(default_factory=list)
    weights: np.ndarray | None = None  # per compared channel, default ones

    def __post_init__(self):
        if self.aux.shape[:2] != self.rgba.shape[:2]:
            raise ValueError("aux channels must match the target size")
        if self.weights is None:
            self.weights = np.ones(4 + self.n_aux)

    @property
    def n_aux(self) -> int:
        return self.aux.shape[-1]

    @property
    def n_compared(self) -> int:
        return 4 + self.n_aux

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgba.shape[:2]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.rgba, self.aux], axis=-1)


def make_binary_aux(height: int, width: int) -> np.ndarray:
    """-0.5 above the horizontal midline, +0.5 below (0 on the middle row of odd heights)."""
    rows = np.arange(height) - (height - 1) / 2.0
    return np.repeat((np.sign(rows) * 0.5)[:, None], width, axis=1)


def radial_distance(height: int, width: int) -> np.ndarray:
    """Distance to the image center, 1.0 at half the smaller dimension."""
    y = np.arange(height)[:, None] - (height - 1) / 2.0
    x = np.arange(width)[None, :] - (width - 1) / 2.0
    return np.hypot(y, x) / (min(height, width) / 2.0)


def make_radial_aux(height: int, width: int, mode: int) -> np.ndarray:
    if mode < 1:
        raise ValueError("radial mode must be >= 1")
    r = radial_distance(height, width)
    wave = np.sin(r * mode * np.pi) if mode % 2 == 0 else np.cos(r * mode * np.pi)
    return np.sign(wave) * 0.5


def _aux_channel(kind, height: int, width: int) -> np.ndarray:
    if kind == "binary":
        return make_binary_aux(height, width)
    if isinstance(kind, dict) and set(kind) == {"radial"}:
        return make_radial_aux(height, width, int(kind["radial"]))
    raise ValueError(f"unknown aux channel kind {kind!r}")


def premultiply(rgba: np.ndarray) -> np.ndarray:
    out = rgba.astype(np.float64).copy()
    out[..., :3] *= out[..., 3:4]
    return out


def target_from_rgba(rgba: np.ndarray, pad: int = 0, aux_kinds=(), premultiplied: bool = True) -> TargetSpec:
    rgba = np.asarray(rgba, dtype=np.float64)
    if not premultiplied:
        rgba = premultiply(rgba)
    rgba = np.pad(rgba, ((pad, pad), (pad, pad), (0, 0)))
    h, w = rgba.shape[:2]
    aux_kinds = list(aux_kinds)
    if aux_kinds:
        aux = np.stack([_aux_channel(k, h, w) for k in aux_kinds], axis=-1)
    else:
        aux = np.zeros((h, w, 0))
    return TargetSpec(rgba, aux, aux_kinds)


def prepare_target(png: bytes, pad: int = 0, aux_kinds=()) -> TargetSpec:
    """Decode a PNG, premultiply alpha, zero-pad and synthesize aux channels."""
    from PIL import Image, UnidentifiedImageError

    try:
        img = Image.open(io.BytesIO(png))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode target image: {exc}") from exc
    rgba = np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0
    return target_from_rgba(rgba, pad, aux_kinds, premultiplied=False)


# -- image helpers ----------------------------------------------------------


def gaussian_kernel1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    half = max(1, int(truncate * sigma + 0.5))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur over the two spatial axes of ``(H, W, C)``, mirrored borders."""
    k = gaussian_kernel1d(sigma)
    out = correlate1d(np.asarray(image, dtype=np.float64), k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def sharpen(image: np.ndarray, amount: float = 0.5, radius: float = 1.0) -> np.ndarray:
    """Unsharp mask: ``image + amount * (image - blur(image))``."""
    image = np.asarray(image, dtype=np.float64)
    if amount == 0:
        return image.copy()
    return image + amount * (image - gaussian_blur(image, radius))


def bilinear_sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``(H, W, C)`` at fractional positions; outside the image reads 0."""
    h, w = image.shape[:2]
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    out = np.zeros(rows.shape + image.shape[2:], dtype=np.float64)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = image[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            out += np.where(ok[..., None], vals, 0.0) * (wr * wc)
    return out


def image_center(height: int, width: int) -> tuple[float, float]:
    return (height - 1) / 2.0, (width - 1) / 2.0


def rotate_image(image: np.ndarray, angle: float, center: tuple[float, float] | None = None) -> np.ndarray:
    """Rotate ``(H, W, C)`` counter-clockwise (on screen) by ``angle`` radians, bilinear."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    cy, cx = image_center(h, w) if center is None else center
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    x, y = cols - cx, cy - rows
    ca, sa = math.cos(angle), math.sin(angle)
    xs = x * ca + y * sa
    ys = -x * sa + y * ca
    return bilinear_sample(image, cy - ys, cx + xs)


def reflect(image: np.ndarray) -> np.ndarray:
    """Left-right mirror image."""
    return np.ascontiguousarray(np.asarray(image)[:, ::-1])


# -- polar matching ---------------------------------------------------------


@dataclass
class PolarConfig:
    n_theta: int = 256
    n_r: int | None = None  # default: half the smaller image side
    sharpen_amount: float = 0.5
    sharpen_radius: float = 1.0
    radius_weighting: bool = True

    @classmethod
    def from_json(cls, doc: dict | None, sharpen_doc: dict | None = None) -> "PolarConfig":
        cfg = cls()
        if doc:
            cfg.n_theta = int(doc.get("n_theta", cfg.n_theta))
            if doc.get("n_r") is not None:
                cfg.n_r = int(doc["n_r"])
            cfg.radius_weighting = bool(doc.get("radius_weighting", cfg.radius_weighting))
        if sharpen_doc:
            cfg.sharpen_amount = float(sharpen_doc.get("k", cfg.sharpen_amount))
            cfg.sharpen_radius = float(sharpen_doc.get("radius", cfg.sharpen_radius))
        return cfg


@dataclass
class PolarImage:
    data: np.ndarray  # (n_r, n_theta, C)
    center: tuple[float, float]
    r_max: float

    @property
    def n_r(self) -> int:
        return self.data.shape[0]

    @property
    def n_theta(self) -> int:
        return self.data.shape[1]


def to_polar(image: np.ndarray, n_r: int, n_theta: int, center=None, r_max: float | None = None,
             radius_weighting: bool = True) -> PolarImage:
    """Resample ``(H, W, C)`` on a uniform (radius, angle) grid.

    Radii are ``r_max * (i + 1) / n_r``.  With ``radius_weighting`` each row
    is scaled by ``sqrt(r / r_max)`` so squared sums over bins follow the
    Cartesian area element.
    """
    if n_theta < 1 or n_theta & (n_theta - 1):
        raise ValueError("n_theta must be a power of two")
    if n_r < 2:
        raise ValueError("n_r must be >= 2")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w = image.shape[:2]
    cy, cx = image_center(h, w) if center is None else center
    if r_max is None:
        r_max = min(h, w) / 2.0
    radii = r_max * np.arange(1, n_r + 1) / n_r
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    rows = cy - radii[:, None] * np.sin(theta)[None, :]
    cols = cx + radii[:, None] * np.cos(theta)[None, :]
    data = bilinear_sample(image, rows, cols)
    if radius_weighting:
        data *= np.sqrt(radii / r_max)[:, None, None]
    return PolarImage(data, (cy, cx), r_max)


def _polar_data(p) -> np.ndarray:
    return p.data if isinstance(p, PolarImage) else np.asarray(p, dtype=np.float64)


def rotation_loss_profile(s_polar, t_polar) -> np.ndarray:
    """Squared distance between ``S`` and ``T`` rotated by every angle bin.

    ``out[k] = sum_{r,c,j} (S[r,j,c] - T[r,j-k,c])**2``, via one FFT
    correlation along the angle axis (spectra are summed over radius and
    channel before the inverse transform).
    """
    s, t = _polar_data(s_polar), _polar_data(t_polar)
    if s.shape != t.shape:
        raise ValueError(f"polar shapes differ: {s.shape} vs {t.shape}")
    n = s.shape[1]
    fs = np.fft.rfft(s, axis=1)
    ft = np.fft.rfft(t, axis=1)
    corr = np.fft.irfft(np.sum(fs * np.conj(ft), axis=(0, 2)), n=n)
    return np.sum(s * s) + np.sum(t * t) - 2.0 * corr


@dataclass
class LossProfile:
    losses: np.ndarray  # (2, n_theta): row 0 original target, row 1 reflected
    theta_bin: int
    reflected: bool
    min_value: float

    @property
    def n_theta(self) -> int:
        return self.losses.shape[1]

    @property
    def theta(self) -> float:
        return 2 * np.pi * self.theta_bin / self.n_theta

    @classmethod
    def from_losses(cls, losses: np.ndarray) -> "LossProfile":
        flat = int(np.argmin(losses))
        refl, k = divmod(flat, losses.shape[1])
        return cls(losses, int(k), bool(refl), float(losses[refl, k]))


def _compared_channels(state: np.ndarray, n_compared: int) -> np.ndarray:
    if state.shape[-1] < n_compared:
        raise ValueError(f"state has {state.shape[-1]} channels, target needs {n_compared}")
    return np.asarray(state[..., :n_compared], dtype=np.float64)


def _sharpen_rgba(image: np.ndarray, cfg: PolarConfig) -> np.ndarray:
    out = np.array(image, dtype=np.float64)
    out[..., :4] = sharpen(out[..., :4], cfg.sharpen_amount, cfg.sharpen_radius)
    return out


def matching_profile(image: np.ndarray, target: np.ndarray, cfg: PolarConfig | None = None) -> LossProfile:
    """Profiles of ``image`` against ``target`` and its mirror image (both ``(H, W, K)``)."""
    cfg = cfg or PolarConfig()
    h, w = target.shape[:2]
    n_r = cfg.n_r or min(h, w) // 2

    def polar(x):
        return to_polar(_sharpen_rgba(x, cfg), n_r, cfg.n_theta, radius_weighting=cfg.radius_weighting)

    sp = polar(image)
    losses = np.stack([rotation_loss_profile(sp, polar(target)),
                       rotation_loss_profile(sp, polar(reflect(target)))])
    return LossProfile.from_losses(losses)


def align_target(target: np.ndarray, profile: LossProfile) -> np.ndarray:
    base = reflect(target) if profile.reflected else np.asarray(target, dtype=np.float64)
    if profile.theta_bin == 0:
        return base.copy()
    return rotate_image(base, profile.theta)


def invariant_loss(state: np.ndarray, target: TargetSpec, cfg: PolarConfig | None = None,
                   return_grad: bool = False):
    """Rotation/reflection-invariant loss of one ``(H, W, C)`` state.

    The best rotation and mirror are picked from the polar profile; the
    returned scalar is the weighted MSE against that aligned target in
    Cartesian space.  Returns ``(loss, aligned_target, profile)`` and, with
    ``return_grad``, also d(loss)/d(state) with the alignment held fixed.
    """
    cfg = cfg or PolarConfig()
    tgt = target.stacked()
    x = _compared_channels(state, target.n_compared)
    if x.shape[:2] != tgt.shape[:2]:
        raise ValueError(f"state is {x.shape[:2]}, target is {tgt.shape[:2]}")
    profile = matching_profile(x, tgt, cfg)
    aligned = align_target(tgt, profile)
    diff = x - aligned
    scale = target.weights / diff.size
    loss = float(np.sum(scale * diff * diff))
    if not return_grad:
        return loss, aligned, profile
    grad = np.zeros(state.shape, dtype=np.float64)
    grad[..., :target.n_compared] = 2.0 * scale * diff
    return loss, aligned, profile, grad


def rotation_loss_curve(target: np.ndarray, cfg: PolarConfig | None = None) -> tuple[np.ndarray, float]:
    """Self-matching profile of a ``(H, W, K)`` target against its own rotations.

    Also returns the profile value of two uncorrelated copies (twice the polar
    energy), the natural scale for normalizing the curve.
    """
    cfg = cfg or PolarConfig()
    h, w = target.shape[:2]
    n_r = cfg.n_r or min(h, w) // 2
    p = to_polar(_sharpen_rgba(target, cfg), n_r, cfg.n_theta, radius_weighting=cfg.radius_weighting)
    return rotation_loss_profile(p, p), 2.0 * float(np.sum(p.data ** 2))


def spurious_rotation_minimum(target: np.ndarray, cfg: PolarConfig | None = None,
                              exclude_deg: float = 30.0) -> tuple[float, float]:
    """Deepest self-match loss away from 0 degrees, relative to the target's energy.

    Returns ``(angle_deg, relative_loss)``; small values flag targets prone
    to settling in a wrongly rotated solution.
    """
    curve, energy = rotation_loss_curve(target, cfg)
    n = len(curve)
    deg = 360.0 * np.arange(n) / n
    away = (deg > exclude_deg) & (deg < 360.0 - exclude_deg)
    k = int(np.flatnonzero(away)[np.argmin(curve[away])])
    return float(deg[k]), float(curve[k] / (energy or 1.0))


# -- config files -----------------------------------------------------------


def load_target_config(doc_or_path, base_dir: str | Path | None = None) -> tuple[TargetSpec, PolarConfig]:
    """Load ``{"image", "pad", "aux", "sharpen", "polar"}``; image paths resolve against the config's folder."""
    if isinstance(doc_or_path, (str, Path)):
        path = Path(doc_or_path)
        doc = json.loads(path.read_text())
        base_dir = path.parent if base_dir is None else base_dir
    else:
        doc = doc_or_path
    image = Path(doc["image"])
    if not image.is_absolute() and base_dir is not None:
        image = Path(base_dir) / image
    target = prepare_target(image.read_bytes(), int(doc.get("pad", 0)), doc.get("aux", []))
    return target, PolarConfig.from_json(doc.get("polar"), doc.get("sharpen"))
