"""Photometric and invertible spatial augmentation.

Photometric ops (CLAHE, gamma, blur, reflection lines) perturb contrast
and luminance without moving pixels, so a paired mask is never touched.
The spatial transform is a rotation-then-translation with an exact
inverse; warping back an all-ones grid yields the validity mask marking
which pixels of an inverse-warped prediction carry real information.

Everything here is a pure function of (input, parameters, rng draw),
safe for parallel data-loading workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import EyeImage, LabelMask, ParameterError, RandomStream, SoftPrediction


@dataclass(frozen=True)
class DomainAugParams:
    """One draw of the contrast/luminance augmentation."""

    gamma: float
    clahe_clip: float
    clahe_grid: int
    apply_clahe: bool = True
    apply_gamma: bool = True


@dataclass(frozen=True)
class SpatialTransform:
    """Rotation about the image center followed by an integer translation.

    ``applied=False`` marks the identity draw; ops short-circuit it so the
    self-supervised path reduces exactly (bitwise) to the photometric-only
    path when transforms are disabled.
    """

    angle_deg: float = 0.0
    shift: tuple[int, int] = (0, 0)  # (rows, cols)
    applied: bool = False

    def inverse(self) -> "SpatialTransform":
        return SpatialTransform(
            angle_deg=-self.angle_deg,
            shift=(-self.shift[0], -self.shift[1]),
            applied=self.applied,
        )

    @property
    def is_identity(self) -> bool:
        return not self.applied or (self.angle_deg == 0.0 and self.shift == (0, 0))


@dataclass(frozen=True)
class ValidityMask:
    """Round-trip warp of an all-ones grid; 1 where the inverse is trustworthy."""

    valid: np.ndarray

    def __post_init__(self):
        v = np.array(self.valid, dtype=np.float32)
        v.flags.writeable = False
        object.__setattr__(self, "valid", v)


@dataclass(frozen=True)
class DomainAugConfig:
    gammas: tuple[float, ...] = tuple(round(0.8 + 0.05 * i, 2) for i in range(9))
    clahe_clips: tuple[float, ...] = (1.0, 1.2, 1.5, 1.5, 1.5, 2.0)
    clahe_grids: tuple[int, ...] = (2, 4, 8, 8, 8, 16)
    p_clahe: float = 1.0
    p_gamma: float = 1.0


@dataclass(frozen=True)
class SpatialAugConfig:
    t_prob: float = 0.5
    p_rotate: float = 0.5
    p_translate: float = 0.8
    rot_max_deg: float = 5.0
    shift_max: int = 20


@dataclass(frozen=True)
class BasicAugConfig:
    p_flip: float = 0.5
    p_blur: float = 0.2
    blur_sigma_min: float = 0.5
    blur_sigma_max: float = 1.5
    p_lines: float = 0.2


def domain_cfg_from(cfg) -> DomainAugConfig:
    return DomainAugConfig(
        gammas=tuple(cfg.gammas),
        clahe_clips=tuple(cfg.clahe_clips),
        clahe_grids=tuple(cfg.clahe_grids),
        p_clahe=cfg.p_clahe,
        p_gamma=cfg.p_gamma,
    )


def spatial_cfg_from(cfg) -> SpatialAugConfig:
    return SpatialAugConfig(
        t_prob=cfg.t_prob,
        p_rotate=cfg.p_rotate,
        p_translate=cfg.p_translate,
        rot_max_deg=cfg.rot_max_deg,
        shift_max=cfg.shift_max,
    )


def basic_cfg_from(cfg) -> BasicAugConfig:
    return BasicAugConfig(
        p_flip=cfg.p_flip,
        p_blur=cfg.p_blur,
        blur_sigma_min=cfg.blur_sigma_min,
        blur_sigma_max=cfg.blur_sigma_max,
        p_lines=cfg.p_lines,
    )


# ---------------------------------------------------------------------------
# parameter sampling


def sample_domain_aug(rng: RandomStream, cfg: DomainAugConfig = DomainAugConfig()) -> DomainAugParams:
    """Draw gamma from its 9-point grid and a (clip, grid) pair jointly.

    The clip and grid lists are paired by index, which preserves the
    intended weighting (clip 1.5 appears three times, always with grid 8).
    """
    pair = int(rng.integers(len(cfg.clahe_clips)))
    gamma = float(cfg.gammas[int(rng.integers(len(cfg.gammas)))])
    apply_clahe = bool(rng.random() < cfg.p_clahe)
    apply_gamma = bool(rng.random() < cfg.p_gamma)
    return DomainAugParams(
        gamma=gamma,
        clahe_clip=float(cfg.clahe_clips[pair]),
        clahe_grid=int(cfg.clahe_grids[pair]),
        apply_clahe=apply_clahe,
        apply_gamma=apply_gamma,
    )


def sample_T(rng: RandomStream, cfg: SpatialAugConfig = SpatialAugConfig()) -> SpatialTransform:
    """Draw a spatial transform: 50% identity, else rotation w.p. 0.5 and
    per-axis integer translation w.p. 0.8 (defaults)."""
    if rng.random() >= cfg.t_prob:
        return SpatialTransform(applied=False)
    angle = 0.0
    shift = (0, 0)
    if rng.random() < cfg.p_rotate:
        angle = float(rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg))
    if rng.random() < cfg.p_translate:
        shift = (
            int(rng.integers(-cfg.shift_max, cfg.shift_max + 1)),
            int(rng.integers(-cfg.shift_max, cfg.shift_max + 1)),
        )
    return SpatialTransform(angle_deg=angle, shift=shift, applied=True)


# ---------------------------------------------------------------------------
# photometric ops


def gamma_correct(img: np.ndarray | EyeImage, gamma: float):
    """Elementwise power-law intensity mapping; [0,1] is preserved."""
    if gamma <= 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    if isinstance(img, EyeImage):
        return replace(img, pixels=np.power(img.pixels, gamma, dtype=np.float32))
    return np.power(np.asarray(img, dtype=np.float32), gamma)


def clahe(img: np.ndarray | EyeImage, clip: float, grid: int, nbins: int = 256):
    """Contrast-limited adaptive histogram equalization on a [0,1] image.

    The image is quantized to ``nbins`` levels and covered with tiles of
    ceil(H/grid) x ceil(W/grid). Each tile's histogram is clipped at
    clip * (pixels_in_tile / nbins), the excess is redistributed uniformly
    over all bins, and the tile mapping is the normalized CDF. Pixels are
    remapped by bilinear interpolation between the mappings of the four
    surrounding tile centers. Tiles whose raw histogram is concentrated in
    a single bin use the identity mapping, so constant regions pass through
    unchanged.
    """
    if grid < 1:
        raise ParameterError(f"grid must be >= 1, got {grid}")
    if clip < 1.0:
        raise ParameterError(f"clip must be >= 1, got {clip}")
    if isinstance(img, EyeImage):
        return replace(img, pixels=clahe(img.pixels, clip, grid, nbins))

    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape
    q = np.clip(np.floor(arr * (nbins - 1) + 0.5), 0, nbins - 1).astype(np.int64)

    th, tw = math.ceil(h / grid), math.ceil(w / grid)
    row_starts = list(range(0, h, th))
    col_starts = list(range(0, w, tw))
    nt_r, nt_c = len(row_starts), len(col_starts)

    identity = np.arange(nbins, dtype=np.float64) / (nbins - 1)
    luts = np.empty((nt_r, nt_c, nbins), dtype=np.float64)
    centers_r = np.empty(nt_r)
    centers_c = np.empty(nt_c)
    for i, r0 in enumerate(row_starts):
        r1 = min(r0 + th, h)
        centers_r[i] = (r0 + r1 - 1) / 2.0
        for j, c0 in enumerate(col_starts):
            c1 = min(c0 + tw, w)
            if i == 0:
                centers_c[j] = (c0 + c1 - 1) / 2.0
            tile = q[r0:r1, c0:c1]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=nbins).astype(np.float64)
            if np.count_nonzero(hist) <= 1:
                luts[i, j] = identity
                continue
            limit = clip * n / nbins
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / nbins
            luts[i, j] = np.cumsum(hist) / n

    def axis_interp(coords, centers):
        npts = len(centers)
        if npts == 1:
            return np.zeros(len(coords), dtype=np.int64), np.zeros(len(coords))
        lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, npts - 2)
        span = centers[lo + 1] - centers[lo]
        wgt = np.clip((coords - centers[lo]) / span, 0.0, 1.0)
        return lo, wgt

    i0, wr = axis_interp(np.arange(h, dtype=np.float64), centers_r)
    j0, wc = axis_interp(np.arange(w, dtype=np.float64), centers_c)
    i0 = i0[:, None]
    wr = wr[:, None]
    j0 = j0[None, :]
    wc = wc[None, :]
    i1 = np.minimum(i0 + 1, nt_r - 1)
    j1 = np.minimum(j0 + 1, nt_c - 1)

    out = (
        (1 - wr) * (1 - wc) * luts[i0, j0, q]
        + (1 - wr) * wc * luts[i0, j1, q]
        + wr * (1 - wc) * luts[i1, j0, q]
        + wr * wc * luts[i1, j1, q]
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_domain_aug(img: np.ndarray, params: DomainAugParams) -> np.ndarray:
    """CLAHE then gamma (fixed order), honoring the enable flags."""
    out = np.asarray(img, dtype=np.float32)
    if params.apply_clahe:
        out = clahe(out, params.clahe_clip, params.clahe_grid)
    if params.apply_gamma:
        out = gamma_correct(out, params.gamma)
    return out


# ---------------------------------------------------------------------------
# invertible spatial warp


def _rotation(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def _sample_coords(hw: tuple[int, int], t: SpatialTransform, inverse: bool) -> np.ndarray:
    """Source coordinates (2, H, W) at which the warped output samples its input.

    Forward warp samples at R(p - c) + c + s; the inverse warp samples at
    R^-1(p - c - s) + c, i.e. un-translate first, then un-rotate.
    """
    h, w = hw
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pts = np.stack([ys - cy, xs - cx])  # (2, H, W) centered
    if inverse:
        pts[0] -= t.shift[0]
        pts[1] -= t.shift[1]
        rot = _rotation(-t.angle_deg)
        src = np.tensordot(rot, pts, axes=1)
        src[0] += cy
        src[1] += cx
    else:
        rot = _rotation(t.angle_deg)
        src = np.tensordot(rot, pts, axes=1)
        src[0] += cy + t.shift[0]
        src[1] += cx + t.shift[1]
    return src


def _resample(channels: np.ndarray, src: np.ndarray, order: str) -> np.ndarray:
    """Sample (C, H, W) channels at float coords, zero fill outside the frame."""
    c, h, w = channels.shape
    sy, sx = src
    if order == "nearest":
        iy = np.round(sy).astype(np.int64)
        ix = np.round(sx).astype(np.int64)
        inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        iy = np.clip(iy, 0, h - 1)
        ix = np.clip(ix, 0, w - 1)
        out = channels[:, iy, ix]
        out[:, ~inside] = 0
        return out

    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros((c, h, w), dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        out += wgt * np.where(inside, 1.0, 0.0) * channels[:, yc, xc]
    return out


def apply_spatial(x: np.ndarray, t: SpatialTransform, order: str = "bilinear") -> np.ndarray:
    """Warp a (H, W) or (C, H, W) grid by t; out-of-frame samples fill with 0.

    Pure integer translations are exact; rotations use bilinear (or nearest
    for hard masks) interpolation.
    """
    arr = np.asarray(x)
    if t.is_identity:
        return arr.copy()
    squeeze = arr.ndim == 2
    chans = arr[None].astype(np.float64) if squeeze else arr.astype(np.float64)
    src = _sample_coords(chans.shape[1:], t, inverse=False)
    out = _resample(chans, src, order)
    out = out.astype(arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64)
    if order == "nearest" and np.issubdtype(arr.dtype, np.integer):
        out = out.astype(arr.dtype)
    return out[0] if squeeze else out


def validity_of(t: SpatialTransform, hw: tuple[int, int]) -> ValidityMask:
    """Round trip an all-ones grid through t and its inverse."""
    if t.is_identity:
        return ValidityMask(np.ones(hw, dtype=np.float32))
    ones = np.ones(hw, dtype=np.float64)
    fwd = _resample(ones[None], _sample_coords(hw, t, inverse=False), "bilinear")
    back = _resample(fwd, _sample_coords(hw, t, inverse=True), "bilinear")
    return ValidityMask(back[0].astype(np.float32))


def invert_spatial(
    y: SoftPrediction | np.ndarray, t: SpatialTransform
) -> tuple[SoftPrediction, ValidityMask]:
    """Undo t on a prediction: un-translate, un-rotate, renormalize where valid.

    Pixels whose validity is <= 0.99 keep their raw resampled values; the
    consistency loss excludes them through the returned mask instead of
    trusting border fill.
    """
    probs = y.probs if isinstance(y, SoftPrediction) else np.asarray(y)
    hw = probs.shape[1:]
    if t.is_identity:
        return SoftPrediction(probs.copy()), ValidityMask(np.ones(hw, dtype=np.float32))
    src = _sample_coords(hw, t, inverse=True)
    out = _resample(probs.astype(np.float64), src, "bilinear")
    vmask = validity_of(t, hw)
    good = vmask.valid > 0.99
    sums = out.sum(axis=0)
    norm = np.where(good & (sums > 1e-8), sums, 1.0)
    out = out / norm[None]
    return SoftPrediction(np.clip(out, 0.0, 1.0).astype(np.float32)), vmask


# ---------------------------------------------------------------------------
# baseline augmentation


def hflip(arr: np.ndarray) -> np.ndarray:
    return arr[:, ::-1].copy()


def _reflection_lines(px: np.ndarray, rng: RandomStream) -> np.ndarray:
    """Overlay a few thin bright streaks, mimicking corneal/glasses glints."""
    h, w = px.shape
    out = px.copy()
    for _ in range(int(rng.integers(1, 4))):
        y0, y1 = rng.integers(0, h, size=2)
        x0, x1 = rng.integers(0, w, size=2)
        npts = 2 * max(h, w)
        ys = np.clip(np.round(np.linspace(y0, y1, npts)), 0, h - 1).astype(int)
        xs = np.clip(np.round(np.linspace(x0, x1, npts)), 0, w - 1).astype(int)
        brightness = float(rng.uniform(0.85, 1.0))
        out[ys, xs] = np.maximum(out[ys, xs], brightness)
    return out


def basic_augment(
    img: EyeImage,
    mask: Optional[LabelMask],
    rng: RandomStream,
    cfg: BasicAugConfig = BasicAugConfig(),
) -> tuple[EyeImage, Optional[LabelMask]]:
    """Baseline augmentation: horizontal flip (mask in lockstep), Gaussian
    blur, and synthetic reflection lines. Photometric parts never touch the
    mask."""
    px = img.pixels.copy()
    out_mask = mask
    if rng.random() < cfg.p_flip:
        px = hflip(px)
        if mask is not None:
            out_mask = LabelMask(hflip(mask.classes), num_classes=mask.num_classes)
    if rng.random() < cfg.p_blur:
        sigma = float(rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max))
        px = gaussian_filter(px, sigma=sigma, mode="nearest")
    if rng.random() < cfg.p_lines:
        px = _reflection_lines(px, rng)
    out_img = replace(img, pixels=np.clip(px, 0.0, 1.0).astype(np.float32))
    return out_img, out_mask
