"""Loss terms and schedules.

Supervised objective: boundary-weighted cross-entropy plus a surface term
that pairs predicted probabilities with signed distance maps of the
ground truth. Unsupervised objective: L2 between predictions and guessed
labels, optionally masked by a warp-validity grid.

Weight maps and distance maps are functions of the integer target only,
so they are computed in numpy/scipy and enter the graph as constants;
gradients flow exclusively through the predictions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt, maximum_filter, minimum_filter

from .core import StructuralError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-8  # clamp inside log terms


@dataclass(frozen=True)
class BoundaryWeightMap:
    weights: np.ndarray


@dataclass(frozen=True)
class SignedDistanceMap:
    sdm: np.ndarray  # (P, H, W), normalized by the image diagonal


@dataclass(frozen=True)
class LossWeights:
    lambda_u: float
    lambda_ss: float
    epoch: int


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)


def cross_entropy(pred, target, weights=None) -> torch.Tensor:
    """Mean over pixels of -w(p) * log pred[target(p), p]; w defaults to 1.

    ``pred`` is (P, H, W) or (B, P, H, W) probabilities, ``target`` the
    matching integer map. Probabilities are clamped at 1e-8 inside the log.
    """
    pred = _as_tensor(pred)
    target = _as_tensor(target, dtype=torch.long)
    batched = pred.dim() == 4
    if not batched:
        pred = pred[None]
        target = target[None]
    if pred.shape[0] != target.shape[0] or pred.shape[2:] != target.shape[1:]:
        raise StructuralError(f"pred {tuple(pred.shape)} does not match target {tuple(target.shape)}")
    picked = pred.gather(1, target[:, None]).squeeze(1).clamp_min(PROB_FLOOR)
    nll = -torch.log(picked)
    if weights is not None:
        w = _as_tensor(weights, dtype=pred.dtype)
        if not batched and w.dim() == 2:
            w = w[None]
        if w.shape != nll.shape:
            raise StructuralError(f"weights {tuple(w.shape)} do not match pixels {tuple(nll.shape)}")
        nll = w * nll
    return nll.mean()


def boundary_weight_map(target: np.ndarray, d: int = 1, w_base: float = 1.0) -> BoundaryWeightMap:
    """w_base on pixels whose Chebyshev d-neighborhood holds >= 2 classes, else 0.

    This is the hard-band realization of the boundary-aware weighting: the
    effective per-pixel cross-entropy weight becomes lambda1 + lambda2 * w(p).
    """
    if d < 1:
        raise StructuralError(f"boundary radius must be >= 1, got {d}")
    cls = np.asarray(target)
    size = 2 * d + 1
    hi = maximum_filter(cls, size=size, mode="nearest")
    lo = minimum_filter(cls, size=size, mode="nearest")
    w = np.where(hi != lo, float(w_base), 0.0).astype(np.float32)
    return BoundaryWeightMap(w)


def signed_distance(target: np.ndarray, num_classes: int | None = None) -> SignedDistanceMap:
    """Per-class signed distance: positive outside the region, zero on its
    inner boundary, increasingly negative toward the interior; normalized by
    the image diagonal so the surface term is scale-free.

    A class absent from the mask gets a uniformly positive (+1) channel. A
    class covering the whole mask is measured against the image border.
    """
    cls = np.asarray(target)
    h, w = cls.shape
    p = int(num_classes if num_classes is not None else cls.max() + 1)
    diag = math.hypot(h, w)
    out = np.empty((p, h, w), dtype=np.float32)
    for c in range(p):
        m = cls == c
        if not m.any():
            out[c] = 1.0
            continue
        if m.all():
            padded = np.pad(m, 1, mode="constant", constant_values=False)
            d_in = distance_transform_edt(padded)[1:-1, 1:-1]
            out[c] = -(d_in - 1.0) / diag
            continue
        d_out = distance_transform_edt(~m)
        d_in = distance_transform_edt(m)
        out[c] = (d_out * (~m) - (d_in - 1.0) * m) / diag
    return SignedDistanceMap(out)


def surface_loss(pred, sdm) -> torch.Tensor:
    """Mean over classes and pixels of pred * signed distance."""
    pred = _as_tensor(pred)
    sdm_t = _as_tensor(sdm.sdm if isinstance(sdm, SignedDistanceMap) else sdm, dtype=pred.dtype)
    if pred.shape != sdm_t.shape:
        raise StructuralError(f"pred {tuple(pred.shape)} does not match sdm {tuple(sdm_t.shape)}")
    return (pred * sdm_t).mean()


def supervised_loss(pred, target, cfg, sdm_cache: dict | None = None) -> torch.Tensor:
    """Boundary-weighted cross-entropy plus the weighted surface term.

    ``pred`` (B, P, H, W) probabilities, ``target`` (B, H, W) class indices
    (numpy). Distance maps can be memoized across steps via ``sdm_cache``
    keyed by mask bytes.
    """
    pred = _as_tensor(pred)
    if pred.dim() == 3:
        pred = pred[None]
    tgt = np.asarray(target)
    if tgt.ndim == 2:
        tgt = tgt[None]
    if pred.shape[0] != tgt.shape[0] or tuple(pred.shape[2:]) != tgt.shape[1:]:
        raise StructuralError(f"pred {tuple(pred.shape)} does not match target {tgt.shape}")
    p = pred.shape[1]

    weights = np.empty(tgt.shape, dtype=np.float32)
    sdms = np.empty((tgt.shape[0], p) + tgt.shape[1:], dtype=np.float32)
    for i, mask in enumerate(tgt):
        weights[i] = cfg.lambda1 + cfg.lambda2 * boundary_weight_map(
            mask, cfg.boundary_d, cfg.boundary_w
        ).weights
        if sdm_cache is not None:
            key = mask.tobytes()
            if key not in sdm_cache:
                sdm_cache[key] = signed_distance(mask, num_classes=p).sdm
            sdms[i] = sdm_cache[key]
        else:
            sdms[i] = signed_distance(mask, num_classes=p).sdm
    ce = cross_entropy(pred, tgt, weights=weights)
    sl = surface_loss(pred, torch.as_tensor(sdms, dtype=pred.dtype))
    return ce + cfg.lambda3 * sl


def consistency_loss(pred, guessed, validity=None) -> torch.Tensor:
    """Mean squared difference over (valid) pixels and channels.

    ``guessed`` is treated as a constant: it is detached, so gradients flow
    only through ``pred``. ``validity`` is a per-pixel [0,1] weight grid
    broadcast over channels; all-invalid input yields 0 with a warning.
    """
    pred = _as_tensor(pred)
    guess = _as_tensor(guessed, dtype=pred.dtype)
    if isinstance(guess, torch.Tensor):
        guess = guess.detach()
    if pred.shape != guess.shape:
        raise StructuralError(f"pred {tuple(pred.shape)} does not match guess {tuple(guess.shape)}")
    sq = (pred - guess) ** 2
    if validity is None:
        return sq.mean()
    v = _as_tensor(getattr(validity, "valid", validity), dtype=pred.dtype)
    while v.dim() < sq.dim():
        v = v[None] if v.dim() < sq.dim() - 1 else v.unsqueeze(-3)
    denom = v.expand_as(sq).sum()
    if denom.item() <= 0:
        log.warning("consistency loss has empty valid support; returning 0")
        return torch.zeros((), dtype=pred.dtype)
    return (sq * v).sum() / denom


def schedule(epoch: int, cfg) -> LossWeights:
    """Linear ramps: lambda_u = min(cap_u, slope_u * epoch), same for ss."""
    if epoch < 0:
        raise StructuralError(f"epoch must be >= 0, got {epoch}")
    return LossWeights(
        lambda_u=min(cfg.schedule_cap_u, cfg.slope_u * epoch),
        lambda_ss=min(cfg.schedule_cap_ss, cfg.slope_ss * epoch),
        epoch=epoch,
    )


def total_loss(sup, l_u, l_ss, weights: LossWeights, method: str):
    """Combine per the training mode: SL uses only the supervised term,
    SSL_D adds lambda_u * L_u, SSL_SS adds lambda_ss * L_ss on top."""
    if method == "SL":
        return sup
    if method == "SSL_D":
        return sup + weights.lambda_u * l_u
    if method == "SSL_SS":
        return sup + weights.lambda_u * l_u + weights.lambda_ss * l_ss
    raise StructuralError(f"unknown method {method!r}")
