"""Label guessing, batch assembly, and the training loop.

Guessing works by averaging the model's softmax outputs over A augmented
copies of each unlabeled image. The photometric variant averages
predictions for CLAHE/gamma copies directly; the self-supervised variant
additionally warps each copy with a sampled rotation/translation, predicts,
warps the prediction back with the exact inverse, and averages those.
Guesses are always detached: no parameter gradient flows through them,
though they move between steps as the network trains.

Randomness discipline: every consumer gets a keyed child stream, so the
number of draws one method makes can never shift another method's
trajectory. A run with unsupervised weights fixed at zero therefore
reproduces the purely supervised run bit for bit.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import augment
from .core import (
    ConfigError,
    DatasetPool,
    EyeImage,
    RandomStream,
    SoftPrediction,
    TrainConfig,
    TrainingError,
    ValidationError,
)
from .augment import SpatialTransform, ValidityMask
from .evaluation import evaluate
from .losses import LossWeights, consistency_loss, schedule, supervised_loss, total_loss
from .network import ModelSpec, init_params, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class GuessedBatch:
    """Per-item augmented copies and their shared, gradient-free guess.

    ``validity`` averages the per-copy validity masks, so the guess is a
    proper probability simplex wherever validity is ~1 (every copy valid);
    partially valid pixels are down-weighted by the consistency loss rather
    than renormalized.
    """

    copies: list[np.ndarray]  # each (A, H, W)
    guessed: list[SoftPrediction]
    validity: list[ValidityMask]
    transforms: Optional[list[list[SpatialTransform]]] = None


@dataclass
class MixedBatch:
    """Labeled pairs plus unlabeled images drawn from the combined pool.

    Unlabeled entries never carry a mask, even when the underlying frame
    happens to come from the labeled pool.
    """

    labeled: list[tuple]  # (EyeImage, LabelMask)
    unlabeled: list[EyeImage]


@dataclass
class StepReport:
    l_sup: float
    l_u: Optional[float]
    l_ss: Optional[float]
    lambda_u: float
    lambda_ss: float
    total: float


def _to_pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, EyeImage) else np.asarray(x, dtype=np.float32)


def _sharpen(probs: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 1.0:
        return probs
    p = np.power(np.clip(probs, 1e-12, 1.0), 1.0 / temperature)
    return (p / p.sum(axis=0, keepdims=True)).astype(np.float32)


def _domain_copies(images: Sequence, a: int, rng: RandomStream, dom_cfg) -> np.ndarray:
    """Stack of augmented copies, shape (N, A, H, W); one rng draw per copy."""
    stacks = []
    for img in images:
        px = _to_pixels(img)
        stacks.append(
            np.stack([augment.apply_domain_aug(px, augment.sample_domain_aug(rng, dom_cfg))
                      for _ in range(a)])
        )
    return np.stack(stacks)


def _forward_stack(model, copies: np.ndarray, grad: bool) -> torch.Tensor:
    """Forward (N, A, H, W) copies in one batch; returns (N, A, P, H, W)."""
    n, a, h, w = copies.shape
    x = torch.from_numpy(copies.reshape(n * a, 1, h, w).astype(np.float32))
    if grad:
        out = model(x)
    else:
        with torch.no_grad():
            out = model(x)
    p = out.shape[1]
    return out.reshape(n, a, p, h, w)


def guess_labels_D(
    model,
    images,
    A: int,
    rng: RandomStream,
    dom_cfg: augment.DomainAugConfig = augment.DomainAugConfig(),
    sharpen_temperature: float = 1.0,
) -> GuessedBatch:
    """Guess labels by averaging predictions over A photometric copies."""
    if A < 1:
        raise ValidationError(f"A must be >= 1, got {A}")
    items = images if isinstance(images, (list, tuple)) else [images]
    dom_rng = rng.child("domain")
    copies = _domain_copies(items, A, dom_rng, dom_cfg)
    preds = _forward_stack(model, copies, grad=False).numpy()
    guessed = [SoftPrediction(_sharpen(p.mean(axis=0), sharpen_temperature)) for p in preds]
    hw = copies.shape[2:]
    ones = [ValidityMask(np.ones(hw, dtype=np.float32)) for _ in items]
    return GuessedBatch(copies=list(copies), guessed=guessed, validity=ones)


def guess_labels_SS(
    model,
    images,
    A: int,
    rng: RandomStream,
    dom_cfg: augment.DomainAugConfig = augment.DomainAugConfig(),
    sp_cfg: augment.SpatialAugConfig = augment.SpatialAugConfig(),
    sharpen_temperature: float = 1.0,
) -> GuessedBatch:
    """Guess labels via the inverse-transform route.

    Each photometric copy is warped by a sampled transform, predicted,
    warped back with the exact inverse, and the inverses are averaged.
    Per-item validity is the mean of per-copy validity; identity draws
    short-circuit the warp so this collapses exactly onto the photometric
    guess when transforms are disabled.
    """
    if A < 1:
        raise ValidationError(f"A must be >= 1, got {A}")
    items = images if isinstance(images, (list, tuple)) else [images]
    dom_rng = rng.child("domain")
    t_rng = rng.child("transform")
    copies = _domain_copies(items, A, dom_rng, dom_cfg)
    transforms = [[augment.sample_T(t_rng, sp_cfg) for _ in range(A)] for _ in items]

    warped = np.stack(
        [
            np.stack([augment.apply_spatial(copies[i, a], transforms[i][a]) for a in range(A)])
            for i in range(len(items))
        ]
    ).astype(np.float32)
    preds = _forward_stack(model, warped, grad=False).numpy()

    guessed, validity = [], []
    for i in range(len(items)):
        inv, vmasks = [], []
        for a in range(A):
            pred_inv, vmask = augment.invert_spatial(preds[i, a], transforms[i][a])
            inv.append(pred_inv.probs)
            vmasks.append(vmask.valid)
        guessed.append(SoftPrediction(_sharpen(np.mean(inv, axis=0), sharpen_temperature)))
        validity.append(ValidityMask(np.mean(vmasks, axis=0)))
    return GuessedBatch(
        copies=list(copies), guessed=guessed, validity=validity, transforms=transforms
    )


# ---------------------------------------------------------------------------
# batches


def assemble_batch(pool: DatasetPool, cfg: TrainConfig, rng: RandomStream) -> MixedBatch:
    """Sample labeled pairs and unlabeled images (from the combined pool),
    applying the baseline augmentation to every item."""
    if pool.k == 0:
        raise ConfigError("labeled pool is empty; training needs at least one labeled image")
    basic = augment.basic_cfg_from(cfg)
    pick_rng = rng.child("pick")
    aug_rng = rng.child("aug")

    labeled = []
    for idx in pick_rng.integers(pool.k, size=cfg.batch_labeled):
        img, mask = pool.labeled[int(idx)]
        labeled.append(augment.basic_augment(img, mask, aug_rng, basic))

    combined = pool.k + pool.m
    unlabeled = []
    for idx in pick_rng.integers(combined, size=cfg.batch_unlabeled):
        idx = int(idx)
        img = pool.labeled[idx][0] if idx < pool.k else pool.unlabeled[idx - pool.k]
        img, _ = augment.basic_augment(img, None, aug_rng, basic)
        unlabeled.append(img)
    return MixedBatch(labeled=labeled, unlabeled=unlabeled)


# ---------------------------------------------------------------------------
# optimization


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
    )


def _check_finite(name: str, value: torch.Tensor, epoch: int):
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite {name} loss at epoch {epoch}: {value.item()}")


def train_step(
    model,
    optimizer,
    batch: MixedBatch,
    epoch: int,
    cfg: TrainConfig,
    rng: RandomStream,
    sdm_cache: dict | None = None,
) -> StepReport:
    """One optimization step.

    Supervised loss on the labeled half; for SSL modes the unlabeled half is
    expanded into A photometric copies which are forwarded once with
    gradients. Their detached per-item mean is the photometric guess; the
    self-supervised guess additionally runs warped copies without gradients.
    Both consistency terms compare the same with-gradient copy predictions
    against their respective guesses.
    """
    weights = schedule(epoch, cfg)

    imgs = np.stack([p[0].pixels for p in batch.labeled])
    masks = np.stack([p[1].classes for p in batch.labeled])
    x_l = torch.from_numpy(imgs).unsqueeze(1)
    pred_l = model(x_l)
    l_sup = supervised_loss(pred_l, masks, cfg, sdm_cache=sdm_cache)
    _check_finite("supervised", l_sup, epoch)

    l_u_t = l_ss_t = None
    if cfg.method in ("SSL_D", "SSL_SS"):
        dom_cfg = augment.domain_cfg_from(cfg)
        copies = _domain_copies(batch.unlabeled, cfg.A, rng.child("domain"), dom_cfg)
        preds_c = _forward_stack(model, copies, grad=True)  # (N, A, P, H, W)
        guess_d = preds_c.detach().mean(dim=1)
        if cfg.sharpen_temperature != 1.0:
            guess_np = np.stack([_sharpen(g, cfg.sharpen_temperature) for g in guess_d.numpy()])
            guess_d = torch.from_numpy(guess_np)
        l_u_t = consistency_loss(preds_c, guess_d[:, None].expand_as(preds_c))
        _check_finite("consistency", l_u_t, epoch)

        if cfg.method == "SSL_SS":
            sp_cfg = augment.spatial_cfg_from(cfg)
            t_rng = rng.child("transform")
            n, a = copies.shape[:2]
            transforms = [[augment.sample_T(t_rng, sp_cfg) for _ in range(a)] for _ in range(n)]
            warped = np.stack(
                [np.stack([augment.apply_spatial(copies[i, j], transforms[i][j]) for j in range(a)])
                 for i in range(n)]
            ).astype(np.float32)
            preds_t = _forward_stack(model, warped, grad=False).numpy()
            guesses, valid = [], []
            for i in range(n):
                inv, vms = [], []
                for j in range(a):
                    pred_inv, vm = augment.invert_spatial(preds_t[i, j], transforms[i][j])
                    inv.append(pred_inv.probs)
                    vms.append(vm.valid)
                guesses.append(_sharpen(np.mean(inv, axis=0), cfg.sharpen_temperature))
                valid.append(np.mean(vms, axis=0))
            guess_ss = torch.from_numpy(np.stack(guesses))
            v = torch.from_numpy(np.stack(valid))  # (N, H, W)
            l_ss_t = consistency_loss(
                preds_c,
                guess_ss[:, None].expand_as(preds_c),
                validity=v[:, None, None],  # broadcast over copies and channels
            )
            _check_finite("self-supervised consistency", l_ss_t, epoch)

    total = total_loss(l_sup, l_u_t, l_ss_t, weights, cfg.method)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return StepReport(
        l_sup=float(l_sup.item()),
        l_u=None if l_u_t is None else float(l_u_t.item()),
        l_ss=None if l_ss_t is None else float(l_ss_t.item()),
        lambda_u=weights.lambda_u,
        lambda_ss=weights.lambda_ss,
        total=float(total.item()),
    )


# ---------------------------------------------------------------------------
# full loop


def steps_per_epoch(pool: DatasetPool, cfg: TrainConfig) -> int:
    return max(1, math.ceil((pool.k + pool.m) / (cfg.batch_labeled + cfg.batch_unlabeled)))


def _frame_key(img: EyeImage) -> tuple:
    return (img.subject_id, img.frame_id)


def train(
    pool: DatasetPool,
    val: Sequence[tuple],
    cfg: TrainConfig,
    run_dir=None,
    model=None,
):
    """Train for cfg.epochs, tracking validation mIoU each epoch and keeping
    the best-scoring parameters.

    Returns (best model, history), where history holds one record per epoch
    with every loss component, the schedule weights, and validation scores.
    """
    if not val:
        raise ValidationError("validation set must be non-empty")
    val_keys = {_frame_key(img) for img, _ in val}
    overlap = val_keys & {_frame_key(img) for img, _ in pool.labeled}
    if overlap:
        raise ValidationError(f"validation frames appear in the labeled pool: {sorted(overlap)[:5]}")

    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)

    master = RandomStream(cfg.seed)
    if model is None:
        model = init_params(ModelSpec.from_config(cfg), master.child("init"))
    optimizer = make_optimizer(model, cfg)
    n_steps = steps_per_epoch(pool, cfg)
    sdm_cache: dict = {}

    run_dir = Path(run_dir) if run_dir is not None else None
    history_path = run_dir / "history.jsonl" if run_dir else None
    if history_path:
        history_path.write_text("")

    history = []
    best_miou = -1.0
    best_state = None
    best_epoch = -1
    for epoch in range(cfg.epochs):
        sums = {"l_sup": 0.0, "l_u": 0.0, "l_ss": 0.0, "total": 0.0}
        have = {"l_u": 0, "l_ss": 0}
        for step in range(n_steps):
            srng = master.child("step", epoch, step)
            batch = assemble_batch(pool, cfg, srng.child("batch"))
            rep = train_step(model, optimizer, batch, epoch, cfg, srng.child("update"), sdm_cache)
            sums["l_sup"] += rep.l_sup
            sums["total"] += rep.total
            if rep.l_u is not None:
                sums["l_u"] += rep.l_u
                have["l_u"] += 1
            if rep.l_ss is not None:
                sums["l_ss"] += rep.l_ss
                have["l_ss"] += 1

        report = evaluate(model, val, batch_size=cfg.eval_batch, per_image=cfg.miou_per_image)
        weights = schedule(epoch, cfg)
        record = {
            "epoch": epoch,
            "l_sup": sums["l_sup"] / n_steps,
            "l_u": sums["l_u"] / have["l_u"] if have["l_u"] else None,
            "l_ss": sums["l_ss"] / have["l_ss"] if have["l_ss"] else None,
            "lambda_u": weights.lambda_u,
            "lambda_ss": weights.lambda_ss,
            "val_miou": report.mean,
            "val_per_class": [None if math.isnan(v) else v for v in report.per_class],
        }
        history.append(record)
        if history_path:
            with history_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        if report.mean > best_miou:
            best_miou = report.mean
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            if run_dir:
                save_checkpoint(
                    run_dir / "best.ckpt",
                    model,
                    cfg.hash(),
                    extra={"epoch": epoch, "val_miou": report.mean},
                )
        log.info(
            "epoch %d: sup=%.4f u=%s ss=%s val_miou=%.4f",
            epoch, record["l_sup"], record["l_u"], record["l_ss"], report.mean,
        )

    if best_state is not None:
        model.load_state_dict(best_state)
    log.info("best validation mIoU %.4f at epoch %d", best_miou, best_epoch)
    return model, history
