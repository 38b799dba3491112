"""Dataset ingestion, subject-aware splits, and a synthetic eye generator.

Real data follows the open eye-segmentation layout::

    root/images/<subject>/<frame>.png          8-bit grayscale (or color,
    root/labels/<subject>/<frame>.png          converted to luminance)

with labels as 8-bit class indices. A root may instead contain ``train/``
and ``validation/`` subtrees of that shape. Frames without a label file
enter the unlabeled pool.

The synthetic generator renders nested shaded ellipses (sclera, iris,
pupil) with pixel-exact masks, grouped into pseudo-subjects that share
base geometry and intensity so subject-aware splits behave like they do
on real data. It exists because the real corpus is license-gated; the
training code path is identical either way.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import DataError, DatasetPool, EyeImage, LabelMask, RandomStream, ValidationError

LabeledItem = tuple[EyeImage, LabelMask]


# ---------------------------------------------------------------------------
# ingestion


def _load_image(path: Path, hw: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                im = im.convert("L")
            im = im.resize((hw[1], hw[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def _load_mask(path: Path, hw: tuple[int, int], num_classes: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I", "I;16"):
                raise DataError(f"label file {path} must store 8-bit class indices, got mode {im.mode}")
            # read raw index values (palette images keep their indices);
            # nearest-neighbor resize never fabricates mixed classes
            raw = np.asarray(im, dtype=np.int64)
            if raw.min() < 0 or raw.max() >= num_classes:
                raise ValidationError(
                    f"label file {path} holds class {raw.max()} but only {num_classes} classes exist"
                )
            resized = im.resize((hw[1], hw[0]), Image.NEAREST)
            return np.asarray(resized, dtype=np.int64)
    except OSError as exc:
        raise DataError(f"cannot read label {path}: {exc}") from exc


def ingest_tree(root, hw: tuple[int, int] = (240, 320), num_classes: int = 4
                ) -> list[tuple[EyeImage, Optional[LabelMask]]]:
    """Read one images/labels tree; items without a label file get mask None."""
    root = Path(root)
    images_dir = root / "images"
    labels_dir = root / "labels"
    if not images_dir.is_dir():
        raise DataError(f"no images/ directory under {root}")
    items = []
    for img_path in sorted(images_dir.rglob("*.png")):
        rel = img_path.relative_to(images_dir)
        subject = rel.parts[0] if len(rel.parts) > 1 else None
        frame = img_path.stem
        label_path = labels_dir / rel
        mask = None
        if label_path.exists():
            with Image.open(img_path) as a, Image.open(label_path) as b:
                if a.size != b.size:
                    raise DataError(
                        f"image/label size mismatch for {img_path} ({a.size}) vs {label_path} ({b.size})"
                    )
            mask = LabelMask(_load_mask(label_path, hw, num_classes), num_classes=num_classes)
        img = EyeImage(_load_image(img_path, hw), frame_id=frame, subject_id=subject)
        items.append((img, mask))
    if not items:
        raise DataError(f"no .png frames found under {images_dir}")
    return items


def ingest(root, hw: tuple[int, int] = (240, 320), num_classes: int = 4
           ) -> tuple[DatasetPool, list[LabeledItem]]:
    """Build (train pool, validation set) from a dataset root.

    A root with ``train/`` and ``validation/`` subtrees uses them; a flat
    root (images/ at top level) becomes the train pool with an empty
    validation set. Validation frames must all be labeled.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    if (root / "train").is_dir():
        train_items = ingest_tree(root / "train", hw, num_classes)
        val_items: list[LabeledItem] = []
        if (root / "validation").is_dir():
            for img, mask in ingest_tree(root / "validation", hw, num_classes):
                if mask is None:
                    raise DataError(f"validation frame {img.frame_id} has no label file")
                val_items.append((img, mask))
    else:
        train_items = ingest_tree(root, hw, num_classes)
        val_items = []
    pool = DatasetPool(
        labeled=[(i, m) for i, m in train_items if m is not None],
        unlabeled=[i for i, m in train_items if m is None],
    )
    return pool, val_items


def export_dataset(items: Sequence[tuple[EyeImage, Optional[LabelMask]]], root) -> Path:
    """Write frames (and masks, as 8-bit class indices) in the ingest layout."""
    root = Path(root)
    for img, mask in items:
        subject = img.subject_id or "s00"
        img_path = root / "images" / subject / f"{img.frame_id}.png"
        img_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(img.pixels * 255.0).astype(np.uint8)).save(img_path)
        if mask is not None:
            mask_path = root / "labels" / subject / f"{img.frame_id}.png"
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(mask.classes.astype(np.uint8)).save(mask_path)
    return root


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    k: int
    mode: str = "multi"  # "multi" or "single"
    subject: Optional[str] = None
    seed: int = 0
    unlabeled_cap: Optional[int] = None  # cap m for fixed-size experiments

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.mode not in ("multi", "single"):
            raise ValidationError(f"mode must be multi or single, got {self.mode!r}")


def _by_subject(items: Sequence[LabeledItem]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for idx, (img, _) in enumerate(items):
        groups.setdefault(img.subject_id or "", []).append(idx)
    return groups


def make_split(pool: DatasetPool, spec: SplitSpec) -> DatasetPool:
    """Select spec.k labeled frames; everything else becomes unlabeled.

    Multi-subject mode takes one frame each from k random subjects when
    k < #subjects, otherwise floor(k/S) per subject with the remainder
    spread one-per-subject at random. Single-subject mode draws all k
    frames from one participant.
    """
    items = pool.labeled
    if spec.k > len(items):
        raise DataError(f"requested k={spec.k} but only {len(items)} labeled frames exist")
    rng = RandomStream(spec.seed).child("split")
    groups = _by_subject(items)
    subjects = sorted(groups)

    if spec.mode == "single":
        subject = spec.subject
        if subject is None:
            subject = subjects[int(rng.integers(len(subjects)))]
        if subject not in groups:
            raise DataError(f"subject {subject!r} not present in the pool")
        frames = groups[subject]
        if spec.k > len(frames):
            raise DataError(
                f"subject {subject!r} has {len(frames)} frames, cannot label k={spec.k}"
            )
        chosen = sorted(rng.choice(len(frames), size=spec.k, replace=False).tolist())
        picked = [frames[i] for i in chosen]
    else:
        s = len(subjects)
        if spec.k < s:
            subj_idx = sorted(rng.choice(s, size=spec.k, replace=False).tolist())
            picked = []
            for si in subj_idx:
                frames = groups[subjects[si]]
                picked.append(frames[int(rng.integers(len(frames)))])
        else:
            q, r = divmod(spec.k, s)
            extra = set(rng.choice(s, size=r, replace=False).tolist()) if r else set()
            picked = []
            for si, subject in enumerate(subjects):
                frames = groups[subject]
                want = q + (1 if si in extra else 0)
                if want > len(frames):
                    raise DataError(
                        f"subject {subject!r} has {len(frames)} frames, "
                        f"cannot allocate {want} labeled"
                    )
                chosen = sorted(rng.choice(len(frames), size=want, replace=False).tolist())
                picked.extend(frames[i] for i in chosen)

    picked_set = set(picked)
    labeled = [items[i] for i in sorted(picked_set)]
    unlabeled = [items[i][0] for i in range(len(items)) if i not in picked_set]
    unlabeled += list(pool.unlabeled)
    if spec.unlabeled_cap is not None and len(unlabeled) > spec.unlabeled_cap:
        keep = sorted(rng.choice(len(unlabeled), size=spec.unlabeled_cap, replace=False).tolist())
        unlabeled = [unlabeled[i] for i in keep]
    return DatasetPool(labeled=labeled, unlabeled=unlabeled)


def write_manifest(path, spec: SplitSpec, pool: DatasetPool) -> None:
    payload = {
        "seed": spec.seed,
        "mode": spec.mode,
        "k": spec.k,
        "subject": spec.subject,
        "unlabeled_cap": spec.unlabeled_cap,
        "labeled": [[img.subject_id, img.frame_id] for img, _ in pool.labeled],
        "unlabeled": [[img.subject_id, img.frame_id] for img in pool.unlabeled],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# synthetic eyes


@dataclass(frozen=True)
class SyntheticEyeParams:
    """Resolved geometry and shading for one rendered frame.

    Axes are (horizontal, vertical) semi-axes in the frame rotated by
    ``tilt_deg``; the pupil shares the iris center, so containment reduces
    to axis inequalities, which the sampler enforces with a safety margin.
    """

    size: tuple[int, int]
    center: tuple[float, float]  # sclera center (y, x)
    tilt_deg: float
    sclera_axes: tuple[float, float]
    iris_center: tuple[float, float]
    iris_axes: tuple[float, float]
    pupil_axes: tuple[float, float]
    skin_level: float
    sclera_level: float
    iris_level: float
    pupil_level: float
    noise: float
    occlusion: float  # fraction of the eye's vertical extent hidden from the top


@dataclass(frozen=True)
class SubjectBase:
    """Per-subject geometry/appearance that frames jitter around.

    Ranges are deliberately wide: skin, sclera and iris reflectance overlap
    across subjects, so a model trained on a few participants cannot rely on
    absolute intensity alone and unlabeled subjects carry real information.
    """

    center: tuple[float, float]
    tilt_deg: float
    sclera_axes: tuple[float, float]
    iris_scale: float
    skin_level: float
    sclera_level: float
    iris_level: float
    noise: float


def sample_subject(rng: RandomStream, size: tuple[int, int]) -> SubjectBase:
    h, w = size
    return SubjectBase(
        center=(
            h / 2.0 + float(rng.uniform(-0.12, 0.12)) * h,
            w / 2.0 + float(rng.uniform(-0.12, 0.12)) * w,
        ),
        tilt_deg=float(rng.uniform(-12.0, 12.0)),
        sclera_axes=(
            float(rng.uniform(0.26, 0.42)) * w,
            float(rng.uniform(0.22, 0.36)) * h,
        ),
        iris_scale=float(rng.uniform(0.40, 0.62)),
        skin_level=float(rng.uniform(0.35, 0.72)),
        sclera_level=float(rng.uniform(0.62, 0.95)),
        iris_level=float(rng.uniform(0.12, 0.50)),
        noise=float(rng.uniform(0.03, 0.08)),
    )


def sample_eye_params(rng: RandomStream, size: tuple[int, int],
                      base: Optional[SubjectBase] = None) -> SyntheticEyeParams:
    """Draw one frame's parameters: gaze offset, pupil dilation, lighting."""
    if base is None:
        base = sample_subject(rng, size)
    a_s, b_s = base.sclera_axes
    iris_r = base.iris_scale * b_s
    iris_axes = (iris_r * float(rng.uniform(0.95, 1.1)), iris_r)
    # gaze: iris/pupil center moves inside the sclera with a containment margin
    max_du = 0.8 * (a_s - iris_axes[0])
    max_dv = 0.8 * (b_s - iris_axes[1])
    du = float(rng.uniform(-max_du, max_du))
    dv = float(rng.uniform(-max_dv, max_dv))
    t = math.radians(base.tilt_deg)
    cy, cx = base.center
    iris_center = (cy + du * math.sin(t) + dv * math.cos(t),
                   cx + du * math.cos(t) - dv * math.sin(t))
    dilation = float(rng.uniform(0.30, 0.60))
    brightness = float(rng.uniform(0.8, 1.2))
    return SyntheticEyeParams(
        size=size,
        center=base.center,
        tilt_deg=base.tilt_deg,
        sclera_axes=base.sclera_axes,
        iris_center=iris_center,
        iris_axes=iris_axes,
        pupil_axes=(dilation * iris_axes[0], dilation * iris_axes[1]),
        skin_level=min(1.0, base.skin_level * brightness),
        sclera_level=min(1.0, base.sclera_level * brightness),
        iris_level=min(1.0, base.iris_level * brightness),
        pupil_level=float(rng.uniform(0.03, 0.10)),
        noise=base.noise,
        occlusion=max(0.0, float(rng.uniform(-0.2, 0.45))),
    )


def _ellipse_mask(size, center, axes, tilt_deg) -> np.ndarray:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    t = math.radians(tilt_deg)
    dx = xs - center[1]
    dy = ys - center[0]
    u = dx * math.cos(t) + dy * math.sin(t)
    v = -dx * math.sin(t) + dy * math.cos(t)
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def render_eye(params: SyntheticEyeParams, rng: RandomStream) -> tuple[np.ndarray, np.ndarray]:
    """Render (image, mask); the mask is exact by construction."""
    h, w = params.size
    sclera = _ellipse_mask(params.size, params.center, params.sclera_axes, params.tilt_deg)
    iris = _ellipse_mask(params.size, params.iris_center, params.iris_axes, params.tilt_deg)
    pupil = _ellipse_mask(params.size, params.iris_center, params.pupil_axes, params.tilt_deg)
    iris &= sclera  # safety: containment is enforced by the sampler
    pupil &= iris

    mask = np.zeros((h, w), dtype=np.int64)
    mask[sclera] = 1
    mask[iris] = 2
    mask[pupil] = 3

    img = np.full((h, w), params.skin_level, dtype=np.float64)
    img[sclera] = params.sclera_level
    img[iris] = params.iris_level
    img[pupil] = params.pupil_level

    if params.occlusion > 0.0:
        top = params.center[0] - params.sclera_axes[1]
        cut = int(round(top + params.occlusion * 2.0 * params.sclera_axes[1]))
        if cut > 0:
            mask[: min(cut, h)] = 0
            img[: min(cut, h)] = params.skin_level

    # soft edges, a lighting gradient of random direction/strength, contrast
    # jitter, then sensor noise; the photometric variation is what makes
    # contrast-invariance worth learning
    img = gaussian_filter(img, sigma=0.8, mode="nearest")
    strength = float(rng.uniform(0.0, 0.15))
    theta = float(rng.uniform(0.0, 2.0 * math.pi))
    ys, xs = np.mgrid[0:h, 0:w]
    ramp = (math.cos(theta) * (xs / max(w - 1, 1) - 0.5)
            + math.sin(theta) * (ys / max(h - 1, 1) - 0.5))
    contrast = float(rng.uniform(0.75, 1.25))
    img = (img - 0.5) * contrast + 0.5 + strength * ramp
    img = img + rng.normal(0.0, params.noise, size=(h, w))
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def generate_synthetic(
    n: int,
    rng: RandomStream,
    size: tuple[int, int] = (64, 96),
    n_subjects: int = 8,
    prefix: str = "s",
) -> list[LabeledItem]:
    """Render n labeled frames grouped into pseudo-subjects sharing geometry."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    n_subjects = max(1, min(n_subjects, n))
    per, extra = divmod(n, n_subjects)
    items: list[LabeledItem] = []
    for si in range(n_subjects):
        srng = rng.child("subject", si)
        base = sample_subject(srng.child("base"), size)
        count = per + (1 if si < extra else 0)
        for fi in range(count):
            frng = srng.child("frame", fi)
            params = sample_eye_params(frng.child("params"), size, base)
            px, mask = render_eye(params, frng.child("render"))
            subject_id = f"{prefix}{si:02d}"
            img = EyeImage(px, frame_id=f"{subject_id}_f{fi:03d}", subject_id=subject_id)
            items.append((img, LabelMask(mask)))
    return items
