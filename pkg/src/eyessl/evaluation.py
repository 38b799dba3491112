"""IoU metrics, per-class reporting, and experiment report emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import LabelMask, StructuralError

CLASS_NAMES = ("background", "sclera", "iris", "pupil")

# overlay palette (background, sclera, iris, pupil), blended at OVERLAY_ALPHA
CLASS_COLORS = ((64, 64, 64), (66, 135, 245), (52, 168, 83), (234, 67, 53))
OVERLAY_ALPHA = 0.5

METHOD_ORDER = ("SL", "SSL_D", "SSL_SS")


@dataclass(frozen=True)
class IoUReport:
    per_class: tuple[float, ...]  # NaN marks classes absent from both masks
    mean: float
    n_images: int

    def class_iou(self, name: str) -> float:
        return self.per_class[CLASS_NAMES.index(name)]


def iou(pred, target, num_classes: int | None = None) -> np.ndarray:
    """Per-class intersection over union; empty-union classes come back NaN."""
    p = pred.classes if isinstance(pred, LabelMask) else np.asarray(pred)
    t = target.classes if isinstance(target, LabelMask) else np.asarray(target)
    if p.shape != t.shape:
        raise StructuralError(f"pred {p.shape} does not match target {t.shape}")
    if num_classes is None:
        num_classes = int(max(p.max(), t.max())) + 1
    inter, union = _counts(p, t, num_classes)
    with np.errstate(invalid="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def _counts(p: np.ndarray, t: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    inter = np.empty(num_classes, dtype=np.int64)
    union = np.empty(num_classes, dtype=np.int64)
    for c in range(num_classes):
        pc = p == c
        tc = t == c
        inter[c] = np.count_nonzero(pc & tc)
        union[c] = np.count_nonzero(pc | tc)
    return inter, union


def _mean_defined(values: np.ndarray) -> float:
    defined = values[~np.isnan(values)]
    return float(defined.mean()) if defined.size else float("nan")


def evaluate(model, dataset: Sequence[tuple], batch_size: int = 16, per_image: bool = False) -> IoUReport:
    """Score a model on labeled data via hard-argmax predictions.

    Default aggregation accumulates global per-class intersection/union
    counts over the whole dataset before dividing; ``per_image`` instead
    averages per-image IoU values (classes undefined in an image are
    skipped for that image).
    """
    from .network import predict_probs  # local import to avoid a cycle

    if not dataset:
        raise StructuralError("evaluate needs a non-empty dataset")
    images = np.stack([img.pixels for img, _ in dataset])
    masks = np.stack([m.classes for _, m in dataset])
    num_classes = dataset[0][1].num_classes
    probs = predict_probs(model, images, batch_size=batch_size)
    preds = probs.argmax(axis=1)

    if per_image:
        per = np.stack([iou(pr, gt, num_classes) for pr, gt in zip(preds, masks)])
        with np.errstate(invalid="ignore"):
            per_class = np.nanmean(per, axis=0)
    else:
        inter = np.zeros(num_classes, dtype=np.int64)
        union = np.zeros(num_classes, dtype=np.int64)
        for pr, gt in zip(preds, masks):
            i, u = _counts(pr, gt, num_classes)
            inter += i
            union += u
        with np.errstate(invalid="ignore"):
            per_class = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    return IoUReport(
        per_class=tuple(float(v) for v in per_class),
        mean=_mean_defined(per_class),
        n_images=len(dataset),
    )


# ---------------------------------------------------------------------------
# reports


def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def render_report(summaries: Sequence[dict], out_dir, formats=("table", "csv", "plot-data")) -> list[Path]:
    """Emit comparison tables from run summaries.

    Each summary is a dict with keys ``method``, ``k_labeled``,
    ``subject_mode``, ``seed``, ``miou`` (fraction in [0,1]) and optionally
    ``per_class`` (list, NaN/None for undefined). Values are averaged over
    seeds per (method, k) cell; percent-change rows report each SSL method's
    improvement over the supervised baseline. Classes with an empty union
    are excluded from means and left blank in the CSV.
    """
    required = {"method", "k_labeled", "miou"}
    for s in summaries:
        missing = required - set(s)
        if missing:
            raise StructuralError(f"run summary missing keys {sorted(missing)}: {s}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ks = sorted({int(s["k_labeled"]) for s in summaries})
    methods = [m for m in METHOD_ORDER if any(s["method"] == m for s in summaries)]

    def cell(method: str, k: int):
        vals = [s["miou"] for s in summaries if s["method"] == method and int(s["k_labeled"]) == k]
        return float(np.mean(vals)) if vals else None

    written = []
    if "table" in formats:
        width = 10
        lines = ["mean IoU (%) by labeled-set size", ""]
        header = "method".ljust(width) + "".join(f"k={k}".rjust(width) for k in ks)
        lines.append(header)
        for m in methods:
            row = m.ljust(width)
            for k in ks:
                v = cell(m, k)
                row += (_pct(v) if v is not None else "-").rjust(width)
            lines.append(row)
        if "SL" in methods:
            for m in methods:
                if m == "SL":
                    continue
                row = f"%chg {m}".ljust(width)
                for k in ks:
                    base, v = cell("SL", k), cell(m, k)
                    if base and v is not None:
                        row += f"{100.0 * (v - base) / base:.2f}".rjust(width)
                    else:
                        row += "-".rjust(width)
                lines.append(row)
        table_path = out_dir / "report_table.txt"
        table_path.write_text("\n".join(lines) + "\n")
        written.append(table_path)

    if "csv" in formats:
        csv_path = out_dir / "report.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "k_labeled", "subject_mode", "seed", "class", "iou"])
            for s in summaries:
                mode = s.get("subject_mode", "multi")
                seed = s.get("seed", 0)
                writer.writerow([s["method"], s["k_labeled"], mode, seed, "mean", _pct(s["miou"])])
                for name, v in zip(CLASS_NAMES, s.get("per_class") or ()):
                    if v is None or (isinstance(v, float) and math.isnan(v)):
                        writer.writerow([s["method"], s["k_labeled"], mode, seed, name, ""])
                    else:
                        writer.writerow([s["method"], s["k_labeled"], mode, seed, name, _pct(v)])
        written.append(csv_path)

    if "plot-data" in formats:
        plot_path = out_dir / "report_plot.txt"
        with plot_path.open("w") as fh:
            fh.write("k,method,mean_iou\n")
            for k in ks:
                for m in methods:
                    v = cell(m, k)
                    if v is not None:
                        fh.write(f"{k},{m},{_pct(v)}\n")
        written.append(plot_path)
    return written


def overlay_masks(image, pred: LabelMask, path) -> Path:
    """Write the image with a translucent class-colored overlay."""
    px = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    cls = pred.classes if isinstance(pred, LabelMask) else np.asarray(pred)
    if px.shape != cls.shape:
        raise StructuralError(f"image {px.shape} does not match mask {cls.shape}")
    gray = np.repeat((px * 255.0)[..., None], 3, axis=2)
    palette = np.asarray(CLASS_COLORS, dtype=np.float64)
    colors = palette[cls]
    blended = np.round((1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * colors)
    out = np.clip(blended, 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out).save(path)
    return path
