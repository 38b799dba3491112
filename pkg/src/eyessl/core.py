"""Domain types, configuration, and deterministic randomness.

All other modules build on the value types here. Images and masks are
plain numpy arrays wrapped with just enough validation to catch shape
and range bugs at the module boundary instead of deep inside training.
"""

from __future__ import annotations

import dataclasses
import hashlib
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class EyeSSLError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EyeSSLError):
    """Unparseable or unknown configuration input."""


class ValidationError(EyeSSLError):
    """A value violates a documented invariant."""


class ParameterError(EyeSSLError):
    """An operation was called with an out-of-range parameter."""


class StructuralError(EyeSSLError):
    """Shapes or schemas of inputs do not line up."""


class DataError(EyeSSLError):
    """Dataset files are missing, unreadable, or inconsistent."""


class TrainingError(EyeSSLError):
    """The training loop hit a non-recoverable numerical state."""


# ---------------------------------------------------------------------------
# randomness


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ParameterError(f"stream key ints must be >= 0, got {part}")
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise ParameterError(f"stream key parts must be str or int, got {type(part)!r}")


class RandomStream:
    """Seeded random source with keyed child derivation.

    Children are derived from (seed, key path), not by consuming draws from
    the parent, so two code paths that spawn different numbers of children
    (or draw different amounts) never shift each other's randomness. This is
    what lets an SSL run with zero unsupervised weight follow the exact same
    data/augmentation trajectory as a purely supervised run.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(_key_part(p) for p in key)
        self._gen = np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=self.key)
        )

    def child(self, *key) -> "RandomStream":
        return RandomStream(self.seed, self.key + key)

    # passthroughs to the underlying generator
    def __getattr__(self, name):
        return getattr(self._gen, name)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, key={self.key})"


def seeded_rng(seed: int) -> RandomStream:
    """Root random stream for a run; equal seeds give equal draw sequences."""
    return RandomStream(seed)


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class EyeImage:
    """Single-channel eye image, pixel values in [0, 1]."""

    pixels: np.ndarray
    frame_id: str = ""
    subject_id: Optional[str] = None

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValidationError(f"image must be HxW, got shape {px.shape}")
        h, w = px.shape
        if h < 8 or w < 8:
            raise ValidationError(f"image too small ({h}x{w}), need at least 8x8")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError(
                f"pixel values outside [0,1]: min={px.min():.4g} max={px.max():.4g}"
            )
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def hw(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel integer class map; 0=background, 1=sclera, 2=iris, 3=pupil."""

    classes: np.ndarray
    num_classes: int = 4

    def __post_init__(self):
        cls = np.asarray(self.classes)
        if cls.ndim != 2 or not np.issubdtype(cls.dtype, np.integer):
            raise ValidationError(f"mask must be an integer HxW grid, got {cls.dtype} {cls.shape}")
        cls = cls.astype(np.int64, copy=True)
        if cls.min() < 0 or cls.max() >= self.num_classes:
            raise ValidationError(
                f"mask values must lie in [0, {self.num_classes - 1}], "
                f"got range [{cls.min()}, {cls.max()}]"
            )
        cls.flags.writeable = False
        object.__setattr__(self, "classes", cls)

    @property
    def hw(self) -> tuple[int, int]:
        return self.classes.shape

    def one_hot(self) -> "SoftPrediction":
        p = np.zeros((self.num_classes,) + self.classes.shape, dtype=np.float32)
        np.put_along_axis(p, self.classes[None], 1.0, axis=0)
        return SoftPrediction(p)


@dataclass(frozen=True)
class SoftPrediction:
    """Per-pixel class probabilities, shape (P, H, W).

    Channel sums are 1 within 1e-5 wherever the prediction is meaningful;
    inverse-warped predictions only guarantee this on their valid region,
    so the simplex check is an explicit method rather than a constructor
    hard failure.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float32)
        if p.ndim != 3:
            raise ValidationError(f"probabilities must be PxHxW, got shape {p.shape}")
        if p.min() < -1e-6 or p.max() > 1.0 + 1e-6:
            raise ValidationError("probabilities outside [0,1]")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    def check_simplex(self, where: Optional[np.ndarray] = None, tol: float = 1e-5) -> bool:
        """True when channel sums are 1 within tol (optionally only where a mask holds)."""
        sums = self.probs.sum(axis=0)
        if where is not None:
            if not where.any():
                return True
            sums = sums[where]
        return bool(np.abs(sums - 1.0).max() <= tol)

    def to_mask(self) -> LabelMask:
        return LabelMask(self.probs.argmax(axis=0), num_classes=self.num_classes)


@dataclass
class DatasetPool:
    """Labeled pairs plus unlabeled images available for training."""

    labeled: list[tuple[EyeImage, LabelMask]] = field(default_factory=list)
    unlabeled: list[EyeImage] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.labeled)

    @property
    def m(self) -> int:
        return len(self.unlabeled)


# ---------------------------------------------------------------------------
# configuration


def _default_gammas() -> tuple[float, ...]:
    return tuple(round(0.8 + 0.05 * i, 2) for i in range(9))


METHODS = ("SL", "SSL_D", "SSL_SS")
SPLIT_MODES = ("multi", "single")
MODEL_PRESETS = ("desk", "full")


@dataclass
class TrainConfig:
    """Every training knob; flat key/value config files map 1:1 onto fields."""

    # method and schedule
    method: str = "SL"
    seed: int = 0
    epochs: int = 250
    learning_rate: float = 0.001
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    lambda1: float = 1.0
    lambda2: float = 20.0
    lambda3: float = 1.0
    slope_u: float = 0.02
    slope_ss: float = 0.002
    schedule_cap_u: float = float("inf")
    schedule_cap_ss: float = float("inf")
    A: int = 2  # augmented copies per unlabeled item
    sharpen_temperature: float = 1.0  # 1.0 disables guess sharpening
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    # domain (photometric) augmentation
    gammas: tuple[float, ...] = field(default_factory=_default_gammas)
    clahe_clips: tuple[float, ...] = (1.0, 1.2, 1.5, 1.5, 1.5, 2.0)
    clahe_grids: tuple[int, ...] = (2, 4, 8, 8, 8, 16)
    p_clahe: float = 1.0
    p_gamma: float = 1.0

    # invertible spatial transform
    t_prob: float = 0.5
    p_rotate: float = 0.5
    p_translate: float = 0.8
    rot_max_deg: float = 5.0
    shift_max: int = 20

    # baseline augmentation applied to every training image
    p_flip: float = 0.5
    p_blur: float = 0.2
    blur_sigma_min: float = 0.5
    blur_sigma_max: float = 1.5
    p_lines: float = 0.2

    # losses
    boundary_d: int = 1
    boundary_w: float = 1.0

    # model / data shape
    model: str = "full"
    height: Optional[int] = None  # None = model preset size
    width: Optional[int] = None
    num_classes: int = 4

    # evaluation
    miou_per_image: bool = False
    eval_batch: int = 16

    # data and splits
    data_root: str = "synthetic"
    synth_train: int = 64
    synth_val: int = 16
    synth_subjects: int = 8
    k: int = 4
    split_mode: str = "multi"
    split_subject: Optional[str] = None
    unlabeled_cap: Optional[int] = None

    # run plumbing
    deterministic: bool = True
    out_root: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.A < 1:
            raise ValidationError(f"A must be >= 1, got {self.A}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if len(self.clahe_clips) != len(self.clahe_grids):
            raise ValidationError("clahe_clips and clahe_grids must have equal length")
        if not self.gammas:
            raise ValidationError("gammas must be non-empty")
        if any(g <= 0 for g in self.gammas):
            raise ValidationError("gamma values must be > 0")
        if any(c < 1.0 for c in self.clahe_clips):
            raise ValidationError("CLAHE clip values must be >= 1")
        if any(g < 1 for g in self.clahe_grids):
            raise ValidationError("CLAHE grid values must be >= 1")
        for name in ("p_clahe", "p_gamma", "t_prob", "p_rotate", "p_translate",
                     "p_flip", "p_blur", "p_lines"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be a probability, got {v}")
        if self.slope_u < 0 or self.slope_ss < 0:
            raise ValidationError("schedule slopes must be >= 0")
        if self.schedule_cap_u < 0 or self.schedule_cap_ss < 0:
            raise ValidationError("schedule caps must be >= 0")
        if self.sharpen_temperature <= 0:
            raise ValidationError("sharpen_temperature must be > 0")
        if self.boundary_d < 1:
            raise ValidationError(f"boundary_d must be >= 1, got {self.boundary_d}")
        if self.model not in MODEL_PRESETS:
            raise ValidationError(f"model must be one of {MODEL_PRESETS}, got {self.model!r}")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.split_mode not in SPLIT_MODES:
            raise ValidationError(f"split_mode must be one of {SPLIT_MODES}")
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.shift_max < 0 or self.rot_max_deg < 0:
            raise ValidationError("transform ranges must be >= 0")

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}: {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def hash(self) -> str:
        """Stable hash of everything that affects the result (out_root excluded)."""
        lines = [
            f"{f.name}: {_format_value(getattr(self, f.name))}"
            for f in dataclasses.fields(self)
            if f.name != "out_root"
        ]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()

    def with_overrides(self, pairs: Sequence[str]) -> "TrainConfig":
        """Apply repeatable ``key=value`` override strings; unknown keys fail hard."""
        values = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override must look like key=value, got {pair!r}")
            key, _, raw = pair.partition("=")
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, raw.strip())
        return TrainConfig(**values)

    @property
    def input_hw(self) -> tuple[int, int]:
        preset = {"desk": (64, 96), "full": (240, 320)}[self.model]
        h = self.height if self.height is not None else preset[0]
        w = self.width if self.width is not None else preset[1]
        return (h, w)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if v == float("inf") else repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float("inf") if raw.lower() == "inf" else float(raw)
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ftype == "str":
            return raw
        if ftype == "Optional[str]":
            return None if raw.lower() == "none" or raw == "" else raw
        if ftype == "Optional[int]":
            return None if raw.lower() == "none" or raw == "" else int(raw)
        if ftype == "tuple[float, ...]":
            return tuple(float(x) for x in raw.split(","))
        if ftype == "tuple[int, ...]":
            return tuple(int(x) for x in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for key {key!r}: {raw!r}") from exc
    raise ConfigError(f"unhandled config field type for {key!r}")  # pragma: no cover


def load_config(path) -> TrainConfig:
    """Load a flat ``key: value`` config file; unspecified keys take defaults.

    Unknown keys are a hard error so hyperparameter typos cannot silently
    fall back to defaults.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if ":" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key: value', got {stripped!r}")
        key, _, raw = stripped.partition(":")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, raw.strip())
    return TrainConfig(**values)
