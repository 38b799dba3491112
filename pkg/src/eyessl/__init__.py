"""Semi-supervised eye-region segmentation (pupil / iris / sclera).

Two consistency-based training modes on top of a supervised baseline:

* ``SSL_D``  -- guess labels for unlabeled images by averaging predictions
  over photometric (CLAHE + gamma) augmented copies and penalize the
  copies' predictions for drifting from the shared guess.
* ``SSL_SS`` -- additionally warp the copies with an invertible
  rotation/translation, predict, warp the predictions back, and use the
  averaged inverse as a second guess, masked so border fill never
  contributes to the loss.

Everything runs at two scales: ``full`` (240x320) and a ``desk`` preset
(64x96) small enough that the whole pipeline trains on a laptop CPU.
"""

from .core import (
    ConfigError,
    DataError,
    DatasetPool,
    EyeImage,
    LabelMask,
    ParameterError,
    RandomStream,
    SoftPrediction,
    StructuralError,
    TrainConfig,
    TrainingError,
    ValidationError,
    load_config,
    seeded_rng,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DatasetPool",
    "EyeImage",
    "LabelMask",
    "ParameterError",
    "RandomStream",
    "SoftPrediction",
    "StructuralError",
    "TrainConfig",
    "TrainingError",
    "ValidationError",
    "load_config",
    "seeded_rng",
]

__version__ = "0.1.0"
