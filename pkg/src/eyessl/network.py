"""Segmentation network: a compact U-shaped encoder-decoder.

The architecture is a contract, not a fixed design: any model mapping
B x 1 x H x W images to per-pixel class probabilities of the same spatial
size works with the training engine. Two presets are provided -- ``full``
(240x320) and ``desk`` (64x96), the latter small enough that the entire
test and acceptance suite trains on CPU.

GroupNorm is used instead of BatchNorm so a forward pass is a pure
function of (parameters, input): label guessing and evaluation then see
exactly the same function the optimizer trains.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import RandomStream, StructuralError, ValidationError

_PRESETS = {
    "desk": dict(depth=3, base_channels=8, num_classes=4, input_hw=(64, 96)),
    "full": dict(depth=5, base_channels=32, num_classes=4, input_hw=(240, 320)),
}

_GROWTH_CAP = 4  # channel multiplier saturates at base * 4


@dataclass(frozen=True)
class ModelSpec:
    depth: int
    base_channels: int
    num_classes: int
    input_hw: tuple[int, int]

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.num_classes < 2:
            raise ValidationError(f"bad model spec: {self}")
        factor = 2 ** (self.depth - 1)
        h, w = self.input_hw
        if h % factor or w % factor:
            raise ValidationError(
                f"input {h}x{w} must be divisible by {factor} for depth {self.depth}"
            )

    @classmethod
    def preset(cls, name: str, num_classes: int | None = None,
               input_hw: tuple[int, int] | None = None) -> "ModelSpec":
        if name not in _PRESETS:
            raise ValidationError(f"unknown preset {name!r}, choose from {sorted(_PRESETS)}")
        kw = dict(_PRESETS[name])
        if num_classes is not None:
            kw["num_classes"] = num_classes
        if input_hw is not None:
            kw["input_hw"] = tuple(input_hw)
        return cls(**kw)

    @classmethod
    def from_config(cls, cfg) -> "ModelSpec":
        return cls.preset(cfg.model, num_classes=cfg.num_classes, input_hw=cfg.input_hw)

    def channels(self, level: int) -> int:
        return self.base_channels * min(2 ** level, _GROWTH_CAP)


def _groups(ch: int) -> int:
    for g in (4, 2):
        if ch % g == 0 and ch >= g:
            return g
    return 1


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class SegNet(nn.Module):
    """Encoder-decoder with skip connections and a softmax head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        chans = [spec.channels(i) for i in range(spec.depth)]
        self.encoders = nn.ModuleList()
        c_prev = 1
        for c in chans:
            self.encoders.append(ConvBlock(c_prev, c))
            c_prev = c
        self.decoders = nn.ModuleList()
        for i in range(spec.depth - 2, -1, -1):
            self.decoders.append(ConvBlock(c_prev + chans[i], chans[i]))
            c_prev = chans[i]
        self.head = nn.Conv2d(c_prev, spec.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expected = (1,) + tuple(self.spec.input_hw)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise StructuralError(
                f"expected input Bx{expected[0]}x{expected[1]}x{expected[2]}, got {tuple(x.shape)}"
            )
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
        return torch.softmax(self.head(x), dim=1)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_params(spec: ModelSpec, rng: RandomStream) -> SegNet:
    """Build a model with fan-in-scaled uniform weights drawn from ``rng``.

    Drawing from the numpy stream (rather than torch's global RNG) keeps a
    whole run reproducible from a single seed.
    """
    model = SegNet(spec)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=tuple(module.weight.shape))
                module.weight.copy_(torch.from_numpy(w.astype(np.float32)))
                if module.bias is not None:
                    b = rng.uniform(-bound, bound, size=tuple(module.bias.shape))
                    module.bias.copy_(torch.from_numpy(b.astype(np.float32)))
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
    return model


def predict_probs(model: nn.Module, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """No-grad forward over an (N, H, W) stack; returns (N, P, H, W) float32."""
    arr = np.array(images, dtype=np.float32)  # writable copy for torch.from_numpy
    if arr.ndim == 2:
        arr = arr[None]
    outs = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for i in range(0, len(arr), batch_size):
            x = torch.from_numpy(arr[i : i + batch_size]).unsqueeze(1)
            outs.append(model(x).numpy())
    if was_training:
        model.train()
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: SegNet, config_hash: str, extra: dict | None = None) -> None:
    payload = {
        "state_dict": model.state_dict(),
        "model_spec": asdict(model.spec),
        "config_hash": config_hash,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, config=None) -> tuple[SegNet, dict]:
    """Restore a checkpointed model; validates the stored config hash when a
    config is supplied."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    spec_kw = dict(payload["model_spec"])
    spec_kw["input_hw"] = tuple(spec_kw["input_hw"])
    spec = ModelSpec(**spec_kw)
    if config is not None and payload.get("config_hash") != config.hash():
        raise ValidationError(
            f"checkpoint {path} was written under a different config "
            f"(hash {payload.get('config_hash')!r} != {config.hash()!r})"
        )
    model = SegNet(spec)
    model.load_state_dict(payload["state_dict"])
    return model, payload
