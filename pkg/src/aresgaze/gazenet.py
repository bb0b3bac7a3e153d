"""Two-branch gaze regressor: face backbone + eye backbone(s) + prediction head."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .backbone import Backbone, BackboneConfig
from .nn import Linear, Module
from .tensor import ConfigError, ShapeError, Tensor


class EyeInputModel(str, enum.Enum):
    SE = "se"  # stacked eyes, one pass
    DP = "dp"  # two passes through one shared backbone
    TB = "tb"  # one backbone per eye


def default_face_config() -> BackboneConfig:
    return BackboneConfig(input_channels=3, input_extent=(112, 112))


def default_eye_config(eye_model: EyeInputModel = EyeInputModel.SE) -> BackboneConfig:
    extent = (60, 60) if EyeInputModel(eye_model) is EyeInputModel.SE else (30, 60)
    return BackboneConfig(input_channels=1, input_extent=extent)


@dataclass(frozen=True)
class GazeNetConfig:
    face: BackboneConfig = field(default_factory=default_face_config)
    eyes: BackboneConfig = field(default_factory=default_eye_config)
    eye_model: EyeInputModel = EyeInputModel.SE
    hidden: int = 256

    def __post_init__(self):
        object.__setattr__(self, "eye_model", EyeInputModel(self.eye_model))

    @property
    def eye_feature_width(self) -> int:
        w = self.eyes.feature_width
        return 2 * w if self.eye_model is EyeInputModel.TB else w

    @property
    def fused_width(self) -> int:
        return self.face.feature_width + self.eye_feature_width

    def validate(self) -> None:
        h, w = self.eyes.input_extent
        if self.eye_model is EyeInputModel.SE and h != w:
            raise ConfigError(f"stacked-eyes input must be square, got {self.eyes.input_extent}")
        if self.eye_model is not EyeInputModel.SE and w != 2 * h:
            raise ConfigError(f"per-eye input must be 1:2 (h:w), got {self.eyes.input_extent}")
        if self.hidden < 1:
            raise ConfigError("hidden width must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eye_model"] = self.eye_model.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GazeNetConfig":
        return cls(
            face=BackboneConfig(**d["face"]),
            eyes=BackboneConfig(**d["eyes"]),
            eye_model=EyeInputModel(d["eye_model"]),
            hidden=int(d["hidden"]),
        )


class GazeNet(Module):
    def __init__(self, config: GazeNetConfig, rng: np.random.Generator | None = None, dtype=np.float64):
        config.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.dtype = np.dtype(dtype)
        self.face = Backbone(config.face, rng=rng, dtype=dtype)
        self.eye = Backbone(config.eyes, rng=rng, dtype=dtype)
        self.eye_right = Backbone(config.eyes, rng=rng, dtype=dtype) if config.eye_model is EyeInputModel.TB else None
        self.fc1 = Linear(config.fused_width, config.hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(config.hidden, 2, rng=rng, dtype=dtype)

    def backbones(self) -> list[Backbone]:
        return [b for b in (self.face, self.eye, self.eye_right) if b is not None]

    def forward(self, face, eyes):
        return gaze_forward(self, face, eyes)


def build_gaze_net(config: GazeNetConfig, rng: np.random.Generator | None = None, dtype=np.float64) -> GazeNet:
    return GazeNet(config, rng=rng, dtype=dtype)


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def gaze_forward(net: GazeNet, face, eyes) -> Tensor:
    """Predict ``(N, 2)`` (pitch, yaw) in radians.

    ``eyes`` is one stacked image batch for SE, or a ``(left, right)`` pair of
    batches for DP/TB.
    """
    face = _as_input(face, net.dtype)
    f_face = net.face(face)
    model = net.config.eye_model
    if model is EyeInputModel.SE:
        if isinstance(eyes, (tuple, list)):
            raise ShapeError("stacked-eyes model takes one eye image batch")
        f_eye = net.eye(_as_input(eyes, net.dtype))
    else:
        if not isinstance(eyes, (tuple, list)) or len(eyes) != 2:
            raise ShapeError(f"{model.value} model takes a (left, right) pair of eye batches")
        left, right = (_as_input(e, net.dtype) for e in eyes)
        if model is EyeInputModel.DP:
            f_eye = ops.add(net.eye(left), net.eye(right))
        else:
            f_eye = ops.concat_features(net.eye(left), net.eye_right(right))
    if f_eye.shape[0] != f_face.shape[0]:
        raise ShapeError("face and eye batches differ in size")
    fused = ops.concat_features(f_face, f_eye)
    hidden = ops.relu(net.fc1(fused))
    return net.fc2(hidden)


def count_parameters(net: Module) -> int:
    return int(sum(p.size for p in net.parameters()))
