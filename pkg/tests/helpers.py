"""Small builders shared by the training, CLI and acceptance tests."""

import numpy as np

from aresgaze.backbone import BackboneConfig
from aresgaze.data.prepare import GazeArrays
from aresgaze.gazenet import EyeInputModel, GazeNetConfig

TINY_CHANNELS = (8, 16, 32)


def tiny_config(attention=True, face=32, eye=24, nh=2, hidden=16, model=EyeInputModel.SE) -> GazeNetConfig:
    eye_extent = (eye, eye) if model is EyeInputModel.SE else (eye // 2, eye)
    return GazeNetConfig(
        face=BackboneConfig(attention=attention, input_channels=3, input_extent=(face, face),
                            stage_channels=TINY_CHANNELS, nh=nh),
        eyes=BackboneConfig(attention=attention, input_channels=1, input_extent=eye_extent,
                            stage_channels=TINY_CHANNELS, nh=nh),
        eye_model=model, hidden=hidden,
    )


def random_arrays(config: GazeNetConfig, subjects: int, per_subject: int, seed: int = 0,
                  dtype=np.float64) -> GazeArrays:
    rng = np.random.default_rng(seed)
    n = subjects * per_subject
    eye_channels = 1 if config.eye_model is EyeInputModel.SE else 2
    return GazeArrays(
        face=rng.uniform(-0.5, 0.5, (n, 3, *config.face.input_extent)).astype(dtype),
        eyes=rng.uniform(-0.5, 0.5, (n, eye_channels, *config.eyes.input_extent)).astype(dtype),
        gaze=rng.uniform(-0.4, 0.4, (n, 2)),
        head=rng.uniform(-0.6, 0.6, (n, 2)),
        light=rng.uniform(0, 255, n),
        sample_ids=[f"s{i // per_subject}_{i % per_subject:03d}" for i in range(n)],
        subject_ids=[f"s{i // per_subject}" for i in range(n)],
    )
