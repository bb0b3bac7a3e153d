"""Turn raw frames into normalized network inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..gazenet import EyeInputModel, GazeNetConfig
from ..geometry import extract_eye_patches, mean_intensity, normalize_face, resize_uint8
from .manifest import SampleRecord, read_manifest, replace, resolve
from .pnm import read_pnm


@dataclass
class NormalizedSample:
    face: np.ndarray  # Z x Z x 3 uint8
    left_eye: np.ndarray  # patch_h x patch_w uint8
    right_eye: np.ndarray
    light: float
    clipped: bool

    @property
    def stacked_eyes(self) -> np.ndarray:
        return np.concatenate([self.left_eye, self.right_eye], axis=0)


def normalize_sample(frame: np.ndarray, record: SampleRecord, Z: int = 112,
                     patch: tuple[int, int] = (30, 60)) -> NormalizedSample:
    lm = record.landmarks
    if lm is None:
        raise ValueError(f"{record.sample_id}: record has no landmarks")
    face, _ = normalize_face(frame, lm, Z)
    left, right, clipped = extract_eye_patches(face, *patch)
    return NormalizedSample(face, left, right, mean_intensity(face), clipped)


@dataclass
class GazeArrays:
    """Network-ready arrays for a list of samples."""

    face: np.ndarray  # (N, 3, H, W)
    eyes: np.ndarray  # (N, 1, H, W) stacked, or (N, 2, H, W) left/right
    gaze: np.ndarray  # (N, 2)
    head: np.ndarray  # (N, 2)
    light: np.ndarray  # (N,)
    sample_ids: list[str]
    subject_ids: list[str]

    def __len__(self) -> int:
        return len(self.sample_ids)

    def subset(self, idx) -> "GazeArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return GazeArrays(
            self.face[idx], self.eyes[idx], self.gaze[idx], self.head[idx], self.light[idx],
            [self.sample_ids[i] for i in idx], [self.subject_ids[i] for i in idx],
        )

    def eye_input(self, idx=None, model: EyeInputModel = EyeInputModel.SE):
        eyes = self.eyes if idx is None else self.eyes[idx]
        if EyeInputModel(model) is EyeInputModel.SE:
            return eyes
        return eyes[:, :1], eyes[:, 1:2]

    def astype(self, dtype) -> "GazeArrays":
        return GazeArrays(self.face.astype(dtype), self.eyes.astype(dtype), self.gaze, self.head, self.light,
                          self.sample_ids, self.subject_ids)


def image_to_input(img: np.ndarray) -> np.ndarray:
    """uint8 HxW(x3) -> float CxHxW centred on 0."""
    a = img.astype(np.float64) / 255.0 - 0.5
    if a.ndim == 2:
        return a[None]
    return a.transpose(2, 0, 1)


def build_arrays(normalized: list[NormalizedSample], records: list[SampleRecord],
                 config: GazeNetConfig, dtype=np.float32) -> GazeArrays:
    fh, fw = config.face.input_extent
    eh, ew = config.eyes.input_extent
    se = config.eye_model is EyeInputModel.SE
    faces, eyes = [], []
    for ns in normalized:
        faces.append(image_to_input(resize_uint8(ns.face, fh, fw)))
        if se:
            half = eh // 2
            left = resize_uint8(ns.left_eye, half, ew)
            right = resize_uint8(ns.right_eye, eh - half, ew)
            eyes.append(image_to_input(np.concatenate([left, right], axis=0)))
        else:
            eyes.append(np.concatenate([image_to_input(resize_uint8(ns.left_eye, eh, ew)),
                                        image_to_input(resize_uint8(ns.right_eye, eh, ew))]))
    return GazeArrays(
        face=np.stack(faces).astype(dtype),
        eyes=np.stack(eyes).astype(dtype),
        gaze=np.array([[r.gaze_pitch, r.gaze_yaw] for r in records]),
        head=np.array([[r.head_pitch, r.head_yaw] for r in records]),
        light=np.array([ns.light for ns in normalized]),
        sample_ids=[r.sample_id for r in records],
        subject_ids=[r.subject_id for r in records],
    )


def prepare_synthetic(samples: list[tuple[np.ndarray, SampleRecord]], config: GazeNetConfig, Z: int = 112,
                      dtype=np.float32) -> tuple[GazeArrays, list[SampleRecord]]:
    """Normalize in-memory synthetic samples; returns arrays and records with light filled."""
    patch = (30, 60)
    normalized = [normalize_sample(frame, rec, Z, patch) for frame, rec in samples]
    records = [replace(rec, light=ns.light) for (_, rec), ns in zip(samples, normalized)]
    return build_arrays(normalized, records, config, dtype), records


def eye_path(manifest_path, record: SampleRecord):
    """Stacked-eye image written next to the normalized face: ``eyes/<sample_id>.pgm``."""
    return resolve(manifest_path, record).parent.parent / "eyes" / f"{record.sample_id}.pgm"


def load_normalized(manifest_path) -> tuple[list[NormalizedSample], list[SampleRecord]]:
    """Read a normalized manifest with its face and stacked-eye images."""
    records = read_manifest(manifest_path)
    out = []
    for rec in records:
        if rec.light is None:
            raise ValueError(f"{rec.sample_id}: light level missing; is this a normalized manifest?")
        face = read_pnm(resolve(manifest_path, rec))
        eyes = read_pnm(eye_path(manifest_path, rec))
        if face.ndim != 3 or eyes.ndim != 2 or eyes.shape[0] % 2:
            raise ValueError(f"{rec.sample_id}: expected an RGB face and a gray stacked-eye image")
        half = eyes.shape[0] // 2
        out.append(NormalizedSample(face, eyes[:half], eyes[half:], rec.light, False))
    return out, records
