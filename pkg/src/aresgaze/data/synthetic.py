"""Procedural face-proxy frames with known gaze, head pose and eye landmarks.

Each subject gets a fixed style (shades, eye size and spacing, face shape).
A frame shows a face ellipse, two eye disks whose pupils are displaced by
``c * (tan(yaw), tan(pitch))`` with ``c = 0.35 * eye radius``, and a nose
stroke whose tip encodes head pitch/yaw. Everything is rotated by the head
roll about the mid-eye point and finally scaled by a light multiplier.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geometry import EyeLandmarks
from .manifest import SampleRecord, write_manifest
from .pnm import write_pnm

PUPIL_GAIN = 0.35
BACKGROUND = 40.0


@dataclass(frozen=True)
class SyntheticConfig:
    subjects: int = 4
    samples_per_subject: int = 10
    gaze_pitch_range: tuple[float, float] = (-0.3, 0.3)
    gaze_yaw_range: tuple[float, float] = (-0.45, 0.45)
    head_mode: str = "static"  # "static" (roll ~ 0) or "mobile" (wide roll and pose)
    light_range: tuple[float, float] = (0.4, 1.1)
    extent: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.subjects < 1 or self.samples_per_subject < 1:
            raise ValueError("subjects and samples_per_subject must be positive")
        if self.head_mode not in ("static", "mobile"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        lo, hi = self.gaze_pitch_range
        if not (-math.pi / 2 < lo <= hi < math.pi / 2):
            raise ValueError("gaze pitch range must lie inside (-pi/2, pi/2)")
        lo, hi = self.gaze_yaw_range
        if not (-math.pi / 2 < lo <= hi < math.pi / 2):
            raise ValueError("gaze yaw range must lie inside (-pi/2, pi/2)")
        if not (0 < self.light_range[0] <= self.light_range[1] <= 1.1):
            raise ValueError("light multipliers must lie in (0, 1.1]")

    @property
    def roll_range(self) -> tuple[float, float]:
        return (-0.02, 0.02) if self.head_mode == "static" else (-0.5, 0.5)

    @property
    def head_range(self) -> tuple[float, float]:
        return (-0.1, 0.1) if self.head_mode == "static" else (-0.45, 0.45)


@dataclass(frozen=True)
class SubjectStyle:
    skin: tuple[float, float, float]
    sclera: float
    pupil: tuple[float, float, float]
    eye_distance: float  # inter-eye distance as a fraction of the frame extent
    eye_radius: float  # as a fraction of the inter-eye distance
    face_aspect: float
    nose_shade: float


def subject_style(seed: int, subject: int) -> SubjectStyle:
    rng = np.random.default_rng([seed, subject, 7919])
    base = rng.uniform(90, 190)
    skin = tuple(float(np.clip(base * f, 0, 210)) for f in (1.0, rng.uniform(0.75, 0.9), rng.uniform(0.6, 0.8)))
    return SubjectStyle(
        skin=skin,
        sclera=float(rng.uniform(200, 225)),
        pupil=tuple(float(v) for v in rng.uniform(5, 45, size=3)),
        eye_distance=float(rng.uniform(0.27, 0.33)),
        eye_radius=float(rng.uniform(0.17, 0.21)),
        face_aspect=float(rng.uniform(1.15, 1.35)),
        nose_shade=float(rng.uniform(0.7, 0.85)),
    )


def _coverage(signed_dist: np.ndarray) -> np.ndarray:
    """Anti-aliased coverage from a signed distance in pixels (negative inside)."""
    return np.clip(0.5 - signed_dist, 0.0, 1.0)


def _paint(canvas: np.ndarray, cover: np.ndarray, color) -> None:
    canvas *= 1 - cover[..., None]
    canvas += cover[..., None] * np.asarray(color, dtype=np.float64)


def render_synthetic_sample(gaze, head_roll: float, light: float, extent: int, style: SubjectStyle,
                            rng: np.random.Generator, head_pose=(0.0, 0.0)):
    """Draw one frame.

    Returns ``(frame, landmarks, info)``; ``info`` holds the geometry used
    (mid-eye point, inter-eye distance, eye radius and pupil offsets in the
    unrotated face frame).
    """
    if extent < 48:
        raise ValueError(f"frame extent {extent} too small to fit a face")
    pitch, yaw = float(gaze[0]), float(gaze[1])
    if not (abs(pitch) < math.pi / 2 and abs(yaw) < math.pi / 2):
        raise ValueError("gaze angles must lie inside (-pi/2, pi/2)")
    D = style.eye_distance * extent * rng.uniform(0.92, 1.08)
    go = np.array([extent / 2.0, extent * 0.42]) + rng.uniform(-0.04, 0.04, size=2) * extent
    r_eye = style.eye_radius * D
    r_pupil = 0.42 * r_eye
    c = PUPIL_GAIN * r_eye
    offset = np.array([c * math.tan(yaw), c * math.tan(pitch)])

    ys, xs = np.mgrid[0:extent, 0:extent].astype(np.float64)
    cos_r, sin_r = math.cos(head_roll), math.sin(head_roll)
    dx, dy = xs - go[0], ys - go[1]
    # face-frame coordinates (inverse roll)
    u = cos_r * dx + sin_r * dy
    v = -sin_r * dx + cos_r * dy

    canvas = np.full((extent, extent, 3), BACKGROUND)
    fa, fb = 0.95 * D, D * style.face_aspect
    fv = v - 0.35 * D
    rho = np.sqrt((u / fa) ** 2 + (fv / fb) ** 2)
    _paint(canvas, _coverage((rho - 1.0) * min(fa, fb)), style.skin)

    hp, hy = float(head_pose[0]), float(head_pose[1])
    base = np.array([0.0, 0.2 * D])
    tip = np.array([0.0, 0.6 * D]) + 0.35 * D * np.array([math.sin(hy), math.sin(hp)])
    seg = tip - base
    t = np.clip(((u - base[0]) * seg[0] + (v - base[1]) * seg[1]) / float(seg @ seg), 0.0, 1.0)
    dist = np.hypot(u - base[0] - t * seg[0], v - base[1] - t * seg[1])
    radius = 0.09 * D * (1 - 0.5 * t)
    _paint(canvas, _coverage(dist - radius), tuple(s * style.nose_shade for s in style.skin))

    centers = {"left": np.array([D / 2.0, 0.0]), "right": np.array([-D / 2.0, 0.0])}
    for center in centers.values():
        _paint(canvas, _coverage(np.hypot(u - center[0], v - center[1]) - r_eye), (style.sclera,) * 3)
        pc = center + offset
        _paint(canvas, _coverage(np.hypot(u - pc[0], v - pc[1]) - r_pupil), style.pupil)

    frame = np.clip(np.rint(canvas * light), 0, 255).astype(np.uint8)
    rot = np.array([[cos_r, -sin_r], [sin_r, cos_r]])
    left = go + rot @ centers["left"]
    right = go + rot @ centers["right"]
    lm = EyeLandmarks((float(left[0]), float(left[1])), (float(right[0]), float(right[1])))
    info = {
        "mid_eye": go,
        "eye_distance": D,
        "eye_radius": r_eye,
        "pupil_radius": r_pupil,
        "pupil_offset": offset,
        "pupil_gain": c,
        "roll": head_roll,
    }
    return frame, lm, info


def sample_id(subject: int, index: int) -> str:
    return f"s{subject:02d}_{index:04d}"


def synthesize(cfg: SyntheticConfig) -> list[tuple[np.ndarray, SampleRecord]]:
    """All frames and records in memory; face paths point at ``frames/<id>.ppm``."""
    cfg.validate()
    out = []
    for s in range(cfg.subjects):
        style = subject_style(cfg.seed, s)
        for i in range(cfg.samples_per_subject):
            rng = np.random.default_rng([cfg.seed, s, i])
            gaze = (rng.uniform(*cfg.gaze_pitch_range), rng.uniform(*cfg.gaze_yaw_range))
            head = (rng.uniform(*cfg.head_range), rng.uniform(*cfg.head_range))
            roll = rng.uniform(*cfg.roll_range)
            light = rng.uniform(*cfg.light_range)
            frame, lm, _ = render_synthetic_sample(gaze, roll, light, cfg.extent, style, rng, head)
            sid = sample_id(s, i)
            rec = SampleRecord(
                sample_id=sid,
                subject_id=f"p{s:02d}",
                face_path=f"frames/{sid}.ppm",
                gaze_pitch=float(gaze[0]),
                gaze_yaw=float(gaze[1]),
                head_pitch=float(head[0]),
                head_yaw=float(head[1]),
                leye_x=lm.left[0],
                leye_y=lm.left[1],
                reye_x=lm.right[0],
                reye_y=lm.right[1],
            )
            out.append((frame, rec))
    return out


def generate_dataset(cfg: SyntheticConfig, out_dir: str | os.PathLike) -> Path:
    """Write frames and ``manifest.csv`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out / 'frames'}: {exc}") from exc
    samples = synthesize(cfg)
    for frame, rec in samples:
        path = out / rec.face_path
        try:
            write_pnm(path, frame)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
    manifest = out / "manifest.csv"
    write_manifest(manifest, [rec for _, rec in samples])
    return manifest
