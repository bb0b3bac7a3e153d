"""Gaze-angle conversions and face normalization.

Images are ``uint8`` numpy arrays, ``(H, W)`` for grayscale or ``(H, W, 3)``
for RGB. Pixel coordinates are ``(x, y)`` with x along columns.

Angle convention: the camera looks along +z, so looking straight into it is
``(0, 0, -1)``. A gaze ``(pitch, yaw)`` maps to
``(-cos(pitch) sin(yaw), -sin(pitch), -cos(pitch) cos(yaw))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class DegenerateError(ValueError):
    """Raised for inputs that make a geometric construction singular."""


class GazeVector(NamedTuple):
    pitch: float
    yaw: float


class HeadPose(NamedTuple):
    pitch: float
    yaw: float


class EyeLandmarks(NamedTuple):
    left: tuple[float, float]
    right: tuple[float, float]

    @property
    def distance(self) -> float:
        return math.hypot(self.left[0] - self.right[0], self.left[1] - self.right[1])


LUMA = np.array([0.299, 0.587, 0.114])
LEFT_EYE_TARGET = (0.7, 0.35)
RIGHT_EYE_TARGET = (0.3, 0.35)
EYE_DISTANCE_FRACTION = 0.4


# gaze angles ------------------------------------------------------------------

def pitchyaw_to_vec3(pitchyaw) -> np.ndarray:
    """Angles ``(..., 2)`` -> unit vectors ``(..., 3)``."""
    py = np.asarray(pitchyaw, dtype=np.float64)
    p, y = py[..., 0], py[..., 1]
    return np.stack([-np.cos(p) * np.sin(y), -np.sin(p), -np.cos(p) * np.cos(y)], axis=-1)


def vec3_to_pitchyaw(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1)
    if np.any(norm == 0):
        raise DegenerateError("zero-length gaze vector")
    pitch = -np.arcsin(np.clip(v[..., 1] / norm, -1.0, 1.0))
    yaw = np.arctan2(-v[..., 0], -v[..., 2])
    return np.stack([pitch, yaw], axis=-1)


def angular_error_deg(pred, gt) -> np.ndarray | float:
    """Angle in degrees between the 3D directions of two (pitch, yaw) arrays."""
    a = pitchyaw_to_vec3(pred)
    b = pitchyaw_to_vec3(gt)
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    out = np.degrees(np.arccos(cos))
    return float(out) if np.ndim(out) == 0 else out


# normalization matrix -----------------------------------------------------------

@dataclass(frozen=True)
class AffineNormalization:
    alpha: float  # roll of the right->left eye line, radians
    S: float
    Z: int
    d: float  # target inter-eye distance in pixels
    D: float  # source inter-eye distance in pixels
    a: float
    b: float
    GO: tuple[float, float]
    tX: float
    tY: float
    M: np.ndarray  # 2x3 [R T]

    @property
    def R(self) -> np.ndarray:
        return self.M[:, :2]

    @property
    def T(self) -> np.ndarray:
        return self.M[:, 2]

    def apply(self, points) -> np.ndarray:
        return apply_affine(self.M, points)


def apply_affine(M: np.ndarray, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ M[:, :2].T + M[:, 2]


def build_normalization(lm: EyeLandmarks, Z: int) -> AffineNormalization:
    """Matrix that cancels eye-line roll, rescales so the eyes sit 0.4*Z apart,
    and moves the mid-eye point to ``(0.5*Z, 0.35*Z)``."""
    if Z < 32:
        raise ValueError(f"output extent Z={Z} must be >= 32")
    (lx, ly), (rx, ry) = lm
    D = math.hypot(lx - rx, ly - ry)
    if D == 0:
        raise DegenerateError("eye centers coincide")
    alpha = math.atan2(ly - ry, lx - rx)
    d = EYE_DISTANCE_FRACTION * Z
    S = d / D
    a = S * math.cos(alpha)
    b = S * math.sin(alpha)
    go = ((lx + rx) / 2.0, (ly + ry) / 2.0)
    tX, tY = Z * 0.5, Z * 0.35
    T = np.array([
        (1 - a) * go[0] - b * go[1] + (tX - go[0]),
        b * go[0] + (1 - a) * go[1] + (tY - go[1]),
    ])
    M = np.array([[a, b, T[0]], [-b, a, T[1]]])
    return AffineNormalization(alpha, S, Z, d, D, a, b, go, tX, tY, M)


# sampling -------------------------------------------------------------------------

def _bilinear(src: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``src`` at float pixel coordinates; out-of-bounds neighbours are black."""
    h, w = src.shape[:2]
    img = src.astype(np.float64)
    if img.ndim == 2:
        img = img[..., None]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape + (img.shape[2],))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = np.where(valid, wx * wy, 0.0)
            vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += wgt[..., None] * vals
    if src.ndim == 2:
        out = out[..., 0]
    return out


def _to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def warp_affine(src: np.ndarray, M: np.ndarray, Z: int) -> np.ndarray:
    """Z x Z output whose pixel p is src sampled bilinearly at M^-1 p."""
    if src.size == 0:
        raise ValueError("empty source image")
    R = np.asarray(M, dtype=np.float64)[:, :2]
    T = np.asarray(M, dtype=np.float64)[:, 2]
    det = np.linalg.det(R)
    if abs(det) < 1e-12:
        raise DegenerateError("affine matrix is not invertible")
    Rinv = np.linalg.inv(R)
    ys, xs = np.mgrid[0:Z, 0:Z].astype(np.float64)
    px = xs - T[0]
    py = ys - T[1]
    sx = Rinv[0, 0] * px + Rinv[0, 1] * py
    sy = Rinv[1, 0] * px + Rinv[1, 1] * py
    return _to_uint8(_bilinear(src, sx, sy))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping; returns float64."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    gx, gy = np.meshgrid(xs, ys)
    return _bilinear(img, gx, gy)


def resize_uint8(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if img.shape[:2] == (out_h, out_w):
        return img.copy()
    return _to_uint8(resize_bilinear(img, out_h, out_w))


# intensity ------------------------------------------------------------------------

def to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img.copy()
    return _to_uint8(img.astype(np.float64) @ LUMA)


def histogram_equalize(gray: np.ndarray) -> np.ndarray:
    if gray.ndim != 2:
        raise ValueError("histogram_equalize expects a single-channel image")
    hist = np.bincount(gray.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    npix = gray.size
    cdf_min = cdf[hist > 0][0]
    if cdf_min == npix:
        return gray.copy()
    lut = np.rint(255.0 * (cdf - cdf_min) / (npix - cdf_min))
    return np.clip(lut, 0, 255).astype(np.uint8)[gray]


def mean_intensity(img: np.ndarray) -> float:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        a = a @ LUMA
    return float(a.mean())


# eye patches ------------------------------------------------------------------------

EYE_BOX_WIDTH = 0.36


def crop_box(img: np.ndarray, cx: float, cy: float, bw: int, bh: int) -> tuple[np.ndarray, bool]:
    """Integer crop centred on (cx, cy); areas outside the image are black.
    Returns the crop and whether clipping happened."""
    x0 = int(round(cx - bw / 2.0))
    y0 = int(round(cy - bh / 2.0))
    h, w = img.shape[:2]
    out = np.zeros((bh, bw) + img.shape[2:], dtype=img.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + bw, w), min(y0 + bh, h)
    clipped = (sx0, sy0, sx1, sy1) != (x0, y0, x0 + bw, y0 + bh)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out, clipped


def extract_eye_patches(face: np.ndarray, patch_h: int = 30, patch_w: int = 60) -> tuple[np.ndarray, np.ndarray, bool]:
    """Grayscale, equalized ``(left, right)`` patches around the canonical eye positions."""
    Z = face.shape[0]
    if Z < 64 or face.shape[1] != Z:
        raise ValueError(f"normalized face must be square with Z >= 64, got {face.shape[:2]}")
    bw = int(round(EYE_BOX_WIDTH * Z))
    bh = int(round(bw / 2.0))
    patches = []
    clipped = False
    for tx, ty in (LEFT_EYE_TARGET, RIGHT_EYE_TARGET):
        crop, c = crop_box(face, tx * Z, ty * Z, bw, bh)
        clipped |= c
        eq = histogram_equalize(to_gray(crop))
        patches.append(resize_uint8(eq, patch_h, patch_w))
    return patches[0], patches[1], clipped


def extract_stacked_eyes(face: np.ndarray, patch_h: int = 30, patch_w: int = 60) -> tuple[np.ndarray, bool]:
    """Left-eye patch on top of the right-eye patch: ``(2*patch_h, patch_w)``."""
    left, right, clipped = extract_eye_patches(face, patch_h, patch_w)
    return np.concatenate([left, right], axis=0), clipped


def normalize_face(frame: np.ndarray, lm: EyeLandmarks, Z: int = 112) -> tuple[np.ndarray, AffineNormalization]:
    norm = build_normalization(lm, Z)
    return warp_affine(frame, norm.M, Z), norm
