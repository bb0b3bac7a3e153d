"""Error breakdowns by head pose and by light level, plus report CSVs."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .training import EvalRecord

REPORT_COLUMNS = [
    "sample_id", "subject", "pred_pitch", "pred_yaw", "gt_pitch", "gt_yaw",
    "head_pitch", "head_yaw", "light", "angular_error_deg",
]
LIGHT_BINS = 10
LIGHT_RANGE = 256.0


@dataclass
class PoseBinGrid:
    """Mean error over (head pitch, head yaw) bins.

    Row ``r`` covers pitch ``[(origin[0] + r) * w, (origin[0] + r + 1) * w)``,
    column ``c`` likewise for yaw. Empty bins hold NaN and count 0.
    """

    bin_width: float
    origin: tuple[int, int]
    mean: np.ndarray
    count: np.ndarray

    def pitch_edges(self) -> np.ndarray:
        return (self.origin[0] + np.arange(self.mean.shape[0] + 1)) * self.bin_width

    def yaw_edges(self) -> np.ndarray:
        return (self.origin[1] + np.arange(self.mean.shape[1] + 1)) * self.bin_width

    def cells(self):
        """Yield ``(pitch_index, yaw_index, mean, count)`` for populated bins."""
        for r, c in zip(*np.nonzero(self.count)):
            yield self.origin[0] + int(r), self.origin[1] + int(c), float(self.mean[r, c]), int(self.count[r, c])


def bin_index(angle: float, bin_width: float) -> int:
    return int(math.floor(angle / bin_width))


def pose_bin_analysis(records: list[EvalRecord], bin_width: float = 0.20) -> PoseBinGrid:
    if not records:
        return PoseBinGrid(bin_width, (0, 0), np.full((0, 0), np.nan), np.zeros((0, 0), dtype=int))
    pi = np.array([bin_index(r.head[0], bin_width) for r in records])
    yi = np.array([bin_index(r.head[1], bin_width) for r in records])
    err = np.array([r.error_deg for r in records])
    origin = (int(pi.min()), int(yi.min()))
    shape = (int(pi.max()) - origin[0] + 1, int(yi.max()) - origin[1] + 1)
    total = np.zeros(shape)
    count = np.zeros(shape, dtype=int)
    np.add.at(total, (pi - origin[0], yi - origin[1]), err)
    np.add.at(count, (pi - origin[0], yi - origin[1]), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return PoseBinGrid(bin_width, origin, mean, count)


def grid_difference(a: PoseBinGrid, b: PoseBinGrid) -> PoseBinGrid:
    """``a - b`` on bins populated in both (negative means ``a`` is better)."""
    if a.bin_width != b.bin_width:
        raise ValueError("grids use different bin widths")
    lo = (min(a.origin[0], b.origin[0]), min(a.origin[1], b.origin[1]))
    hi = (max(a.origin[0] + a.mean.shape[0], b.origin[0] + b.mean.shape[0]),
          max(a.origin[1] + a.mean.shape[1], b.origin[1] + b.mean.shape[1]))
    shape = (hi[0] - lo[0], hi[1] - lo[1])

    def place(g: PoseBinGrid):
        m = np.full(shape, np.nan)
        c = np.zeros(shape, dtype=int)
        r0, c0 = g.origin[0] - lo[0], g.origin[1] - lo[1]
        m[r0:r0 + g.mean.shape[0], c0:c0 + g.mean.shape[1]] = g.mean
        c[r0:r0 + g.count.shape[0], c0:c0 + g.count.shape[1]] = g.count
        return m, c

    ma, ca = place(a)
    mb, cb = place(b)
    both = (ca > 0) & (cb > 0)
    return PoseBinGrid(a.bin_width, lo, np.where(both, ma - mb, np.nan), np.where(both, np.minimum(ca, cb), 0))


@dataclass
class LightBins:
    edges: np.ndarray  # 11 values, 25.6 apart
    mean: np.ndarray  # NaN where empty
    count: np.ndarray
    slope: float  # least-squares slope of mean error vs bin centre (degrees per gray level)
    intercept: float

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def light_bin_index(light: float) -> int:
    width = LIGHT_RANGE / LIGHT_BINS
    return min(max(int(math.floor(light / width)), 0), LIGHT_BINS - 1)


def light_bin_analysis(records: list[EvalRecord]) -> LightBins:
    edges = np.arange(LIGHT_BINS + 1) * (LIGHT_RANGE / LIGHT_BINS)
    total = np.zeros(LIGHT_BINS)
    count = np.zeros(LIGHT_BINS, dtype=int)
    for r in records:
        i = light_bin_index(r.light)
        total[i] += r.error_deg
        count[i] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    filled = count > 0
    if filled.sum() < 2:
        raise ValueError("light slope needs at least two non-empty bins")
    x = (0.5 * (edges[:-1] + edges[1:]))[filled]
    y = mean[filled]
    xm, ym = x.mean(), y.mean()
    slope = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    return LightBins(edges, mean, count, slope, float(ym - slope * xm))


# CSV reports ------------------------------------------------------------------------

def write_report(path: str | os.PathLike, records: list[EvalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in records:
            w.writerow([r.sample_id, r.subject_id] + [f"{v:.9g}" for v in (*r.pred, *r.gt, *r.head, r.light, r.error_deg)])


def read_report(path: str | os.PathLike) -> list[EvalRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REPORT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            try:
                f = {k: float(row[k]) for k in REPORT_COLUMNS[2:]}
            except ValueError as exc:
                raise ValueError(f"{path}:{reader.line_num}: {exc}") from None
            out.append(EvalRecord(
                row["sample_id"], row["subject"], (f["pred_pitch"], f["pred_yaw"]), (f["gt_pitch"], f["gt_yaw"]),
                (f["head_pitch"], f["head_yaw"]), f["light"], f["angular_error_deg"],
            ))
    return out


def write_pose_grid(path: str | os.PathLike, grid: PoseBinGrid) -> None:
    w = grid.bin_width
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["pitch_bin", "yaw_bin", "pitch_lo", "pitch_hi", "yaw_lo", "yaw_hi", "mean_error_deg", "count"])
        for p, y, m, c in grid.cells():
            out.writerow([p, y, f"{p * w:.9g}", f"{(p + 1) * w:.9g}", f"{y * w:.9g}", f"{(y + 1) * w:.9g}",
                          f"{m:.9g}", c])


def write_light_bins(path: str | os.PathLike, bins: LightBins) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["bin", "lo", "hi", "center", "mean_error_deg", "count"])
        for i in range(LIGHT_BINS):
            mean = "" if bins.count[i] == 0 else f"{bins.mean[i]:.9g}"
            out.writerow([i, f"{bins.edges[i]:.9g}", f"{bins.edges[i + 1]:.9g}", f"{bins.centers[i]:.9g}", mean,
                          int(bins.count[i])])
        out.writerow(["slope", "", "", "", f"{bins.slope:.9g}", ""])
