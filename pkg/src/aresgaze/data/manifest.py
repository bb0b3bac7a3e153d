"""Sample manifests stored as CSV."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from ..geometry import EyeLandmarks, GazeVector, HeadPose

COLUMNS = [
    "sample_id", "subject_id", "face_path",
    "gaze_pitch", "gaze_yaw", "head_pitch", "head_yaw",
    "leye_x", "leye_y", "reye_x", "reye_y", "light",
]
_OPTIONAL = {"leye_x", "leye_y", "reye_x", "reye_y", "light"}


class ManifestError(ValueError):
    pass


@dataclass
class SampleRecord:
    sample_id: str
    subject_id: str
    face_path: str
    gaze_pitch: float
    gaze_yaw: float
    head_pitch: float
    head_yaw: float
    leye_x: float | None = None
    leye_y: float | None = None
    reye_x: float | None = None
    reye_y: float | None = None
    light: float | None = None

    @property
    def gaze(self) -> GazeVector:
        return GazeVector(self.gaze_pitch, self.gaze_yaw)

    @property
    def head_pose(self) -> HeadPose:
        return HeadPose(self.head_pitch, self.head_yaw)

    @property
    def landmarks(self) -> EyeLandmarks | None:
        if self.leye_x is None:
            return None
        return EyeLandmarks((self.leye_x, self.leye_y), (self.reye_x, self.reye_y))

    def validate(self) -> None:
        if abs(self.gaze_pitch) > math.pi / 2 or abs(self.gaze_yaw) > math.pi:
            raise ManifestError(f"{self.sample_id}: gaze out of range")


def format_real(x: float | None) -> str:
    return "" if x is None else f"{x:.9g}"


def write_manifest(path: str | os.PathLike, records: Iterable[SampleRecord]) -> None:
    seen = set()
    rows = []
    for r in records:
        if r.sample_id in seen:
            raise ManifestError(f"duplicate sample_id {r.sample_id!r}")
        seen.add(r.sample_id)
        row = []
        for name in COLUMNS:
            value = getattr(r, name)
            row.append(value if isinstance(value, str) else format_real(value))
        rows.append(row)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(rows)


def read_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: missing header row")
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
        index = {name: header.index(name) for name in COLUMNS}
        records = []
        seen = set()
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
            values = {}
            for name, i in index.items():
                text = row[i]
                if name in ("sample_id", "subject_id", "face_path"):
                    values[name] = text
                elif text == "" and name in _OPTIONAL:
                    values[name] = None
                else:
                    try:
                        values[name] = float(text)
                    except ValueError:
                        raise ManifestError(f"{path}:{line}: column {name}: cannot parse {text!r}") from None
            rec = SampleRecord(**values)
            if rec.sample_id in seen:
                raise ManifestError(f"{path}:{line}: duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)
            records.append(rec)
    return records


def resolve(manifest_path: str | os.PathLike, record: SampleRecord) -> Path:
    """Image path of a record, relative paths taken from the manifest's directory."""
    p = Path(record.face_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def replace(record: SampleRecord, **changes) -> SampleRecord:
    return dataclasses.replace(record, **changes)
