"""Correlation-response metrics and CNN preprocessing (32x32 crop + min-max)."""
from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SizeError, UndefinedMetricError

__all__ = [
    "PATCH",
    "CropMode",
    "MetricScores",
    "ResponsePatch",
    "peak_location",
    "peak_height",
    "pce",
    "metric_scores",
    "crop",
    "normalize01",
    "make_patch",
    "save_patch",
    "load_patch",
    "write_metrics_csv",
    "read_metrics_csv",
]

PATCH = 32


class CropMode(enum.IntEnum):
    CENTER = 0
    PEAK = 1

    @classmethod
    def parse(cls, value) -> "CropMode":
        if isinstance(value, CropMode):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


@dataclass(frozen=True)
class MetricScores:
    peak_height: float
    pce: float
    peak_location: tuple[int, int]


@dataclass
class ResponsePatch:
    data: np.ndarray
    source_resolution: int
    crop_mode: CropMode = CropMode.CENTER


def peak_location(r) -> tuple[int, int]:
    # np.argmax returns the first maximum in row-major order
    r = np.asarray(r)
    idx = int(np.argmax(r))
    return divmod(idx, r.shape[-1])


def peak_height(r) -> float:
    return float(np.max(r))


def pce(r) -> float:
    """Peak-to-correlation-energy: ``peak**2 / sum(r**2)``."""
    r = np.asarray(r, dtype=np.float64)
    peak = np.max(np.abs(r))
    if peak == 0.0:
        raise UndefinedMetricError("PCE is undefined for an all-zero response")
    # scale first so tiny or huge responses do not under/overflow
    s = r / peak
    return float(1.0 / np.sum(s * s))


def metric_scores(r) -> MetricScores:
    return MetricScores(peak_height(r), pce(r), peak_location(r))


def crop(r, mode=CropMode.CENTER) -> np.ndarray:
    """Cut a 32x32 window from a response map.

    CENTER takes rows/cols ``[W/2 - 16, W/2 + 16)``. PEAK centers the window on
    the peak (the peak lands at ``[16, 16]``) and wraps around the borders.
    """
    r = np.asarray(r)
    h, w = r.shape
    if h < PATCH or w < PATCH:
        raise SizeError(f"response {h}x{w} is smaller than {PATCH}x{PATCH}")
    mode = CropMode.parse(mode)
    half = PATCH // 2
    if mode is CropMode.CENTER:
        return r[h // 2 - half:h // 2 + half, w // 2 - half:w // 2 + half].copy()
    py, px = peak_location(r)
    rows = (py - half + np.arange(PATCH)) % h
    cols = (px - half + np.arange(PATCH)) % w
    return r[np.ix_(rows, cols)]


def normalize01(patch) -> np.ndarray:
    x = np.asarray(patch, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    out = (x - lo) / (hi - lo)
    # pin the extremes exactly despite rounding in the division
    out[x == lo] = 0.0
    out[x == hi] = 1.0
    return out


def make_patch(r, mode=CropMode.CENTER) -> ResponsePatch:
    r = np.asarray(r)
    mode = CropMode.parse(mode)
    return ResponsePatch(normalize01(crop(r, mode)), int(r.shape[0]), mode)


# --- file formats ---------------------------------------------------------

_PT32_HEAD = struct.Struct("<4sIB")


def save_patch(path, patch: ResponsePatch) -> None:
    if patch.data.shape != (PATCH, PATCH):
        raise SizeError(f"patch must be {PATCH}x{PATCH}")
    head = _PT32_HEAD.pack(b"PT32", patch.source_resolution, int(patch.crop_mode))
    Path(path).write_bytes(head + patch.data.astype("<f4").tobytes())


def load_patch(path) -> ResponsePatch:
    buf = Path(path).read_bytes()
    if len(buf) != _PT32_HEAD.size + 4 * PATCH * PATCH:
        raise FormatError(f"{path}: bad PT32 size {len(buf)}")
    magic, res, mode = _PT32_HEAD.unpack_from(buf)
    if magic != b"PT32":
        raise FormatError(f"{path}: bad magic {magic!r}")
    data = np.frombuffer(buf, dtype="<f4", offset=_PT32_HEAD.size).reshape(PATCH, PATCH)
    return ResponsePatch(data.astype(np.float64), res, CropMode(mode))


METRIC_COLUMNS = ("sample_id", "set_id", "label", "peak", "pce", "peak_row", "peak_col")


def write_metrics_csv(path, rows) -> None:
    """``rows``: iterables of ``(sample_id, set_id, label, MetricScores)``."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(METRIC_COLUMNS)
        for sample_id, set_id, label, m in rows:
            out.writerow([sample_id, set_id, int(label), repr(m.peak_height), repr(m.pce),
                          m.peak_location[0], m.peak_location[1]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rows.append({
                "sample_id": rec["sample_id"],
                "set_id": rec["set_id"],
                "label": int(rec["label"]),
                "peak": float(rec["peak"]),
                "pce": float(rec["pce"]),
                "peak_row": int(rec["peak_row"]),
                "peak_col": int(rec["peak_col"]),
            })
        return rows
