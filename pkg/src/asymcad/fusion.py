"""Pairing of primary candidate patches with their comparison patches.

The secondary stream is either the mirrored location in the opposite
breast (same view, current exam) or the mapped location in the prior
exam. When the requested prior round is missing, the stage falls back to
an exam two rounds back if one exists; otherwise it imputes the patch as
all black or as a copy of the primary, per configuration. Every pair
records which of these paths produced its secondary patch.

Also holds the on-disk formats shared with the classifier stages: a flat
binary feature file (count and width header, float64 rows) and a pairs
manifest CSV.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

from .detector import Candidate, extract_patch
from .phantom import StudyCase, log_transform_values


class FusionError(Exception):
    pass


SECONDARY_MODES = ("contralateral", "prior")
IMPUTATION_MODES = ("black", "copy")
IMPUTATION_USED = ("none", "black", "copy_current", "skipped_round_fallback")


@dataclass
class FusionSpec:
    secondary: str = "contralateral"
    imputation: str = "black"
    patch_side_px: int = 50

    def __post_init__(self):
        if self.secondary not in SECONDARY_MODES:
            raise FusionError(f"unknown secondary mode {self.secondary!r}")
        if self.imputation not in IMPUTATION_MODES:
            raise FusionError(f"unknown imputation mode {self.imputation!r}")
        if self.patch_side_px < 4:
            raise FusionError("patch side too small")


@dataclass
class PatchPair:
    primary: np.ndarray
    secondary: np.ndarray
    label: int  # 1 malignant, 0 normal
    imputation_used: str
    candidate: Candidate


_INPUT_SCALE = math.log1p(65535.0)


def patch_input(pixels: np.ndarray) -> np.ndarray:
    """Network input: log-transformed raw counts scaled to [0, 1]."""
    return log_transform_values(pixels) / _INPUT_SCALE


def _other(lat: str) -> str:
    return "L" if lat == "R" else "R"


def secondary_source(case: StudyCase, candidate: Candidate, spec: FusionSpec):
    """(image, center, imputation_used); image is None when imputing."""
    _, ts, lat, view = candidate.image_ref
    if spec.secondary == "contralateral":
        img = case.current.views.get((_other(lat), view))
        if img is None:
            raise FusionError("contralateral view missing from the exam")
        centers = candidate.counterpart_centers.get("contralateral")
        center = tuple(centers[0]) if centers else candidate.center
        return img, center, "none"
    # prior round: exactly one step back, or a skipped-round fallback
    prior_exams = [e for e in case.exams if e.timestamp < ts]
    if prior_exams:
        prior = max(prior_exams, key=lambda e: e.timestamp)
        used = "none" if prior.timestamp == ts - 1 else "skipped_round_fallback"
        img = prior.views.get((lat, view))
        if img is None:
            raise FusionError("prior exam lacks the matching view")
        centers = candidate.counterpart_centers.get("prior")
        center = tuple(centers[0]) if centers else candidate.center
        return img, center, used
    return None, None, "black" if spec.imputation == "black" else "copy_current"


def build_pair(case: StudyCase, candidate: Candidate, spec: FusionSpec) -> PatchPair:
    _, ts, lat, view = candidate.image_ref
    cur = case.current.views.get((lat, view))
    if cur is None:
        raise FusionError(f"candidate references a missing view {(lat, view)}")
    side = spec.patch_side_px
    primary = extract_patch(patch_input(cur.pixels), candidate.center, side)
    img, center, used = secondary_source(case, candidate, spec)
    if img is not None:
        secondary = extract_patch(patch_input(img.pixels), center, side)
    elif used == "black":
        secondary = np.zeros_like(primary)
    else:
        secondary = primary.copy()
    label = 1 if candidate.label == "malignant" else 0
    return PatchPair(primary=primary, secondary=secondary, label=label,
                     imputation_used=used, candidate=candidate)


# ---------------------------------------------------------------------------
# binary feature file: u32 count, u32 width, then count*width float64 values

_FEATURE_HEADER = struct.Struct("<II")


def write_features(path, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise FusionError("feature rows must be a 2-d array")
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(rows.shape[0], rows.shape[1]))
        f.write(rows.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_FEATURE_HEADER.size)
        if len(header) < _FEATURE_HEADER.size:
            raise FusionError("feature file truncated: no header")
        count, width = _FEATURE_HEADER.unpack(header)
        payload = f.read()
    expect = count * width * 8
    if len(payload) != expect:
        raise FusionError(f"feature file truncated: want {expect} payload bytes, "
                          f"got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(count, width).copy()


# ---------------------------------------------------------------------------
# pairs manifest

PAIRS_FIELDS = ["case_id", "exam_ts", "laterality", "view", "row", "col",
                "label", "imputation_used", "split_tag"]


def write_pairs_manifest(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PAIRS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in PAIRS_FIELDS})


def read_pairs_manifest(path) -> list[dict]:
    with open(path, newline="") as f:
        out = []
        for row in csv.DictReader(f):
            row["exam_ts"] = int(row["exam_ts"])
            row["row"] = int(row["row"])
            row["col"] = int(row["col"])
            row["label"] = int(row["label"])
            out.append(row)
        return out
