"""KITTI-format label and calibration file I/O.

Labels follow the devkit text layout: one object per line with 15
whitespace-separated fields (ground truth) or 16 (results, trailing score):

    type truncated occluded alpha left top right bottom h w l x y z ry [score]

Dimensions are (height, width, length) in meters, locations are camera-frame
(x, y, z) in meters, and both angles are radians in (-pi, pi].  "DontCare"
rows keep their -1 / -10 sentinels untouched.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .angles import wrap_angle
from .fileutil import format_key_values, parse_key_values

N_FIELDS_GT = 15
N_FIELDS_RESULT = 16

DONT_CARE = "DontCare"


class ParseError(ValueError):
    """Malformed KITTI text input; carries line number and field index."""

    def __init__(self, message, line_number=None, field_index=None):
        super().__init__(message)
        self.line_number = line_number
        self.field_index = field_index


@dataclass(frozen=True)
class ObjectLabel:
    """One KITTI object record (ground truth or detection)."""

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple  # (left, top, right, bottom) pixels
    dims: tuple  # (height, width, length) meters
    location: tuple  # (x, y, z) meters, camera frame
    rotation_y: float
    score: float | None = None

    @property
    def bbox_height(self) -> float:
        return self.bbox[3] - self.bbox[1]

    @property
    def bbox_center(self) -> tuple:
        return ((self.bbox[0] + self.bbox[2]) / 2.0, (self.bbox[1] + self.bbox[3]) / 2.0)


@dataclass
class CameraIntrinsics:
    """Pinhole parameters extracted from a KITTI P2 projection matrix."""

    fu: float
    fv: float
    cu: float
    cv: float
    full_p: np.ndarray  # 3x4, row-major

    @classmethod
    def from_p2_values(cls, values) -> "CameraIntrinsics":
        p = np.asarray(values, dtype=float).reshape(3, 4)
        if not np.all(np.isfinite(p)):
            raise ValueError("projection matrix contains non-finite values")
        fu, fv = p[0, 0], p[1, 1]
        if fu <= 0 or fv <= 0:
            raise ValueError(f"focal lengths must be positive, got fu={fu}, fv={fv}")
        return cls(fu=fu, fv=fv, cu=p[0, 2], cv=p[1, 2], full_p=p)


@dataclass
class DimsStats:
    """Per-class mean dimensions (h, w, l) and sample counts."""

    means: dict = field(default_factory=dict)  # class -> (h, w, l)
    counts: dict = field(default_factory=dict)  # class -> int


def _parse_float(token, line_number, field_index):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(
            f"line {line_number}: field {field_index} is not a number: {token!r}",
            line_number, field_index,
        ) from None
    if not math.isfinite(value):
        raise ParseError(
            f"line {line_number}: field {field_index} is not finite: {token!r}",
            line_number, field_index,
        )
    return value


def _check(cond, message, line_number, field_index):
    if not cond:
        raise ParseError(f"line {line_number}: {message}", line_number, field_index)


def parse_label_file(text: str) -> list:
    """Parse a KITTI label/result stream into ObjectLabel records.

    All nonempty lines must agree on the field count (15 or 16); a mix of
    ground-truth and result rows in one file is rejected.
    """
    labels = []
    expected_fields = None
    for line_number, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        tokens = raw.split()
        n = len(tokens)
        if n not in (N_FIELDS_GT, N_FIELDS_RESULT):
            raise ParseError(
                f"line {line_number}: expected {N_FIELDS_GT} or {N_FIELDS_RESULT} "
                f"fields, got {n}",
                line_number,
            )
        if expected_fields is None:
            expected_fields = n
        elif n != expected_fields:
            raise ParseError(
                f"line {line_number}: mixed field counts ({n} after {expected_fields})",
                line_number,
            )

        class_name = tokens[0]
        values = [_parse_float(tokens[i], line_number, i) for i in range(1, n)]
        # values[0..] follow the token order shifted by the leading class name.
        truncation = values[0]
        occlusion = int(values[1])
        alpha = values[2]
        bbox = tuple(values[3:7])
        dims = tuple(values[7:10])
        location = tuple(values[10:13])
        rotation_y = values[13]
        score = values[14] if n == N_FIELDS_RESULT else None

        _check(bbox[0] < bbox[2], f"bbox left {bbox[0]} >= right {bbox[2]}", line_number, 5)
        _check(bbox[1] < bbox[3], f"bbox top {bbox[1]} >= bottom {bbox[3]}", line_number, 6)
        if class_name != DONT_CARE:
            _check(0.0 <= truncation <= 1.0,
                   f"truncation {truncation} outside [0, 1]", line_number, 1)
            _check(occlusion in (0, 1, 2, 3),
                   f"occlusion {occlusion} not in {{0, 1, 2, 3}}", line_number, 2)
            _check(min(dims) > 0.0, f"non-positive dims {dims}", line_number, 8)
            alpha = wrap_angle(alpha)
            rotation_y = wrap_angle(rotation_y)

        labels.append(ObjectLabel(
            class_name=class_name, truncation=truncation, occlusion=occlusion,
            alpha=alpha, bbox=bbox, dims=dims, location=location,
            rotation_y=rotation_y, score=score,
        ))
    return labels


def serialize_label_file(labels) -> str:
    """Render labels in KITTI field order with fixed 6-decimal formatting.

    parse_label_file(serialize_label_file(labels)) reproduces every numeric
    field to within 5e-7.
    """
    lines = []
    has_score = None
    for label in labels:
        if has_score is None:
            has_score = label.score is not None
        elif (label.score is not None) != has_score:
            raise ValueError("cannot mix labels with and without scores in one file")
        parts = [
            label.class_name,
            f"{label.truncation:.6f}",
            f"{label.occlusion:d}",
            f"{label.alpha:.6f}",
            *(f"{v:.6f}" for v in label.bbox),
            *(f"{v:.6f}" for v in label.dims),
            *(f"{v:.6f}" for v in label.location),
            f"{label.rotation_y:.6f}",
        ]
        if label.score is not None:
            parts.append(f"{label.score:.6f}")
        lines.append(" ".join(parts))
    return "".join(line + "\n" for line in lines)


def parse_calib_file(text: str) -> CameraIntrinsics:
    """Extract camera intrinsics from the P2 line of a KITTI calib stream."""
    for line_number, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens or tokens[0] != "P2:":
            continue
        if len(tokens) != 13:
            raise ParseError(
                f"line {line_number}: P2 needs 12 values, got {len(tokens) - 1}",
                line_number,
            )
        values = [_parse_float(tokens[i], line_number, i) for i in range(1, 13)]
        return CameraIntrinsics.from_p2_values(values)
    raise ParseError("no P2 line found in calibration stream")


def serialize_calib_file(intrinsics: CameraIntrinsics) -> str:
    """Render a calib stream holding the P2 line, exact to the bit on reparse."""
    values = " ".join(repr(float(v)) for v in intrinsics.full_p.reshape(-1))
    return f"P2: {values}\n"


def compute_dims_stats(labels, classes) -> DimsStats:
    """Arithmetic mean of (h, w, l) per requested class over non-DontCare labels.

    Raises ValueError naming any requested class with no samples.
    """
    sums = {c: np.zeros(3) for c in classes}
    counts = {c: 0 for c in classes}
    for label in labels:
        if label.class_name == DONT_CARE or label.class_name not in sums:
            continue
        sums[label.class_name] += np.asarray(label.dims, dtype=float)
        counts[label.class_name] += 1
    stats = DimsStats()
    for c in classes:
        if counts[c] == 0:
            raise ValueError(f"no labels of class {c!r} to average")
        stats.means[c] = tuple(sums[c] / counts[c])
        stats.counts[c] = counts[c]
    return stats


def serialize_dims_stats(stats: DimsStats) -> str:
    """Render stats as key=value lines (<class>.count, <class>.mean_{h,w,l})."""
    pairs = {}
    for class_name in sorted(stats.means):
        mean = stats.means[class_name]
        pairs[f"{class_name}.count"] = str(stats.counts[class_name])
        for axis, value in zip("hwl", mean):
            pairs[f"{class_name}.mean_{axis}"] = repr(float(value))
    return format_key_values(pairs)


def parse_dims_stats(text: str) -> DimsStats:
    """Inverse of serialize_dims_stats."""
    pairs = parse_key_values(text)
    classes = sorted({key.rsplit(".", 1)[0] for key in pairs})
    stats = DimsStats()
    try:
        for class_name in classes:
            stats.counts[class_name] = int(pairs[f"{class_name}.count"])
            stats.means[class_name] = tuple(
                float(pairs[f"{class_name}.mean_{axis}"]) for axis in "hwl")
    except (KeyError, ValueError) as e:
        raise ValueError(f"bad stats file: {e}") from e
    return stats
