"""Discrete-continuous yaw codec over overlapping angular bins.

The angle space (-pi, pi] is split into n evenly spaced bins whose half-width
is inflated by an overlap fraction, so neighbouring bins share a margin.  An
angle encodes to a one-hot score target on its nearest covering bin plus a
(sin, cos) residual toward every covering bin center; a prediction decodes by
argmax score and atan2 of that bin's residual pair.
"""

import math
from dataclasses import dataclass

import numpy as np

from .angles import wrap_angle

MIN_RESIDUAL_NORM = 1e-12


@dataclass(frozen=True)
class BinLayout:
    n_bins: int
    overlap_fraction: float
    centers: tuple  # radians, evenly spaced, none on the wrap boundary
    half_width: float


@dataclass(frozen=True)
class BinTargets:
    """Training targets for one angle: one-hot bin plus per-bin residuals."""

    score_bin: int
    covering: tuple  # bin indices whose interval spans the angle
    residuals: np.ndarray  # (len(covering), 2) rows of (sin, cos)


@dataclass(frozen=True)
class BinPrediction:
    scores: np.ndarray  # (n_bins,) unnormalized logits
    residual_sc: np.ndarray  # (n_bins, 2) unnormalized (sin, cos) pairs


def make_layout(n_bins: int, overlap_fraction: float) -> BinLayout:
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    centers = tuple(
        wrap_angle(-math.pi + 2.0 * math.pi * (i + 0.5) / n_bins)
        for i in range(n_bins)
    )
    half_width = (math.pi / n_bins) * (1.0 + overlap_fraction)
    return BinLayout(n_bins, overlap_fraction, centers, half_width)


def encode(theta_local: float, layout: BinLayout) -> BinTargets:
    """Per-bin targets for a ground-truth local angle.

    Covering bins are those whose center lies within half_width of the
    angle (wrapped distance); the score target is the nearest covering bin,
    ties broken toward the lowest index.
    """
    if not math.isfinite(theta_local):
        raise ValueError(f"angle must be finite, got {theta_local}")
    offsets = [wrap_angle(theta_local - c) for c in layout.centers]
    covering = [i for i, d in enumerate(offsets) if abs(d) <= layout.half_width]
    if not covering:
        # Only reachable through float noise at exact zero-overlap borders.
        covering = [min(range(layout.n_bins), key=lambda i: abs(offsets[i]))]
    score_bin = min(covering, key=lambda i: abs(offsets[i]))
    residuals = np.array([(math.sin(offsets[i]), math.cos(offsets[i])) for i in covering])
    return BinTargets(score_bin=score_bin, covering=tuple(covering), residuals=residuals)


def decode(pred: BinPrediction, layout: BinLayout) -> float:
    """Angle from head outputs: argmax-score bin center plus its residual."""
    scores = np.asarray(pred.scores, dtype=float)
    residual_sc = np.asarray(pred.residual_sc, dtype=float)
    if scores.shape != (layout.n_bins,) or residual_sc.shape != (layout.n_bins, 2):
        raise ValueError(
            f"prediction shapes {scores.shape}/{residual_sc.shape} do not match "
            f"a {layout.n_bins}-bin layout"
        )
    best = int(np.argmax(scores))  # ties resolve to the lowest index
    s, c = residual_sc[best]
    if math.hypot(s, c) <= MIN_RESIDUAL_NORM:
        raise ValueError(f"residual for selected bin {best} has near-zero norm")
    return wrap_angle(layout.centers[best] + math.atan2(s, c))


def targets_as_prediction(targets: BinTargets, layout: BinLayout) -> BinPrediction:
    """Lift encode() output into a prediction that decodes back exactly."""
    scores = np.zeros(layout.n_bins)
    scores[targets.score_bin] = 1.0
    residual_sc = np.zeros((layout.n_bins, 2))
    for row, i in enumerate(targets.covering):
        residual_sc[i] = targets.residuals[row]
    return BinPrediction(scores=scores, residual_sc=residual_sc)
