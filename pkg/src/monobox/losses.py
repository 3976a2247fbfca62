"""Training losses with closed-form gradients.

Per-object predictions flatten to a fixed layout used by every gradient in
this module and by the head's backward pass:

    [delta_dims (3) | bin scores (n) | bin residuals (2n, as s_0 c_0 s_1 c_1 ...)]

Batches concatenate per-object blocks in order.  The orientation objective
combines a softmax score loss with a cosine-similarity residual loss; the
residual similarity is maximal at the encoded targets, so it enters the
minimized value negated and spans [-1, +1].  Predicted (sin, cos) pairs are
L2-normalized inside the loss, and the normalization Jacobian is part of the
analytic gradient.

score_loss, residual_loss, orientation_loss and dimension_loss handle one
object and keep the math readable; total_loss is the vectorized batch form
the training loop runs.
"""

from dataclasses import dataclass

import numpy as np

from .angles import wrap_angle
from .multibin import BinLayout, BinPrediction, BinTargets, encode

MIN_PRED_RESIDUAL_NORM = 1e-9


@dataclass(frozen=True)
class LossConfig:
    alpha_residual: float = 1.0  # weight of the residual term inside the orientation loss
    w_orientation: float = 1.0  # weight of the orientation loss against the dimension loss

    def __post_init__(self):
        if not (np.isfinite(self.alpha_residual) and self.alpha_residual >= 0.0):
            raise ValueError(f"alpha_residual must be finite and >= 0, got {self.alpha_residual}")
        if not (np.isfinite(self.w_orientation) and self.w_orientation >= 0.0):
            raise ValueError(f"w_orientation must be finite and >= 0, got {self.w_orientation}")


@dataclass(frozen=True)
class LossValueGrad:
    value: float
    gradient: np.ndarray


@dataclass(frozen=True)
class BatchPredictions:
    delta_dims: np.ndarray  # (B, 3)
    scores: np.ndarray  # (B, n_bins)
    residual_sc: np.ndarray  # (B, n_bins, 2)


@dataclass(frozen=True)
class BatchTargets:
    """Precomputed supervision arrays for a set of objects.

    target_sc[i, j] holds (sin, cos) of theta*_i relative to bin j's center;
    only entries with covering_mask set participate in the loss.
    """

    score_bin: np.ndarray  # (N,) int
    covering_mask: np.ndarray  # (N, n_bins) bool
    target_sc: np.ndarray  # (N, n_bins, 2)
    dims_offset: np.ndarray  # (N, 3), true dims minus class mean

    def __len__(self):
        return self.score_bin.shape[0]

    def take(self, indices) -> "BatchTargets":
        return BatchTargets(
            score_bin=self.score_bin[indices],
            covering_mask=self.covering_mask[indices],
            target_sc=self.target_sc[indices],
            dims_offset=self.dims_offset[indices],
        )


def make_batch_targets(theta_local, dims_true, dims_mean, layout: BinLayout) -> BatchTargets:
    """Encode per-object angles and dimension offsets into loss-ready arrays.

    Args:
        theta_local: (N,) observation angles.
        dims_true: (N, 3) object dimensions.
        dims_mean: (N, 3) class mean dimensions, row-aligned with dims_true.
        layout: bin layout the head is trained against.
    """
    theta_local = np.asarray(theta_local, dtype=float)
    dims_true = np.asarray(dims_true, dtype=float)
    dims_mean = np.asarray(dims_mean, dtype=float)
    n = theta_local.shape[0]
    score_bin = np.zeros(n, dtype=int)
    mask = np.zeros((n, layout.n_bins), dtype=bool)
    for i in range(n):
        t = encode(theta_local[i], layout)
        score_bin[i] = t.score_bin
        mask[i, list(t.covering)] = True
    offsets = theta_local[:, None] - np.asarray(layout.centers)[None, :]
    target_sc = np.stack([np.sin(offsets), np.cos(offsets)], axis=-1)
    return BatchTargets(score_bin=score_bin, covering_mask=mask,
                        target_sc=target_sc, dims_offset=dims_true - dims_mean)


def score_loss(logits, target_bin: int) -> LossValueGrad:
    """Softmax cross-entropy on bin scores, stable under large logits."""
    logits = np.asarray(logits, dtype=float)
    if not 0 <= target_bin < logits.shape[0]:
        raise ValueError(f"target bin {target_bin} out of range for {logits.shape[0]} bins")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    total = exp.sum()
    value = np.log(total) - shifted[target_bin]
    grad = exp / total
    grad[target_bin] -= 1.0
    return LossValueGrad(float(value), grad)


def residual_loss(pred_sc, theta_star: float, covering, layout: BinLayout) -> LossValueGrad:
    """Negated mean cosine similarity between predicted and true bin residuals.

    Predicted pairs are normalized to the unit circle first; bins outside
    the covering set contribute nothing and receive zero gradient.
    """
    pred_sc = np.asarray(pred_sc, dtype=float)
    covering = tuple(covering)
    if not covering:
        raise ValueError("covering set is empty")
    grad = np.zeros(2 * layout.n_bins)
    value = 0.0
    for i in covering:
        v = pred_sc[i]
        norm = np.hypot(v[0], v[1])
        if norm <= MIN_PRED_RESIDUAL_NORM:
            raise ValueError(f"predicted residual for bin {i} has near-zero norm {norm}")
        unit = v / norm
        delta = theta_star - layout.centers[i]
        target = np.array([np.sin(delta), np.cos(delta)])
        similarity = target @ unit
        value -= similarity
        # d(target . v/|v|)/dv = (target - (target . unit) unit) / |v|
        grad[2 * i:2 * i + 2] = -(target - similarity * unit) / norm
    n_cov = len(covering)
    return LossValueGrad(value / n_cov, grad / n_cov)


def orientation_loss(pred: BinPrediction, targets: BinTargets,
                     layout: BinLayout, cfg: LossConfig) -> LossValueGrad:
    """Score loss plus weighted residual loss over one object's bin outputs.

    Gradient layout: [scores (n) | residuals (2n)].
    """
    s = score_loss(pred.scores, targets.score_bin)
    r = residual_loss(pred.residual_sc, recover_target_angle(targets, layout),
                      targets.covering, layout)
    value = s.value + cfg.alpha_residual * r.value
    grad = np.concatenate([s.gradient, cfg.alpha_residual * r.gradient])
    return LossValueGrad(value, grad)


def recover_target_angle(targets: BinTargets, layout: BinLayout) -> float:
    """Reconstruct theta* from the residual stored for the scored bin."""
    row = targets.covering.index(targets.score_bin)
    s, c = targets.residuals[row]
    return wrap_angle(layout.centers[targets.score_bin] + np.arctan2(s, c))


def dimension_loss(delta_pred, dims_true, dims_mean) -> LossValueGrad:
    """Mean squared deviation-from-class-mean error over the 3 dimensions."""
    delta_pred = np.asarray(delta_pred, dtype=float)
    r = np.asarray(dims_true, dtype=float) - np.asarray(dims_mean, dtype=float) - delta_pred
    return LossValueGrad(float(r @ r) / 3.0, -2.0 * r / 3.0)


def total_loss(pred: BatchPredictions, targets: BatchTargets,
               cfg: LossConfig, layout: BinLayout) -> LossValueGrad:
    """Batch mean of dimension loss plus weighted orientation loss.

    Vectorized over the batch; the gradient follows the flattened layout
    documented at module top.
    """
    batch = len(targets)
    if batch == 0:
        raise ValueError("empty batch")
    rows = np.arange(batch)

    r = targets.dims_offset - pred.delta_dims
    dim_values = (r * r).sum(axis=1) / 3.0
    g_delta = -2.0 * r / 3.0

    shifted = pred.scores - pred.scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    ce_values = np.log(total) - shifted[rows, targets.score_bin]
    g_scores = exp / total[:, None]
    g_scores[rows, targets.score_bin] -= 1.0

    mask = targets.covering_mask
    norm = np.hypot(pred.residual_sc[..., 0], pred.residual_sc[..., 1])
    bad = mask & (norm <= MIN_PRED_RESIDUAL_NORM)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"predicted residual for example {i} bin {j} "
                         f"has near-zero norm {norm[i, j]}")
    norm_safe = np.where(mask, norm, 1.0)
    unit = pred.residual_sc / norm_safe[..., None]
    sim = (targets.target_sc * unit).sum(axis=-1)
    n_cov = mask.sum(axis=1)
    res_values = -(sim * mask).sum(axis=1) / n_cov
    g_res = -(targets.target_sc - sim[..., None] * unit) / norm_safe[..., None]
    g_res = g_res * (mask[..., None] / n_cov[:, None, None])

    orient_values = ce_values + cfg.alpha_residual * res_values
    value = float(np.mean(dim_values + cfg.w_orientation * orient_values))
    scale = cfg.w_orientation / batch
    grad = np.concatenate([
        g_delta / batch,
        scale * g_scores,
        (scale * cfg.alpha_residual) * g_res.reshape(batch, -1),
    ], axis=1).reshape(-1)
    return LossValueGrad(value, grad)


def flatten_batch(pred: BatchPredictions) -> np.ndarray:
    """Pack batch predictions into the flat layout used by total_loss gradients."""
    batch = pred.delta_dims.shape[0]
    return np.concatenate([
        pred.delta_dims.reshape(batch, -1),
        pred.scores.reshape(batch, -1),
        pred.residual_sc.reshape(batch, -1),
    ], axis=1).reshape(-1)


def unflatten_batch(flat, batch: int, n_bins: int) -> BatchPredictions:
    """Inverse of flatten_batch; also splits a total_loss gradient."""
    per_example = 3 + 3 * n_bins
    rows = np.asarray(flat, dtype=float).reshape(batch, per_example)
    return BatchPredictions(
        delta_dims=rows[:, :3].copy(),
        scores=rows[:, 3:3 + n_bins].copy(),
        residual_sc=rows[:, 3 + n_bins:].reshape(batch, n_bins, 2).copy(),
    )
