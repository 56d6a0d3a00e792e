"""Ground-truth heatmap rendering, MSE loss, peak decoding, PCK evaluation.

A heatmap stack is a [J, H, W] array; channel j always corresponds to joint j
under the skeleton's joint ordering.  Coordinates are (x, y) in pixels with
pixel (row r, column c) centered at x = c, y = r.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .util import as_chw, require


@dataclass
class Pose:
    """J joint locations with visibility flags (and optional peak confidences)."""

    xy: np.ndarray                     # [J, 2] float, columns (x, y)
    visible: np.ndarray                # [J] bool
    confidence: np.ndarray | None = None   # [J] float, set by decode_peaks

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        require(self.xy.shape[0] == self.visible.shape[0],
                f"xy has {self.xy.shape[0]} joints but visible has "
                f"{self.visible.shape[0]}")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)

    @property
    def joint_count(self) -> int:
        return self.xy.shape[0]

    def copy(self) -> "Pose":
        conf = None if self.confidence is None else self.confidence.copy()
        return Pose(self.xy.copy(), self.visible.copy(), conf)


def render_gaussian(pose: Pose, sigma: float, height: int, width: int) -> np.ndarray:
    """Unnormalized amplitude-1 Gaussian per visible joint; zeros when invisible."""
    require(sigma > 0, f"sigma must be positive, got {sigma}")
    grid_y, grid_x = np.meshgrid(np.arange(height, dtype=np.float64),
                                 np.arange(width, dtype=np.float64), indexing="ij")
    out = np.zeros((pose.joint_count, height, width), dtype=np.float64)
    for j in range(pose.joint_count):
        if not pose.visible[j]:
            continue
        x, y = pose.xy[j]
        out[j] = np.exp(-((grid_x - x) ** 2 + (grid_y - y) ** 2) / (2.0 * sigma ** 2))
    return out


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray
    visible_channels: int

    @property
    def all_masked(self) -> bool:
        return self.visible_channels == 0


def mse_loss(pred, gt, visible) -> LossResult:
    """Mean squared error over visible-joint channels, with its gradient.

    N = visible channels * H * W scalars contribute; masked channels carry
    zero gradient.  When every joint is masked the loss is 0 and the result
    is flagged via ``all_masked``.
    """
    pred = as_chw(pred, "pred")
    gt = as_chw(gt, "gt")
    require(pred.shape == gt.shape,
            f"pred shape {pred.shape} != gt shape {gt.shape}")
    visible = np.asarray(visible, dtype=bool).reshape(-1)
    require(visible.shape[0] == pred.shape[0],
            f"visibility mask has {visible.shape[0]} entries for "
            f"{pred.shape[0]} channels")
    n_vis = int(visible.sum())
    grad = np.zeros_like(pred)
    if n_vis == 0:
        return LossResult(0.0, grad, 0)
    diff = pred[visible] - gt[visible]
    n = diff.size
    value = float(np.sum(diff * diff) / n)
    grad[visible] = 2.0 * diff / n
    return LossResult(value, grad, n_vis)


def decode_peaks(heatmaps, min_confidence: float = 0.05) -> Pose:
    """Argmax per channel plus a quarter-pixel shift toward the higher neighbor.

    Ties resolve to the lowest row-major index.  Channels whose maximum falls
    below ``min_confidence`` decode as not visible.
    """
    maps = as_chw(heatmaps, "heatmaps")
    j, h, w = maps.shape
    xy = np.zeros((j, 2), dtype=np.float64)
    visible = np.zeros(j, dtype=bool)
    confidence = np.zeros(j, dtype=np.float64)
    for c in range(j):
        flat_idx = int(np.argmax(maps[c]))
        py, px = divmod(flat_idx, w)
        peak = float(maps[c, py, px])
        confidence[c] = peak
        x = float(px)
        y = float(py)
        if 0 < px < w - 1:
            x += 0.25 * np.sign(maps[c, py, px + 1] - maps[c, py, px - 1])
        if 0 < py < h - 1:
            y += 0.25 * np.sign(maps[c, py + 1, px] - maps[c, py - 1, px])
        xy[c] = (x, y)
        visible[c] = peak >= min_confidence
    return Pose(xy, visible, confidence)


@dataclass
class PckResult:
    """Per-joint and mean fraction of visible joints within the threshold."""

    per_joint: np.ndarray          # [J], NaN where no visible ground truth
    mean: float                    # NaN when undefined everywhere
    visible_counts: np.ndarray     # [J]
    correct_counts: np.ndarray     # [J]
    threshold_px: float

    @property
    def undefined(self) -> bool:
        return int(self.visible_counts.sum()) == 0


def pck_evaluate(predictions: Sequence[Pose],
                 ground_truth: Sequence[Pose],
                 threshold_fraction: float,
                 reference_scale: float) -> PckResult:
    """PCK at threshold_fraction * reference_scale pixels.

    A visible ground-truth joint counts as correct when the prediction is
    visible and within the threshold distance.  With zero visible joints the
    metric is undefined and flagged (NaN), never silently zero.
    """
    require(reference_scale > 0, f"reference_scale must be > 0, got {reference_scale}")
    require(len(predictions) == len(ground_truth),
            f"{len(predictions)} predictions vs {len(ground_truth)} ground truths")
    require(len(ground_truth) > 0, "empty evaluation set")
    j = ground_truth[0].joint_count
    visible_counts = np.zeros(j, dtype=np.int64)
    correct_counts = np.zeros(j, dtype=np.int64)
    threshold = threshold_fraction * reference_scale
    for pred, gt in zip(predictions, ground_truth):
        require(pred.joint_count == j and gt.joint_count == j,
                "joint count mismatch inside evaluation set")
        for c in range(j):
            if not gt.visible[c]:
                continue
            visible_counts[c] += 1
            if not pred.visible[c]:
                continue
            if float(np.linalg.norm(pred.xy[c] - gt.xy[c])) <= threshold:
                correct_counts[c] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(visible_counts > 0,
                             correct_counts / np.maximum(visible_counts, 1),
                             np.nan)
    defined = visible_counts > 0
    mean = float(per_joint[defined].mean()) if defined.any() else float("nan")
    return PckResult(per_joint, mean, visible_counts, correct_counts, threshold)
