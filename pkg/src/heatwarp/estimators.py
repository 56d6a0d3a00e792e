"""Estimator-style facade: fit/predict/score objects over the training and
inference pipelines, with scikit-learn compatible get_params/set_params so
the models compose with that ecosystem (clone, grid search wrappers).

Inputs are lists of VideoSample; frames are [C,H,W] arrays.
"""

from __future__ import annotations

import inspect

import numpy as np

from .backbone import backbone_forward
from .evaluate import eval_single_frame, propagate_video
from .heatmaps import Pose, decode_peaks, pck_evaluate
from .synth import VideoSample
from .train import (TrainConfig, backbone_from_checkpoint, train_backbone,
                    train_warper, warper_from_checkpoint)
from .util import ContractError, require
from .warper import temporal_aggregate


def check_videos(videos, name: str = "videos", need_labels: bool = True):
    """Validate a dataset argument: a non-empty sequence of VideoSample."""
    require(hasattr(videos, "__len__") and len(videos) > 0,
            f"{name} must be a non-empty sequence of VideoSample")
    for i, video in enumerate(videos):
        require(isinstance(video, VideoSample),
                f"{name}[{i}] is {type(video).__name__}, expected VideoSample")
        if need_labels:
            require(len(video.manual_indices()) > 0,
                    f"{name}[{i}] carries no manual labels")
    return list(videos)


def check_frame(frame, name: str = "frame") -> np.ndarray:
    arr = np.asarray(frame)
    require(arr.ndim == 3, f"{name} must be [C,H,W], got rank {arr.ndim}")
    return arr


class ParamsMixin:
    """scikit-learn parameter protocol, introspected from ``__init__``."""

    @classmethod
    def _param_names(cls):
        signature = inspect.signature(cls.__init__)
        return [p.name for p in signature.parameters.values()
                if p.name != "self" and p.kind == p.POSITIONAL_OR_KEYWORD]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ContractError(
                    f"invalid parameter {key!r} for {type(self).__name__}; "
                    f"valid parameters: {sorted(valid)}")
            setattr(self, key, value)
        return self


class PoseHeatmapEstimator(ParamsMixin):
    """Single-frame pose estimator: heatmap regression plus peak decoding."""

    def __init__(self, width=32, depth=4, joints=13, in_channels=1, sigma=2.0,
                 epochs=20, base_lr=1e-4, batch_size=8, augment=True,
                 min_confidence=0.05, precision="float32", seed=0):
        self.width = width
        self.depth = depth
        self.joints = joints
        self.in_channels = in_channels
        self.sigma = sigma
        self.epochs = epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.augment = augment
        self.min_confidence = min_confidence
        self.precision = precision
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(base_lr=self.base_lr, epochs=self.epochs,
                           batch_size=self.batch_size, sigma=self.sigma,
                           augment=self.augment, seed=self.seed,
                           precision=self.precision, joints=self.joints,
                           in_channels=self.in_channels,
                           backbone_width=self.width,
                           backbone_depth=self.depth,
                           min_confidence=self.min_confidence)

    def fit(self, videos, val_videos=None):
        videos = check_videos(videos)
        self.checkpoint_ = train_backbone(videos, self._train_config(),
                                          val_videos=val_videos)
        self.history_ = self.checkpoint_.history
        return self

    def _require_fitted(self):
        require(hasattr(self, "checkpoint_"),
                f"{type(self).__name__} is not fitted yet; call fit first")

    def predict_heatmaps(self, frame) -> np.ndarray:
        self._require_fitted()
        frame = check_frame(frame)
        params = backbone_from_checkpoint(self.checkpoint_)
        out, _ = backbone_forward(frame.astype(params.weights[0].dtype), params)
        return out

    def predict(self, frames) -> list[Pose]:
        return [decode_peaks(self.predict_heatmaps(f), self.min_confidence)
                for f in frames]

    def score(self, videos, threshold: float = 0.1) -> float:
        """Mean PCK against full ground truth over every frame."""
        videos = check_videos(videos, need_labels=False)
        self._require_fitted()
        params = backbone_from_checkpoint(self.checkpoint_)
        return eval_single_frame(videos, params,
                                 min_confidence=self.min_confidence,
                                 threshold=threshold).mean


class TemporalWarpEstimator(ParamsMixin):
    """Two-stage estimator: backbone plus the temporal warping head.

    ``predict`` decodes either plain single-frame heatmaps or, with
    ``aggregate_deltas`` set, temporally aggregated ones; ``propagate``
    transfers labels to unlabeled frames of a video.
    """

    def __init__(self, width=32, depth=4, joints=13, in_channels=1, sigma=2.0,
                 backbone_epochs=20, epochs=20, base_lr=1e-4, batch_size=8,
                 delta_range=3, dilations=(3, 6, 12, 18, 24),
                 residual_blocks=4, residual_width=32, freeze_backbone=False,
                 augment=True, aggregate_deltas=None, min_confidence=0.05,
                 precision="float32", seed=0):
        self.width = width
        self.depth = depth
        self.joints = joints
        self.in_channels = in_channels
        self.sigma = sigma
        self.backbone_epochs = backbone_epochs
        self.epochs = epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.delta_range = delta_range
        self.dilations = dilations
        self.residual_blocks = residual_blocks
        self.residual_width = residual_width
        self.freeze_backbone = freeze_backbone
        self.augment = augment
        self.aggregate_deltas = aggregate_deltas
        self.min_confidence = min_confidence
        self.precision = precision
        self.seed = seed

    def _config(self, epochs: int) -> TrainConfig:
        return TrainConfig(base_lr=self.base_lr, epochs=epochs,
                           batch_size=self.batch_size, sigma=self.sigma,
                           delta_range=self.delta_range,
                           dilations=tuple(self.dilations),
                           augment=self.augment, seed=self.seed,
                           precision=self.precision, joints=self.joints,
                           in_channels=self.in_channels,
                           backbone_width=self.width,
                           backbone_depth=self.depth,
                           residual_blocks=self.residual_blocks,
                           residual_width=self.residual_width,
                           freeze_backbone=self.freeze_backbone,
                           min_confidence=self.min_confidence)

    def fit(self, videos, backbone_checkpoint=None):
        videos = check_videos(videos)
        if backbone_checkpoint is None:
            backbone_checkpoint = train_backbone(
                videos, self._config(self.backbone_epochs))
        self.backbone_checkpoint_ = backbone_checkpoint
        self.checkpoint_ = train_warper(videos, backbone_checkpoint,
                                        self._config(self.epochs))
        self.history_ = self.checkpoint_.history
        return self

    def _require_fitted(self):
        require(hasattr(self, "checkpoint_"),
                f"{type(self).__name__} is not fitted yet; call fit first")

    def _params(self):
        return (backbone_from_checkpoint(self.checkpoint_),
                warper_from_checkpoint(self.checkpoint_))

    def predict(self, video: VideoSample, frame_indices=None) -> list[Pose]:
        self._require_fitted()
        backbone_params, warper_params = self._params()
        dtype = backbone_params.weights[0].dtype
        indices = list(frame_indices if frame_indices is not None
                       else range(video.frame_count))
        if self.aggregate_deltas:
            frames = [f.astype(dtype) for f in video.frames]
            return [decode_peaks(
                temporal_aggregate(frames, t, self.aggregate_deltas,
                                   backbone_params, warper_params),
                self.min_confidence) for t in indices]
        poses = []
        for t in indices:
            heatmap, _ = backbone_forward(video.frames[t].astype(dtype),
                                          backbone_params)
            poses.append(decode_peaks(heatmap, self.min_confidence))
        return poses

    def propagate(self, video: VideoSample, radius: int = 3):
        """{unlabeled frame -> (decoded Pose, source frame)} for one video."""
        self._require_fitted()
        backbone_params, warper_params = self._params()
        return propagate_video(video, backbone_params, warper_params, radius,
                               self.sigma, self.min_confidence)

    def score(self, videos, threshold: float = 0.1) -> float:
        """Mean PCK of ``predict`` against full ground truth."""
        videos = check_videos(videos, need_labels=False)
        predictions, truths = [], []
        for video in videos:
            predictions.extend(self.predict(video))
            truths.extend(video.gt_pose(t) for t in range(video.frame_count))
        return pck_evaluate(predictions, truths, threshold,
                            videos[0].reference_scale).mean
