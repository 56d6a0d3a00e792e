"""heatwarp: temporal keypoint-heatmap warping for pose estimation in
sparsely labeled videos.

The package trains a small heatmap backbone plus a deformable warping head
that learns to align one frame's heatmaps onto another from their
difference.  The trained head propagates annotations to unlabeled frames,
manufactures pseudo labels for retraining, and aggregates neighboring
frames' evidence at inference.
"""

from .backbone import BackboneConfig, BackboneParams, backbone_backward, \
    backbone_forward, init_backbone
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, \
    save_checkpoint
from .deform import bilinear_sample, deform_conv_backward, deform_conv_forward
from .estimators import PoseHeatmapEstimator, TemporalWarpEstimator
from .heatmaps import (Pose, decode_peaks, mse_loss, pck_evaluate,
                       render_gaussian)
from .synth import (MotionParams, SkeletonSpec, VideoSample, apply_degradation,
                    default_skeleton, generate_video, guard_ground_truth,
                    load_dataset, save_dataset, split_dataset)
from .tensor import (GradCheckReport, KernelSpec, conv2d_backward,
                     conv2d_forward, grad_check)
from .train import (AdamState, TrainConfig, adam_step, augment, lr_schedule,
                    merge_pseudo_labels, train_backbone, train_warper)
from .util import ContractError
from .warper import (WarperConfig, WarperParams, compute_difference,
                     init_warper, propagate_annotation, temporal_aggregate,
                     warp_heatmap, warper_backward)

__version__ = "0.1.0"
