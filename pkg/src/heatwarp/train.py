"""Optimizer, schedules, augmentation, and the two-stage training procedure.

Stage one trains the backbone on labeled frames only.  Stage two samples
(labeled frame A, neighbor frame B at a random time gap), predicts A's
heatmap by warping B's, and optimizes the warping head (plus, by default,
the backbone) end to end.  Ground truth of unlabeled frames stays behind the
access guard for the whole of training.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, BackboneParams, backbone_backward, \
    backbone_forward, init_backbone
from .checkpoint import Checkpoint
from .deform import bilinear_resample_grid
from .heatmaps import Pose, decode_peaks, mse_loss, pck_evaluate, render_gaussian
from .synth import guard_ground_truth
from .util import require, spawn_rng
from .warper import (WarperConfig, WarperParams, compute_difference, init_warper,
                     warp_heatmap, warper_backward)


class TrainingError(RuntimeError):
    """Training aborted (divergence or non-finite gradients)."""


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    milestones: tuple[int, ...] | None = None   # None: epochs/2 and 3*epochs/4
    epochs: int = 20
    batch_size: int = 8
    delta_range: int = 3
    dilations: tuple[int, ...] = (3, 6, 12, 18, 24)
    sigma: float = 2.0
    rotation_degrees: float = 30.0
    scale_range: tuple[float, float] = (0.75, 1.25)
    flip_probability: float = 0.5
    augment: bool = True
    seed: int = 0
    precision: str = "float32"
    joints: int = 13
    in_channels: int = 1
    backbone_width: int = 32
    backbone_depth: int = 4
    residual_blocks: int = 4
    residual_width: int = 32
    offset_groups: int = 1
    freeze_backbone: bool = False
    pseudo_confidence: float = 0.2
    min_confidence: float = 0.05

    def __post_init__(self):
        require(self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")
        require(self.delta_range >= 0,
                f"delta_range must be >= 0, got {self.delta_range}")
        require(self.precision in ("float32", "float64"),
                f"precision must be float32 or float64, got {self.precision}")
        require(self.scale_range[0] > 0,
                f"degenerate scale range {self.scale_range}")
        ms = self.resolved_milestones()
        require(all(b > a for a, b in zip(ms, ms[1:])),
                f"milestones must be increasing, got {ms}")

    def resolved_milestones(self) -> tuple[int, ...]:
        """Explicit milestones, or the default schedule scaled to the epoch
        count (20 epochs -> drops after 10 and 15)."""
        if self.milestones is not None:
            return tuple(self.milestones)
        return (max(1, self.epochs * 10 // 20), max(2, self.epochs * 15 // 20))

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.in_channels, self.backbone_width,
                              self.backbone_depth, self.joints)

    def warper_config(self) -> WarperConfig:
        return WarperConfig(self.joints, self.residual_blocks,
                            self.residual_width, tuple(self.dilations),
                            offset_groups=self.offset_groups)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
        return cls(**kwargs)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Piecewise constant: base rate, divided by ten after each milestone."""
    require(epoch >= 0, f"epoch must be >= 0, got {epoch}")
    lr = config.base_lr
    for milestone in config.resolved_milestones():
        if epoch >= milestone:
            lr /= 10.0
    return lr


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """Bias-corrected Adam update, in place; aborts before mutating anything
    when a gradient is non-finite."""
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentTransform:
    rotation: float = 0.0      # radians, about the frame center
    scale: float = 1.0
    flip: bool = False

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        flip = np.diag([-1.0, 1.0]) if self.flip else np.eye(2)
        return rot @ (self.scale * np.eye(2)) @ flip


def sample_augment(config: TrainConfig, rng: np.random.Generator) -> AugmentTransform:
    if not config.augment:
        return AugmentTransform()
    rot = np.deg2rad(rng.uniform(-config.rotation_degrees,
                                 config.rotation_degrees))
    scale = rng.uniform(*config.scale_range)
    flip = bool(rng.uniform() < config.flip_probability)
    return AugmentTransform(rot, scale, flip)


def _resample_frame(frame: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Bilinear warp of [C,H,W] under p_out = A (p_in - c) + c, zero fill."""
    _, h, w = frame.shape
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    inv = np.linalg.inv(matrix)
    grid_y, grid_x = np.meshgrid(np.arange(h, dtype=np.float64),
                                 np.arange(w, dtype=np.float64), indexing="ij")
    rel_x = grid_x - center[0]
    rel_y = grid_y - center[1]
    src_x = inv[0, 0] * rel_x + inv[0, 1] * rel_y + center[0]
    src_y = inv[1, 0] * rel_x + inv[1, 1] * rel_y + center[1]
    return bilinear_resample_grid(frame, src_y, src_x)


def apply_augment(frame: np.ndarray, pose: Pose, transform: AugmentTransform,
                  flip_pairs=()) -> tuple[np.ndarray, Pose]:
    """Apply one spatial transform to an image and its pose.

    A horizontal flip also swaps the left/right joint labels; joints leaving
    the frame come back marked not visible.
    """
    require(transform.scale > 0, f"degenerate scale {transform.scale}")
    _, h, w = frame.shape
    matrix = transform.matrix()
    if (transform.rotation, transform.scale, transform.flip) == (0.0, 1.0, False):
        new_frame = frame.copy()
    else:
        new_frame = _resample_frame(frame, matrix)
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    xy = (pose.xy - center) @ matrix.T + center
    visible = pose.visible.copy()
    if transform.flip:
        for a, b in flip_pairs:
            xy[[a, b]] = xy[[b, a]]
            visible[[a, b]] = visible[[b, a]]
    in_bounds = ((xy[:, 0] >= 0) & (xy[:, 0] <= w - 1)
                 & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1))
    return new_frame, Pose(xy, visible & in_bounds)


def augment(frame: np.ndarray, pose: Pose, config: TrainConfig,
            rng: np.random.Generator, flip_pairs=()):
    """Sample one transform and apply it (pair training samples once and
    applies the identical transform to both frames)."""
    transform = sample_augment(config, rng)
    return apply_augment(frame, pose, transform, flip_pairs)


# ---------------------------------------------------------------------------
# training drivers


def _labeled_samples(videos, manual_only: bool):
    samples = []
    for vi, video in enumerate(videos):
        indices = video.manual_indices() if manual_only else video.label_indices()
        samples.extend((vi, t) for t in indices)
    require(len(samples) >= 1, "dataset has no labeled frame")
    return samples


def _mean_pck(videos, predict, threshold=0.1):
    predictions, truths = [], []
    for video in videos:
        for t in range(video.frame_count):
            predictions.append(predict(video, t))
            truths.append(video.gt_pose(t))
    return pck_evaluate(predictions, truths, threshold,
                        videos[0].reference_scale).mean


def backbone_from_checkpoint(ckpt: Checkpoint, dtype=None) -> BackboneParams:
    config = TrainConfig.from_dict(ckpt.config)
    params = init_backbone(config.backbone_config(), seed=0,
                           dtype=dtype or config.dtype)
    params.load_named({k: v.astype(params.weights[0].dtype)
                       for k, v in ckpt.tensors.items()
                       if k.startswith("backbone.")})
    return params


def warper_from_checkpoint(ckpt: Checkpoint, dtype=None) -> WarperParams:
    config = TrainConfig.from_dict(ckpt.config)
    params = init_warper(config.warper_config(), seed=0,
                         dtype=dtype or config.dtype)
    cast = dtype or config.dtype
    params.load_named({k: v.astype(cast) for k, v in ckpt.tensors.items()
                       if k.startswith("warper.")})
    return params


def train_backbone(train_videos, config: TrainConfig,
                   val_videos=None) -> Checkpoint:
    """Supervised heatmap regression on labeled (manual or pseudo) frames."""
    dtype = config.dtype
    params = init_backbone(config.backbone_config(), seed=config.seed,
                           dtype=dtype)
    named = params.named()
    state = AdamState.for_params(named)
    samples = _labeled_samples(train_videos, manual_only=False)
    history = []
    with guard_ground_truth(train_videos):
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config)
            rng = spawn_rng(config.seed, "train-backbone", epoch)
            order = rng.permutation(len(samples))
            epoch_loss = 0.0
            seen = 0
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                grads = {k: np.zeros_like(p) for k, p in named.items()}
                for pick in batch:
                    vi, t = samples[pick]
                    video = train_videos[vi]
                    frame = video.frames[t].astype(dtype)
                    pose = video.label_pose(t)
                    if config.augment:
                        frame, pose = augment(frame, pose, config, rng,
                                              video.flip_pairs)
                    target = render_gaussian(pose, config.sigma,
                                             frame.shape[1],
                                             frame.shape[2]).astype(dtype)
                    out, cache = backbone_forward(frame, params)
                    loss = mse_loss(out, target, pose.visible)
                    if not np.isfinite(loss.value):
                        raise TrainingError(
                            f"NaN loss at epoch {epoch} sample ({vi}, {t})")
                    step_grads, _ = backbone_backward(cache, params, loss.grad)
                    for name, g in step_grads.named().items():
                        grads[name] += g / len(batch)
                    epoch_loss += loss.value
                    seen += 1
                adam_step(named, grads, state, lr)
            record = {"epoch": epoch, "lr": lr,
                      "train_loss": epoch_loss / max(seen, 1)}
            if val_videos:
                record["val_pck"] = _validation_pck_backbone(
                    val_videos, params, config)
            history.append(record)
    tensors = {k: v.copy() for k, v in named.items()}
    snapshot = dict(config.to_dict(), kind="backbone")
    return Checkpoint(tensors, snapshot, epoch=config.epochs, history=history)


def _validation_pck_backbone(val_videos, params, config):
    def predict(video, t):
        out, _ = backbone_forward(video.frames[t].astype(config.dtype), params)
        return decode_peaks(out, config.min_confidence)
    return _mean_pck(val_videos, predict)


def train_warper(train_videos, backbone_ckpt: Checkpoint,
                 config: TrainConfig, val_videos=None) -> Checkpoint:
    """End-to-end pair training: warp a neighbor's heatmap onto each labeled
    frame and regress the labeled frame's rendered ground truth."""
    dtype = config.dtype
    backbone_params = backbone_from_checkpoint(backbone_ckpt, dtype=dtype)
    warper_params = init_warper(config.warper_config(), seed=config.seed,
                                dtype=dtype)
    named = warper_params.named()
    if not config.freeze_backbone:
        named.update(backbone_params.named())
    state = AdamState.for_params(named)
    samples = _labeled_samples(train_videos, manual_only=True)
    history = []
    # frozen backbone + no augmentation: every frame's heatmap is constant,
    # so compute each at most once for the whole run
    frozen_static = config.freeze_backbone and not config.augment
    heatmap_cache: dict[tuple[int, int], np.ndarray] = {}

    def frozen_heatmap(vi, t):
        key = (vi, t)
        if key not in heatmap_cache:
            frame = train_videos[vi].frames[t].astype(dtype)
            heatmap_cache[key], _ = backbone_forward(frame, backbone_params)
        return heatmap_cache[key]

    with guard_ground_truth(train_videos):
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config)
            rng = spawn_rng(config.seed, "train-warper", epoch)
            order = rng.permutation(len(samples))
            epoch_loss = 0.0
            seen = 0
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                grads = {k: np.zeros_like(p) for k, p in named.items()}
                for pick in batch:
                    vi, t = samples[pick]
                    video = train_videos[vi]
                    delta = int(rng.integers(-config.delta_range,
                                             config.delta_range + 1))
                    t_other = min(max(t + delta, 0), video.frame_count - 1)
                    pose_a = video.label_pose(t)
                    cache_a = cache_b = None
                    if frozen_static:
                        f_a = frozen_heatmap(vi, t)
                        f_b = frozen_heatmap(vi, t_other)
                        height, width = f_a.shape[1:]
                    else:
                        frame_a = video.frames[t].astype(dtype)
                        frame_b = video.frames[t_other].astype(dtype)
                        if config.augment:
                            # both frames of a pair get the identical transform
                            transform = sample_augment(config, rng)
                            frame_a, pose_a = apply_augment(frame_a, pose_a,
                                                            transform,
                                                            video.flip_pairs)
                            frame_b = _resample_frame(frame_b,
                                                      transform.matrix())
                        f_a, cache_a = backbone_forward(frame_a, backbone_params)
                        f_b, cache_b = backbone_forward(frame_b, backbone_params)
                        height, width = frame_a.shape[1:]
                    target = render_gaussian(pose_a, config.sigma,
                                             height, width).astype(dtype)
                    psi = compute_difference(f_a, f_b)
                    output, wcache = warp_heatmap(f_b, psi, warper_params)
                    loss = mse_loss(output.g, target, pose_a.visible)
                    if not np.isfinite(loss.value):
                        raise TrainingError(
                            f"NaN loss at epoch {epoch} sample ({vi}, {t})")
                    wgrads, grad_fb_warp, grad_psi = warper_backward(
                        wcache, warper_params, loss.grad,
                        need_source_grad=not config.freeze_backbone)
                    for name, g in wgrads.named().items():
                        grads[name] += g / len(batch)
                    if not config.freeze_backbone:
                        grad_fa = grad_psi
                        grad_fb = grad_fb_warp - grad_psi
                        bgrads_a, _ = backbone_backward(cache_a,
                                                        backbone_params, grad_fa)
                        bgrads_b, _ = backbone_backward(cache_b,
                                                        backbone_params, grad_fb)
                        for name, g in bgrads_a.named().items():
                            grads[name] += g / len(batch)
                        for name, g in bgrads_b.named().items():
                            grads[name] += g / len(batch)
                    epoch_loss += loss.value
                    seen += 1
                adam_step(named, grads, state, lr)
            record = {"epoch": epoch, "lr": lr,
                      "train_loss": epoch_loss / max(seen, 1)}
            history.append(record)
    tensors = {k: v.copy() for k, v in named.items()}
    tensors.update({k: v.copy()
                    for k, v in backbone_params.named().items()})
    snapshot = dict(config.to_dict(), kind="warper")
    return Checkpoint(tensors, snapshot, epoch=config.epochs, history=history)


def merge_pseudo_labels(videos, propagated, confidence_threshold: float):
    """Extend sparse labels with propagated poses.

    ``propagated[video_index][frame] -> Pose`` (confidences attached).
    Manual labels always win collisions; joints under the confidence
    threshold come back not visible.  Returns new VideoSample objects.
    """
    merged = []
    for vi, video in enumerate(videos):
        out = video.shallow_copy()
        for t, pose in sorted(propagated.get(vi, {}).items()):
            if out.labeled_mask[t]:
                continue        # manual label wins
            pose = pose.copy()
            if pose.confidence is not None:
                pose.visible = pose.visible & (
                    pose.confidence >= confidence_threshold)
            out._pseudo_poses[t] = pose
            out.pseudo_mask[t] = True
        merged.append(out)
    return merged
