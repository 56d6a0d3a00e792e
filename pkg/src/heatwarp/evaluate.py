"""Experiment drivers: label propagation with baselines, dilation ablations,
temporal aggregation, pseudo-label retraining, and offset interpretation.

Every driver records (seed, config snapshot, per-condition tables) in an
ExperimentReport so any reported number is reproducible from the report
alone.  Seeds and conditions are independent jobs; `parallel_map` fans them
out over processes with BLAS pinned to one thread per worker.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import backbone_forward
from .heatmaps import decode_peaks, pck_evaluate, render_gaussian
from .synth import MotionParams, apply_degradation, default_skeleton, split_dataset
from .train import (TrainConfig, backbone_from_checkpoint, merge_pseudo_labels,
                    train_backbone, train_warper, warper_from_checkpoint)
from .util import require
from .warper import (compute_difference, propagate_annotation,
                     temporal_aggregate, warp_heatmap)

PCK_THRESHOLD = 0.1


@dataclass
class ExperimentReport:
    experiment_id: str
    conditions: dict
    seeds: list[int]
    config: dict
    wall_clock_seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "experiment_id": self.experiment_id,
            "conditions": self.conditions,
            "seeds": list(self.seeds),
            "config": self.config,
            "wall_clock_seconds": self.wall_clock_seconds,
            "details": self.details,
        }, sort_keys=True)


def write_reports_jsonl(reports, path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in reports))


def write_pck_csv(rows, path) -> None:
    """Rows of (experiment, condition, seed, metric, value) as CSV."""
    lines = ["experiment,condition,seed,metric,value"]
    lines += [f"{e},{c},{s},{m},{v!r}" for e, c, s, m, v in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _worker_init():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:
        pass


def parallel_map(fn, items, workers: int | None = None):
    """Order-preserving map over independent jobs; results never depend on
    scheduling because every job derives randomness from its own seed."""
    items = list(items)
    if workers is None:
        workers = min(2, os.cpu_count() or 1, len(items)) or 1
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers,
                             initializer=_worker_init) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# propagation and baselines


def _heatmap_cache(video, backbone_params, dtype):
    cache: dict[int, np.ndarray] = {}

    def get(t: int) -> np.ndarray:
        if t not in cache:
            cache[t], _ = backbone_forward(video.frames[t].astype(dtype),
                                           backbone_params)
        return cache[t]

    return get


def propagation_targets(video, radius: int):
    """(target, source) pairs: each unlabeled frame within ``radius`` of a
    labeled frame, assigned to its nearest labeled source."""
    pairs: dict[int, int] = {}
    for t in video.manual_indices():
        for delta in range(-radius, radius + 1):
            if delta == 0:
                continue
            tt = t + delta
            if not 0 <= tt < video.frame_count or video.labeled_mask[tt]:
                continue
            if tt not in pairs or abs(tt - t) < abs(tt - pairs[tt]):
                pairs[tt] = t
    return sorted(pairs.items())


def propagate_video(video, backbone_params, warper_params, radius: int,
                    sigma: float, min_confidence: float, dtype=np.float32):
    """Warp each labeled frame's rendered annotation onto its unlabeled
    neighbors; returns {target_frame: (decoded Pose, source_frame)}."""
    require(radius >= 1, f"radius must be >= 1, got {radius}")
    heatmap_at = _heatmap_cache(video, backbone_params, dtype)
    height, width = video.frames[0].shape[1:]
    out = {}
    rendered: dict[int, np.ndarray] = {}
    for target, source in propagation_targets(video, radius):
        if source not in rendered:
            rendered[source] = render_gaussian(video.gt_pose(source), sigma,
                                               height, width).astype(dtype)
        warped = propagate_annotation(rendered[source], heatmap_at(source),
                                      heatmap_at(target), warper_params)
        out[target] = (decode_peaks(warped, min_confidence), source)
    return out


def eval_propagation(test_videos, backbone_params, warper_params,
                     radius: int = 3, sigma: float = 2.0,
                     min_confidence: float = 0.05,
                     threshold: float = PCK_THRESHOLD, dtype=np.float32):
    """PCK of warped-annotation propagation on exactly the unlabeled targets."""
    predictions, truths = [], []
    for video in test_videos:
        require(len(video.manual_indices()) > 0,
                "eval_propagation needs labeled frames")
        for target, (pose, _) in sorted(propagate_video(
                video, backbone_params, warper_params, radius, sigma,
                min_confidence, dtype).items()):
            predictions.append(pose)
            truths.append(video.gt_pose(target))
    return pck_evaluate(predictions, truths, threshold,
                        test_videos[0].reference_scale)


def baseline_copy(test_videos, radius: int = 3,
                  threshold: float = PCK_THRESHOLD):
    """Zero-motion baseline: copy each labeled pose onto its neighbors."""
    predictions, truths = [], []
    for video in test_videos:
        require(len(video.manual_indices()) > 0,
                "baseline_copy needs labeled frames")
        for target, source in propagation_targets(video, radius):
            predictions.append(video.gt_pose(source).copy())
            truths.append(video.gt_pose(target))
    return pck_evaluate(predictions, truths, threshold,
                        test_videos[0].reference_scale)


def _ssd_displacement(frame_a, frame_b, x: float, y: float,
                      patch_size: int, search_range: int):
    """Integer displacement minimizing mean squared patch difference.

    Returns (dy, dx, clamped) where clamped marks a source patch cut by the
    frame border.  Ties resolve to the smallest row-major (dy, dx).
    """
    height, width = frame_a.shape
    half = patch_size // 2
    cx, cy = int(round(x)), int(round(y))
    y0, y1 = max(0, cy - half), min(height, cy + half + 1)
    x0, x1 = max(0, cx - half), min(width, cx + half + 1)
    clamped = (y1 - y0 != patch_size) or (x1 - x0 != patch_size)
    patch = frame_a[y0:y1, x0:x1]
    best = None
    for dy in range(-search_range, search_range + 1):
        for dx in range(-search_range, search_range + 1):
            sy0, sy1 = y0 + dy, y1 + dy
            sx0, sx1 = x0 + dx, x1 + dx
            if sy0 < 0 or sx0 < 0 or sy1 > height or sx1 > width:
                # clip to the valid overlap; compare means so smaller
                # overlaps are not trivially favored
                oy0, oy1 = max(sy0, 0), min(sy1, height)
                ox0, ox1 = max(sx0, 0), min(sx1, width)
                if oy1 - oy0 < 2 or ox1 - ox0 < 2:
                    continue
                window = frame_b[oy0:oy1, ox0:ox1]
                ref = patch[oy0 - sy0:oy1 - sy0, ox0 - sx0:ox1 - sx0]
            else:
                window = frame_b[sy0:sy1, sx0:sx1]
                ref = patch
            cost = float(np.mean((window - ref) ** 2))
            if best is None or cost < best[0] - 1e-15:
                best = (cost, dy, dx)
    _, dy, dx = best
    return dy, dx, clamped


def baseline_blockmatch(test_videos, radius: int = 3, patch_size: int = 9,
                        search_range: int = 6,
                        threshold: float = PCK_THRESHOLD):
    """Exhaustive per-joint SSD block matching, the optical-flow stand-in."""
    first = test_videos[0].frames[0].shape[1:]
    require(patch_size + 2 * search_range <= min(first),
            f"patch {patch_size} + search {search_range} exceed frame {first}")
    predictions, truths = [], []
    clamped_count = 0
    degraded_targets = 0
    for video in test_videos:
        require(len(video.manual_indices()) > 0,
                "baseline_blockmatch needs labeled frames")
        degraded_frames = {t for t, _, _ in video.degraded}
        for target, source in propagation_targets(video, radius):
            pose = video.gt_pose(source).copy()
            frame_a = video.frames[source][0]
            frame_b = video.frames[target][0]
            if target in degraded_frames or source in degraded_frames:
                degraded_targets += 1
            for j in range(pose.joint_count):
                if not pose.visible[j]:
                    continue
                dy, dx, clamped = _ssd_displacement(
                    frame_a, frame_b, pose.xy[j, 0], pose.xy[j, 1],
                    patch_size, search_range)
                clamped_count += int(clamped)
                pose.xy[j, 0] += dx
                pose.xy[j, 1] += dy
            predictions.append(pose)
            truths.append(video.gt_pose(target))
    result = pck_evaluate(predictions, truths, threshold,
                          test_videos[0].reference_scale)
    return result, {"clamped_patches": clamped_count,
                    "degraded_targets": degraded_targets}


# ---------------------------------------------------------------------------
# aggregation and single-frame evaluation


def eval_single_frame(videos, backbone_params, frame_indices=None,
                      min_confidence: float = 0.05,
                      threshold: float = PCK_THRESHOLD, dtype=np.float32):
    predictions, truths = [], []
    for video in videos:
        indices = frame_indices(video) if callable(frame_indices) else (
            frame_indices or range(video.frame_count))
        for t in indices:
            heatmap, _ = backbone_forward(video.frames[t].astype(dtype),
                                          backbone_params)
            predictions.append(decode_peaks(heatmap, min_confidence))
            truths.append(video.gt_pose(t))
    return pck_evaluate(predictions, truths, threshold,
                        videos[0].reference_scale)


def eval_aggregation(videos, backbone_params, warper_params, deltas,
                     frame_indices=None, min_confidence: float = 0.05,
                     threshold: float = PCK_THRESHOLD, dtype=np.float32):
    """PCK of temporal aggregation at the evaluated frames."""
    require(len(list(deltas)) > 0, "delta list must not be empty")
    predictions, truths = [], []
    for video in videos:
        frames = [f.astype(dtype) for f in video.frames]
        indices = frame_indices(video) if callable(frame_indices) else (
            frame_indices or range(video.frame_count))
        for t in indices:
            summed = temporal_aggregate(frames, t, deltas, backbone_params,
                                        warper_params)
            predictions.append(decode_peaks(summed, min_confidence))
            truths.append(video.gt_pose(t))
    return pck_evaluate(predictions, truths, threshold,
                        videos[0].reference_scale)


# ---------------------------------------------------------------------------
# offset interpretation (linear probe)


@dataclass
class OffsetRegressionResult:
    weights: np.ndarray            # [feature_dim + 1, 2], intercept last
    mean_endpoint_error: float
    zero_predictor_error: float
    train_samples: int
    test_samples: int
    feature_dim: int
    ridge_fallback: bool = False


def _offset_fields_for_pair(t_target, t_source, warper_params, heatmap_at):
    f_t = heatmap_at(t_target)
    f_s = heatmap_at(t_source)
    psi = compute_difference(f_t, f_s)
    output, _ = warp_heatmap(f_s, psi, warper_params)
    return output.offset_fields


def offset_pair_set(videos, delta_range: int = 3):
    """(video_idx, target_t, source_t) for every labeled target and non-zero
    delta inside the video."""
    pairs = []
    for vi, video in enumerate(videos):
        for t in video.manual_indices():
            for delta in range(-delta_range, delta_range + 1):
                if delta == 0:
                    continue
                ts = t + delta
                if 0 <= ts < video.frame_count:
                    pairs.append((vi, t, ts))
    return pairs


def offset_motion_regression(train_videos, test_videos, backbone_params,
                             warper_params, delta_range: int = 3,
                             dtype=np.float32):
    """Ordinary least squares from per-pixel offset stacks at joint pixels to
    the joint's true (dy, dx) displacement between the frames."""

    def collect(videos):
        features, labels = [], []
        for vi, video in enumerate(videos):
            heatmap_at = _heatmap_cache(video, backbone_params, dtype)
            for _, t_target, t_source in offset_pair_set([video], delta_range):
                offsets = _offset_fields_for_pair(
                    t_target, t_source, warper_params, heatmap_at)
                pose_t = video.gt_pose(t_target)
                pose_s = video.gt_pose(t_source)
                height, width = video.frames[0].shape[1:]
                for j in range(pose_t.joint_count):
                    if not (pose_t.visible[j] and pose_s.visible[j]):
                        continue
                    px = int(round(pose_t.xy[j, 0]))
                    py = int(round(pose_t.xy[j, 1]))
                    if not (0 <= px < width and 0 <= py < height):
                        continue
                    feat = np.concatenate([off[:, py, px] for off in offsets])
                    disp = pose_s.xy[j] - pose_t.xy[j]
                    features.append(feat)
                    labels.append((disp[1], disp[0]))   # (dy, dx)
        return np.asarray(features, dtype=np.float64), np.asarray(labels)

    x_train, y_train = collect(train_videos)
    x_test, y_test = collect(test_videos)
    require(x_train.shape[0] > x_train.shape[1] + 1,
            f"{x_train.shape[0]} probe samples cannot fit "
            f"{x_train.shape[1]} features")
    design = np.hstack([x_train, np.ones((x_train.shape[0], 1))])
    ridge = False
    solution, _, rank, _ = np.linalg.lstsq(design, y_train, rcond=None)
    if rank < design.shape[1]:
        lam = 1e-6
        gram = design.T @ design + lam * np.eye(design.shape[1])
        solution = np.linalg.solve(gram, design.T @ y_train)
        ridge = True
    test_design = np.hstack([x_test, np.ones((x_test.shape[0], 1))])
    pred = test_design @ solution
    epe = float(np.mean(np.linalg.norm(pred - y_test, axis=1)))
    zero = float(np.mean(np.linalg.norm(y_test, axis=1)))
    return OffsetRegressionResult(solution, epe, zero, x_train.shape[0],
                                  x_test.shape[0], x_train.shape[1], ridge)


def dense_motion_field(video, t_target, t_source, backbone_params,
                       warper_params, regression: OffsetRegressionResult,
                       dtype=np.float32):
    """Apply the linear probe at every pixel: [2,H,W] (dy, dx) field plus the
    mean offset magnitude map, for visualization export."""
    heatmap_at = _heatmap_cache(video, backbone_params, dtype)
    offsets = _offset_fields_for_pair(t_target, t_source, warper_params,
                                      heatmap_at)
    height, width = video.frames[0].shape[1:]
    stacked = np.concatenate([off.reshape(off.shape[0], -1) for off in offsets])
    design = np.vstack([stacked, np.ones((1, height * width))])
    flow = (regression.weights.T @ design).reshape(2, height, width)
    magnitude = np.abs(stacked).mean(axis=0).reshape(height, width)
    return flow, magnitude


# ---------------------------------------------------------------------------
# the desk-scale benchmark


@dataclass(frozen=True)
class BenchmarkSpec:
    """Default synthetic benchmark: 40/5/5 videos of 29 frames at 64x64,
    labeled every 7th frame, 13 joints.

    The training presets below are sized for minutes-scale CPU runs: a small
    backbone without augmentation, and a frozen-backbone warper so its pair
    training can reuse cached heatmaps.  The library defaults in TrainConfig
    stay at the larger reference values; these overrides are the benchmark's.
    """

    n_videos: int = 50
    fractions: tuple[float, ...] = (0.8, 0.1, 0.1)
    frame_count: int = 29
    height: int = 64
    width: int = 64
    label_interval: int = 7
    seeds: tuple[int, ...] = (0, 1, 2)
    radius: int = 3
    backbone_epochs: int = 20
    warper_epochs: int = 8
    pseudo_videos: int = 12     # scarce-label regime for the retraining study
    motion: MotionParams = MotionParams()

    def backbone_config(self, seed: int) -> TrainConfig:
        return TrainConfig(base_lr=2e-3, epochs=self.backbone_epochs,
                           batch_size=4, seed=seed, augment=False,
                           backbone_width=24, backbone_depth=3,
                           precision="float32")

    def warper_config(self, seed: int,
                      dilations=(3, 6, 12, 18, 24)) -> TrainConfig:
        return TrainConfig(base_lr=3e-3, epochs=self.warper_epochs,
                           batch_size=2, seed=seed, augment=False,
                           backbone_width=24, backbone_depth=3,
                           residual_blocks=2, residual_width=16,
                           dilations=tuple(dilations),
                           freeze_backbone=True, precision="float32")

    def make_dataset(self, seed: int):
        return split_dataset(self.n_videos, self.fractions, seed,
                             default_skeleton(), self.motion,
                             self.frame_count, self.height, self.width,
                             self.label_interval)


def _seed_propagation_job(args):
    spec, seed, dilations = args
    train, val, test = spec.make_dataset(seed)
    backbone_ckpt = train_backbone(train, spec.backbone_config(seed),
                                   val_videos=None)
    warper_ckpt = train_warper(train, backbone_ckpt,
                               spec.warper_config(seed, dilations))
    backbone_params = backbone_from_checkpoint(warper_ckpt)
    warper_params = warper_from_checkpoint(warper_ckpt)
    warper_pck = eval_propagation(test, backbone_params, warper_params,
                                  spec.radius)
    copy_pck = baseline_copy(test, spec.radius)
    block_pck, block_details = baseline_blockmatch(test, spec.radius)
    return {
        "seed": seed,
        "warper": warper_pck.mean,
        "copy": copy_pck.mean,
        "blockmatch": block_pck.mean,
        "blockmatch_details": block_details,
        "warper_per_joint": warper_pck.per_joint.tolist(),
        "checkpoint": warper_ckpt,
        "backbone_checkpoint": backbone_ckpt,
    }


def run_propagation_benchmark(spec: BenchmarkSpec = BenchmarkSpec(),
                              workers: int | None = None,
                              dilations=(3, 6, 12, 18, 24)):
    """Criterion benchmark: trained propagation vs block matching vs copy."""
    start = time.perf_counter()
    rows = parallel_map(_seed_propagation_job,
                        [(spec, seed, tuple(dilations)) for seed in spec.seeds],
                        workers)
    conditions = {
        "warper": float(np.mean([r["warper"] for r in rows])),
        "blockmatch": float(np.mean([r["blockmatch"] for r in rows])),
        "copy": float(np.mean([r["copy"] for r in rows])),
        "per_seed": {str(r["seed"]): {k: r[k] for k in
                                      ("warper", "blockmatch", "copy")}
                     for r in rows},
    }
    report = ExperimentReport(
        "propagation", conditions, list(spec.seeds),
        {"benchmark": _spec_dict(spec), "dilations": list(dilations)},
        time.perf_counter() - start)
    return report, rows


def _spec_dict(spec: BenchmarkSpec) -> dict:
    out = {
        "n_videos": spec.n_videos, "fractions": list(spec.fractions),
        "frame_count": spec.frame_count, "height": spec.height,
        "width": spec.width, "label_interval": spec.label_interval,
        "seeds": list(spec.seeds), "radius": spec.radius,
        "backbone_epochs": spec.backbone_epochs,
        "warper_epochs": spec.warper_epochs,
        "pseudo_videos": spec.pseudo_videos,
    }
    return out


def ablate_dilations(spec: BenchmarkSpec, configurations, workers=None):
    """Propagation PCK per dilation configuration, averaged over the spec's
    seeds; every configuration trains from the same per-seed backbone."""
    start = time.perf_counter()
    jobs = [(spec, seed, tuple(config))
            for config in configurations for seed in spec.seeds]
    rows = parallel_map(_seed_propagation_job, jobs, workers)
    conditions = {}
    for config in configurations:
        key = ",".join(str(d) for d in config)
        values = [r["warper"] for r, (sp, seed, cfg) in zip(rows, jobs)
                  if cfg == tuple(config)]
        conditions[key] = {"mean": float(np.mean(values)),
                           "per_seed": [float(v) for v in values]}
    return ExperimentReport(
        "dilation-ablation", conditions, list(spec.seeds),
        {"benchmark": _spec_dict(spec),
         "configurations": [list(c) for c in configurations]},
        time.perf_counter() - start)


def _seed_aggregation_job(args):
    spec, seed, deltas, blur_sigma, row = args
    _, _, test = spec.make_dataset(seed)
    backbone_params = backbone_from_checkpoint(row["checkpoint"])
    warper_params = warper_from_checkpoint(row["checkpoint"])
    evaluated = lambda video: range(0, video.frame_count, 2)
    degraded = [apply_degradation(v, list(range(0, v.frame_count, 2)),
                                  "blur", blur_sigma, seed=seed)
                for v in test]
    out = {"seed": seed}
    for name, videos in (("clean", test), ("degraded", degraded)):
        out[f"single_{name}"] = eval_single_frame(
            videos, backbone_params, evaluated).mean
        out[f"aggregated_{name}"] = eval_aggregation(
            videos, backbone_params, warper_params, deltas, evaluated).mean
    return out


def run_aggregation_experiment(spec: BenchmarkSpec, trained_rows,
                               deltas=(-3, -2, -1, 0, 1, 2, 3),
                               blur_sigma: float = 1.6, workers=None):
    """Single-frame decoding vs temporal aggregation, clean and blurred.

    ``trained_rows`` come from run_propagation_benchmark (one per seed), so
    aggregation reuses the same trained checkpoints.
    """
    start = time.perf_counter()
    jobs = [(spec, row["seed"], tuple(deltas), blur_sigma, row)
            for row in trained_rows]
    rows = parallel_map(_seed_aggregation_job, jobs, workers)
    conditions = {}
    for key in ("single_clean", "aggregated_clean", "single_degraded",
                "aggregated_degraded"):
        conditions[key] = float(np.mean([r[key] for r in rows]))
    conditions["per_seed"] = {str(r["seed"]): {k: r[k] for k in r
                                               if k != "seed"} for r in rows}
    return ExperimentReport(
        "temporal-aggregation", conditions, [r["seed"] for r in rows],
        {"benchmark": _spec_dict(spec), "deltas": list(deltas),
         "blur_sigma": blur_sigma},
        time.perf_counter() - start)


def _seed_pseudo_label_job(args):
    spec, seed = args
    train, _, test = spec.make_dataset(seed)
    subset = train[:spec.pseudo_videos]
    config = spec.backbone_config(seed)
    sparse_ckpt = train_backbone(subset, config)
    sparse_pck = eval_single_frame(test, backbone_from_checkpoint(sparse_ckpt))
    warper_ckpt = train_warper(subset, sparse_ckpt, spec.warper_config(seed))
    backbone_params = backbone_from_checkpoint(warper_ckpt)
    warper_params = warper_from_checkpoint(warper_ckpt)
    propagated = {}
    for vi, video in enumerate(subset):
        poses = propagate_video(video, backbone_params, warper_params,
                                spec.radius, config.sigma,
                                config.min_confidence)
        propagated[vi] = {t: pose for t, (pose, _) in poses.items()}
    merged = merge_pseudo_labels(subset, propagated, config.pseudo_confidence)
    retrained = train_backbone(merged, config)
    dense_pck = eval_single_frame(test, backbone_from_checkpoint(retrained))
    pseudo_count = int(sum(v.pseudo_mask.sum() for v in merged))
    return {"seed": seed, "sparse": sparse_pck.mean, "augmented": dense_pck.mean,
            "pseudo_labels": pseudo_count}


def run_pseudo_label_experiment(spec: BenchmarkSpec, workers=None):
    """Retrain the backbone on manual plus propagated labels and compare its
    held-out PCK to the sparse-only backbone.

    Runs in a scarce-label regime (``spec.pseudo_videos`` of the training
    videos) where augmentation has headroom; the whole pipeline (backbone,
    warper, propagation, retraining) stays inside that regime.
    """
    start = time.perf_counter()
    rows = parallel_map(_seed_pseudo_label_job,
                        [(spec, seed) for seed in spec.seeds], workers)
    conditions = {
        "sparse": float(np.mean([r["sparse"] for r in rows])),
        "augmented": float(np.mean([r["augmented"] for r in rows])),
        "per_seed": {str(r["seed"]): {k: r[k] for k in r if k != "seed"}
                     for r in rows},
    }
    return ExperimentReport(
        "pseudo-label-retraining", conditions, [r["seed"] for r in rows],
        {"benchmark": _spec_dict(spec)}, time.perf_counter() - start)


def _seed_offset_job(args):
    spec, seed, row = args
    train, val, test = spec.make_dataset(seed)
    backbone_params = backbone_from_checkpoint(row["checkpoint"])
    warper_params = warper_from_checkpoint(row["checkpoint"])
    result = offset_motion_regression(val, test, backbone_params,
                                      warper_params, spec.radius)
    return {"seed": seed, "epe": result.mean_endpoint_error,
            "zero_epe": result.zero_predictor_error,
            "feature_dim": result.feature_dim,
            "ridge_fallback": result.ridge_fallback}


def run_offset_experiment(spec: BenchmarkSpec, trained_rows, workers=None):
    """Linear probe from offsets to true joint displacement on held-out pairs."""
    start = time.perf_counter()
    rows = parallel_map(_seed_offset_job,
                        [(spec, row["seed"], row) for row in trained_rows],
                        workers)
    conditions = {
        "endpoint_error": float(np.mean([r["epe"] for r in rows])),
        "zero_predictor_error": float(np.mean([r["zero_epe"] for r in rows])),
        "per_seed": {str(r["seed"]): {k: r[k] for k in r if k != "seed"}
                     for r in rows},
    }
    return ExperimentReport(
        "offset-interpretation", conditions, [r["seed"] for r in rows],
        {"benchmark": _spec_dict(spec)}, time.perf_counter() - start)
