"""Deterministic synthetic articulated-skeleton videos with sparse labels.

A skeleton is a tree of links with fixed lengths; every link swings around its
base world angle with a per-video angular velocity while the root translates
inside a safe box (bouncing off its walls), so every joint stays in frame.
Frames render the links as anti-aliased Gaussian-profile strokes with a fixed
per-link intensity over a low-amplitude noise background; the fixed intensity
assignment is what lets a network tell joints apart.

Ground truth exists for every frame but training code must only read manual
(or pseudo) labels; ``guard_ground_truth`` enforces that at run time.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .heatmaps import Pose
from .netpbm import read_pgm, write_pgm
from .util import ContractError, require, spawn_rng

DEFAULT_HEIGHT = 64
DEFAULT_WIDTH = 64
DEFAULT_FRAMES = 29
DEFAULT_LABEL_INTERVAL = 7


@dataclass(frozen=True)
class SkeletonSpec:
    """Joint tree with per-link geometry and rendering attributes.

    ``parents[j] == -1`` marks the root.  ``base_angles`` are world angles of
    the link parent->joint (0 points +x, pi/2 points +y, i.e. down), ``swing``
    is the maximum deviation from the base angle, ``intensities`` the fixed
    render brightness per link (root entry used for the root blob).
    """

    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    lengths: tuple[float, ...]
    base_angles: tuple[float, ...]
    swing: tuple[float, ...]
    intensities: tuple[float, ...]
    flip_pairs: tuple[tuple[int, int], ...]
    stroke_sigma: float = 0.9
    root_blob_sigma: float = 1.2

    def __post_init__(self):
        j = len(self.joint_names)
        for name, f in (("parents", self.parents), ("lengths", self.lengths),
                        ("base_angles", self.base_angles), ("swing", self.swing),
                        ("intensities", self.intensities)):
            require(len(f) == j, f"{name} must have {j} entries, got {len(f)}")
        require(sum(1 for p in self.parents if p == -1) == 1,
                "skeleton must have exactly one root")
        require(all(length > 0 for j_, length in enumerate(self.lengths)
                    if self.parents[j_] != -1),
                "segment lengths must be positive")
        # connectivity: every joint must reach the root
        for j_ in range(j):
            seen = set()
            node = j_
            while self.parents[node] != -1:
                require(node not in seen, "parent links contain a cycle")
                seen.add(node)
                node = self.parents[node]

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @property
    def root(self) -> int:
        return self.parents.index(-1)

    def chain_reach(self) -> float:
        """Longest root-to-joint chain length, the worst-case radius."""
        best = 0.0
        for j in range(self.joint_count):
            total = 0.0
            node = j
            while self.parents[node] != -1:
                total += self.lengths[node]
                node = self.parents[node]
            best = max(best, total)
        return best

    @property
    def torso_length(self) -> float:
        """Reference scale for PCK: mean length of the head-to-hip links."""
        hips = [j for j, name in enumerate(self.joint_names) if "hip" in name]
        if not hips:
            return self.chain_reach()
        return float(np.mean([self.lengths[j] for j in hips]))

    def topological_order(self) -> list[int]:
        order = [self.root]
        remaining = set(range(self.joint_count)) - {self.root}
        while remaining:
            progressed = [j for j in remaining if self.parents[j] in order]
            require(bool(progressed), "parent links do not form a connected tree")
            order.extend(sorted(progressed))
            remaining -= set(progressed)
        return order


def default_skeleton() -> SkeletonSpec:
    """13-joint human-like tree rooted at the head, sized for 64x64 frames."""
    down = np.pi / 2
    names = ("head",
             "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
             "l_wrist", "r_wrist",
             "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle")
    parents = (-1, 0, 0, 1, 2, 3, 4, 0, 0, 7, 8, 9, 10)
    lengths = (0.0, 4.5, 4.5, 4.5, 4.5, 4.0, 4.0,
               13.0, 13.0, 5.0, 5.0, 4.5, 4.5)
    base_angles = (0.0,
                   down - 1.15, down + 1.15, down - 0.55, down + 0.55,
                   down - 0.35, down + 0.35,
                   down - 0.22, down + 0.22, down - 0.18, down + 0.18,
                   down - 0.12, down + 0.12)
    swing = (0.0, 0.35, 0.35, 0.55, 0.55, 0.65, 0.65,
             0.15, 0.15, 0.40, 0.40, 0.45, 0.45)
    # fixed distinct brightness per link; assignment never varies across videos
    intensities = (1.0, 0.50, 0.95, 0.55, 0.90, 0.60, 0.85,
                   0.65, 0.80, 0.70, 0.75, 0.45, 0.99)
    flip_pairs = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12))
    return SkeletonSpec(names, parents, lengths, base_angles, swing,
                        intensities, flip_pairs)


@dataclass(frozen=True)
class MotionParams:
    root_speed: tuple[float, float] = (0.6, 1.6)       # px/frame
    angular_speed: tuple[float, float] = (0.03, 0.12)  # rad/frame
    occlusion_probability: float = 0.0
    blur_sigma: tuple[float, float] = (0.0, 0.0)
    background_amplitude: float = 0.15
    seed: int = 0

    def __post_init__(self):
        for name, rng_ in (("root_speed", self.root_speed),
                           ("angular_speed", self.angular_speed),
                           ("blur_sigma", self.blur_sigma)):
            require(np.isfinite(rng_).all() and 0 <= rng_[0] <= rng_[1],
                    f"{name} range must be finite and ordered, got {rng_}")
        require(0.0 <= self.occlusion_probability <= 1.0,
                "occlusion probability must lie in [0,1]")

    def displacement_bound(self, skeleton: SkeletonSpec) -> float:
        """Per-frame joint displacement never exceeds root speed plus the sum
        of segment length times angular speed."""
        return self.root_speed[1] + self.angular_speed[1] * sum(skeleton.lengths)


@dataclass
class VideoSample:
    """Frame sequence, full ground truth, and the sparse-label mask."""

    frames: list[np.ndarray]
    labeled_mask: np.ndarray
    seed: int
    joint_names: tuple[str, ...]
    reference_scale: float
    flip_pairs: tuple[tuple[int, int], ...] = ()
    pseudo_mask: np.ndarray = None          # type: ignore[assignment]
    degraded: list[tuple] = field(default_factory=list)
    _gt_poses: list[Pose] = field(default_factory=list, repr=False)
    _pseudo_poses: dict = field(default_factory=dict, repr=False)
    _guarded: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.pseudo_mask is None:
            self.pseudo_mask = np.zeros(len(self.frames), dtype=bool)

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def gt_pose(self, t: int) -> Pose:
        """Full ground truth; blocked on unlabeled frames while guarded."""
        if self._guarded and not self.labeled_mask[t]:
            raise ContractError(
                f"ground-truth access to unlabeled frame {t} is guarded "
                "during training")
        return self._gt_poses[t]

    def label_pose(self, t: int) -> Pose:
        """Manual label if present, else pseudo label, else an error."""
        if self.labeled_mask[t]:
            return self._gt_poses[t]
        if self.pseudo_mask[t]:
            return self._pseudo_poses[t]
        raise ContractError(f"frame {t} carries no label")

    def label_indices(self) -> list[int]:
        mask = self.labeled_mask | self.pseudo_mask
        return [int(t) for t in np.flatnonzero(mask)]

    def manual_indices(self) -> list[int]:
        return [int(t) for t in np.flatnonzero(self.labeled_mask)]

    def shallow_copy(self) -> "VideoSample":
        copy = VideoSample(list(self.frames), self.labeled_mask.copy(),
                           self.seed, self.joint_names, self.reference_scale,
                           self.flip_pairs, self.pseudo_mask.copy(),
                           list(self.degraded),
                           [p.copy() for p in self._gt_poses],
                           dict(self._pseudo_poses))
        return copy


@contextmanager
def guard_ground_truth(videos):
    """Context manager: unlabeled-frame ground truth raises inside the block."""
    previous = [v._guarded for v in videos]
    for v in videos:
        v._guarded = True
    try:
        yield
    finally:
        for v, prev in zip(videos, previous):
            v._guarded = prev


def _forward_kinematics(skeleton: SkeletonSpec, root_xy, angles) -> np.ndarray:
    order = skeleton.topological_order()
    xy = np.zeros((skeleton.joint_count, 2), dtype=np.float64)
    xy[order[0]] = root_xy
    for j in order[1:]:
        p = skeleton.parents[j]
        xy[j] = xy[p] + skeleton.lengths[j] * np.array(
            [np.cos(angles[j]), np.sin(angles[j])])
    return xy


def _render_frame(skeleton: SkeletonSpec, xy, background) -> np.ndarray:
    height, width = background.shape
    grid_y, grid_x = np.meshgrid(np.arange(height, dtype=np.float64),
                                 np.arange(width, dtype=np.float64),
                                 indexing="ij")
    canvas = background.copy()
    two_sigma_sq = 2.0 * skeleton.stroke_sigma ** 2
    for j in range(skeleton.joint_count):
        p = skeleton.parents[j]
        if p == -1:
            blob = skeleton.intensities[j] * np.exp(
                -((grid_x - xy[j, 0]) ** 2 + (grid_y - xy[j, 1]) ** 2)
                / (2.0 * skeleton.root_blob_sigma ** 2))
            np.maximum(canvas, blob, out=canvas)
            continue
        p0, p1 = xy[p], xy[j]
        seg = p1 - p0
        seg_len_sq = float(seg @ seg)
        if seg_len_sq == 0.0:
            t = np.zeros_like(grid_x)
        else:
            t = ((grid_x - p0[0]) * seg[0] + (grid_y - p0[1]) * seg[1]) / seg_len_sq
            t = np.clip(t, 0.0, 1.0)
        dist_sq = ((grid_x - (p0[0] + t * seg[0])) ** 2
                   + (grid_y - (p0[1] + t * seg[1])) ** 2)
        stroke = skeleton.intensities[j] * np.exp(-dist_sq / two_sigma_sq)
        np.maximum(canvas, stroke, out=canvas)
    return np.clip(canvas, 0.0, 1.0)


def _gaussian_blur_reflect(frame: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with half-sample reflective boundaries.

    The normalized symmetric kernel under this boundary is doubly stochastic,
    so the frame's mean intensity is preserved to float rounding.
    """
    if sigma <= 0:
        return frame.copy()
    radius = max(1, int(np.ceil(3.0 * sigma)))
    taps = np.exp(-np.arange(-radius, radius + 1) ** 2 / (2.0 * sigma ** 2))
    taps /= taps.sum()

    def reflect(n, idx):
        idx = np.where(idx < 0, -idx - 1, idx)          # -1 -> 0, -2 -> 1
        idx = np.where(idx > n - 1, 2 * n - 1 - idx, idx)
        return idx

    out = frame
    for axis in (0, 1):
        n = out.shape[axis]
        base = np.arange(n)
        acc = np.zeros_like(out)
        for k, w in zip(range(-radius, radius + 1), taps):
            acc += w * np.take(out, reflect(n, base + k), axis=axis)
        out = acc
    return out


def generate_video(skeleton: SkeletonSpec, motion: MotionParams,
                   frame_count: int = DEFAULT_FRAMES,
                   height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH,
                   label_interval: int = DEFAULT_LABEL_INTERVAL) -> VideoSample:
    """Deterministic video for (skeleton, motion.seed): forward kinematics
    under sampled velocities, rendered per frame, labeled every k-th frame."""
    require(frame_count >= 1, f"frame_count must be >= 1, got {frame_count}")
    require(label_interval >= 1,
            f"label_interval must be >= 1, got {label_interval}")
    margin = skeleton.chain_reach() + 3.0
    require(2 * margin < min(height, width),
            f"skeleton reach {skeleton.chain_reach():.1f}px does not fit a "
            f"{height}x{width} frame")
    rng = spawn_rng(motion.seed, "video")

    lo_x, hi_x = margin, width - 1 - margin
    lo_y, hi_y = margin, height - 1 - margin
    root = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
    speed = rng.uniform(*motion.root_speed)
    direction = rng.uniform(0, 2 * np.pi)
    velocity = speed * np.array([np.cos(direction), np.sin(direction)])

    j = skeleton.joint_count
    angles = np.array(skeleton.base_angles)
    angles = angles + rng.uniform(-0.5, 0.5, size=j) * np.array(skeleton.swing)
    omega = (rng.uniform(*motion.angular_speed, size=j)
             * rng.choice([-1.0, 1.0], size=j))

    background = rng.uniform(0.0, motion.background_amplitude,
                             size=(height, width))

    frames = []
    poses = []
    degraded: list[tuple] = []
    for t in range(frame_count):
        xy = _forward_kinematics(skeleton, root, angles)
        frame = _render_frame(skeleton, xy, background)
        if motion.blur_sigma[1] > 0:
            sigma = rng.uniform(*motion.blur_sigma)
            frame = _gaussian_blur_reflect(frame, sigma)
            degraded.append((t, "blur", float(sigma)))
        if motion.occlusion_probability > 0 and (
                rng.uniform() < motion.occlusion_probability):
            target = int(rng.integers(0, j))
            frame = _occlude(frame, xy[target], half_size=3, rng=rng)
            degraded.append((t, "occlusion", 3.0))
        frames.append(frame[None].copy())
        poses.append(Pose(xy.copy(), np.ones(j, dtype=bool)))

        # advance state, bouncing the root off the safe box
        root = root + velocity
        for axis, (lo, hi) in enumerate(((lo_x, hi_x), (lo_y, hi_y))):
            if root[axis] < lo:
                root[axis] = 2 * lo - root[axis]
                velocity[axis] = -velocity[axis]
            elif root[axis] > hi:
                root[axis] = 2 * hi - root[axis]
                velocity[axis] = -velocity[axis]
        base = np.array(skeleton.base_angles)
        swing = np.array(skeleton.swing)
        angles = angles + omega
        low, high = base - swing, base + swing
        under = angles < low
        over = angles > high
        angles[under] = 2 * low[under] - angles[under]
        omega[under] = -omega[under]
        angles[over] = 2 * high[over] - angles[over]
        omega[over] = -omega[over]

    labeled = np.zeros(frame_count, dtype=bool)
    labeled[::label_interval] = True
    return VideoSample(frames, labeled, motion.seed, skeleton.joint_names,
                       skeleton.torso_length, skeleton.flip_pairs,
                       degraded=degraded, _gt_poses=poses)


def _occlude(frame: np.ndarray, center_xy, half_size: int,
             rng: np.random.Generator) -> np.ndarray:
    height, width = frame.shape
    cx = int(round(center_xy[0] + rng.uniform(-1, 1)))
    cy = int(round(center_xy[1] + rng.uniform(-1, 1)))
    y0, y1 = max(0, cy - half_size), min(height, cy + half_size + 1)
    x0, x1 = max(0, cx - half_size), min(width, cx + half_size + 1)
    out = frame.copy()
    out[y0:y1, x0:x1] = 0.5
    return out


def apply_degradation(video: VideoSample, frame_indices, mode: str,
                      magnitude: float, seed: int = 0) -> VideoSample:
    """Blur or occlude chosen frames; ground truth stays defined."""
    require(mode in ("blur", "occlusion"),
            f"unknown degradation mode {mode!r}")
    out = video.shallow_copy()
    rng = spawn_rng(seed, "degrade", video.seed)
    for t in frame_indices:
        require(0 <= t < video.frame_count,
                f"frame index {t} outside [0, {video.frame_count})")
        frame = out.frames[t][0]
        if mode == "blur":
            frame = _gaussian_blur_reflect(frame, magnitude)
        else:
            pose = out._gt_poses[t]
            joint = int(rng.integers(0, pose.joint_count))
            frame = _occlude(frame, pose.xy[joint],
                             half_size=max(1, int(round(magnitude))), rng=rng)
        out.frames[t] = frame[None].copy()
        out.degraded.append((int(t), mode, float(magnitude)))
    return out


def split_dataset(n_videos: int, fractions, seed: int,
                  skeleton: SkeletonSpec | None = None,
                  motion: MotionParams | None = None,
                  frame_count: int = DEFAULT_FRAMES,
                  height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH,
                  label_interval: int = DEFAULT_LABEL_INTERVAL):
    """Disjoint seeded splits: video i draws its own seed from (seed, i)."""
    skeleton = skeleton or default_skeleton()
    motion = motion or MotionParams()
    fractions = list(fractions)
    require(abs(sum(fractions) - 1.0) < 1e-9,
            f"split fractions must sum to 1, got {sum(fractions)}")
    sizes = [int(round(f * n_videos)) for f in fractions]
    sizes[0] += n_videos - sum(sizes)
    require(all(s >= 1 for s, f in zip(sizes, fractions) if f > 0)
            and sizes[0] >= 1,
            f"{n_videos} videos are too few for fractions {fractions}")
    video_seeds = [int(spawn_rng(seed, "video-seed", i).integers(0, 2 ** 31))
                   for i in range(n_videos)]
    require(len(set(video_seeds)) == n_videos,
            "video seed collision; choose a different root seed")
    splits = []
    start = 0
    for size in sizes:
        chunk = []
        for vseed in video_seeds[start:start + size]:
            chunk.append(generate_video(skeleton, replace(motion, seed=vseed),
                                        frame_count, height, width,
                                        label_interval))
        splits.append(chunk)
        start += size
    return tuple(splits)


# ---------------------------------------------------------------------------
# dataset directory format


def save_dataset(videos, root_dir, label_interval: int, seed: int,
                 skeleton: SkeletonSpec | None = None) -> None:
    """One directory per video: frames as binary PGMs plus one annotation
    file with lines frame_idx,joint_id,x,y,visible,labeled."""
    skeleton = skeleton or default_skeleton()
    root = Path(root_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, video in enumerate(videos):
        name = f"video_{i:04d}"
        vdir = root / name
        vdir.mkdir(exist_ok=True)
        for t, frame in enumerate(video.frames):
            write_pgm(vdir / f"frame_{t:04d}.pgm", frame[0])
        lines = []
        for t in range(video.frame_count):
            pose = video.gt_pose(t)
            for j in range(pose.joint_count):
                lines.append(f"{t},{j},{float(pose.xy[j, 0])!r},"
                             f"{float(pose.xy[j, 1])!r},"
                             f"{int(pose.visible[j])},"
                             f"{int(video.labeled_mask[t])}")
        (vdir / "annotations.csv").write_text("\n".join(lines) + "\n")
        entries.append({"dir": name, "seed": int(video.seed),
                        "frames": video.frame_count})
    sample = videos[0]
    manifest = {
        "format": "heatwarp-dataset-v1",
        "joints": len(sample.joint_names),
        "joint_names": list(sample.joint_names),
        "height": sample.frames[0].shape[1],
        "width": sample.frames[0].shape[2],
        "label_interval": int(label_interval),
        "seed": int(seed),
        "reference_scale": float(sample.reference_scale),
        "flip_pairs": [list(pair) for pair in sample.flip_pairs],
        "videos": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(root_dir):
    """Inverse of save_dataset; returns (videos, manifest dict)."""
    root = Path(root_dir)
    manifest_path = root / "manifest.json"
    require(manifest_path.exists(), f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    require(manifest.get("format") == "heatwarp-dataset-v1",
            f"unsupported dataset format {manifest.get('format')!r}")
    videos = []
    for entry in manifest["videos"]:
        vdir = root / entry["dir"]
        frame_count = entry["frames"]
        frames = [read_pgm(vdir / f"frame_{t:04d}.pgm")[None]
                  for t in range(frame_count)]
        joints = manifest["joints"]
        xy = np.zeros((frame_count, joints, 2))
        visible = np.zeros((frame_count, joints), dtype=bool)
        labeled = np.zeros(frame_count, dtype=bool)
        for line in (vdir / "annotations.csv").read_text().splitlines():
            if not line.strip():
                continue
            t_s, j_s, x_s, y_s, vis_s, lab_s = line.split(",")
            t, j = int(t_s), int(j_s)
            xy[t, j] = (float(x_s), float(y_s))
            visible[t, j] = bool(int(vis_s))
            if int(lab_s):
                labeled[t] = True
        poses = [Pose(xy[t], visible[t]) for t in range(frame_count)]
        flip_pairs = tuple(tuple(p) for p in manifest.get("flip_pairs", ()))
        videos.append(VideoSample(frames, labeled, int(entry["seed"]),
                                  tuple(manifest["joint_names"]),
                                  float(manifest["reference_scale"]),
                                  flip_pairs, _gt_poses=poses))
    return videos, manifest
