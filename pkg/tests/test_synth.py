import numpy as np
import pytest

from heatwarp.synth import (MotionParams, apply_degradation,
                            default_skeleton, generate_video,
                            guard_ground_truth, load_dataset, save_dataset,
                            split_dataset)
from heatwarp.util import ContractError


def small_video(seed=0, frames=29, interval=7, **motion_kwargs):
    return generate_video(default_skeleton(),
                          MotionParams(seed=seed, **motion_kwargs),
                          frame_count=frames, label_interval=interval)


class TestGenerateVideo:
    def test_same_seed_bitwise_identical(self):
        a = small_video(seed=11)
        b = small_video(seed=11)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa, fb)
        for t in range(a.frame_count):
            np.testing.assert_array_equal(a.gt_pose(t).xy, b.gt_pose(t).xy)

    def test_different_seed_differs(self):
        a = small_video(seed=1)
        b = small_video(seed=2)
        assert any((fa != fb).any() for fa, fb in zip(a.frames, b.frames))

    def test_label_indices_every_seventh(self):
        video = small_video(seed=3, frames=29, interval=7)
        assert video.manual_indices() == [0, 7, 14, 21, 28]

    def test_zero_velocity_static(self):
        video = small_video(seed=4, root_speed=(0.0, 0.0),
                            angular_speed=(0.0, 0.0))
        for frame in video.frames[1:]:
            np.testing.assert_array_equal(frame, video.frames[0])
        for t in range(1, video.frame_count):
            np.testing.assert_array_equal(video.gt_pose(t).xy,
                                          video.gt_pose(0).xy)

    def test_all_joints_in_bounds(self):
        for seed in range(5):
            video = small_video(seed=seed)
            h, w = video.frames[0].shape[1:]
            for t in range(video.frame_count):
                xy = video.gt_pose(t).xy
                assert xy[:, 0].min() >= 0 and xy[:, 0].max() <= w - 1
                assert xy[:, 1].min() >= 0 and xy[:, 1].max() <= h - 1

    def test_kinematic_displacement_bound(self):
        skeleton = default_skeleton()
        motion = MotionParams(seed=6)
        video = generate_video(skeleton, motion)
        bound = motion.displacement_bound(skeleton) + 1e-9
        for t in range(1, video.frame_count):
            step = np.linalg.norm(video.gt_pose(t).xy - video.gt_pose(t - 1).xy,
                                  axis=1)
            assert step.max() <= bound

    def test_skeleton_too_large_rejected(self):
        with pytest.raises(ContractError, match="does not fit"):
            generate_video(default_skeleton(), MotionParams(seed=0),
                           height=32, width=32)

    def test_frames_normalized(self):
        video = small_video(seed=7)
        for frame in video.frames:
            assert frame.min() >= 0.0 and frame.max() <= 1.0


class TestGroundTruthGuard:
    def test_guard_blocks_unlabeled_access(self):
        video = small_video(seed=8)
        with guard_ground_truth([video]):
            video.gt_pose(0)  # labeled, allowed
            with pytest.raises(ContractError, match="guarded"):
                video.gt_pose(1)
        video.gt_pose(1)  # guard lifted

    def test_label_pose_requires_label(self):
        video = small_video(seed=9)
        video.label_pose(0)
        with pytest.raises(ContractError, match="no label"):
            video.label_pose(2)


class TestApplyDegradation:
    def test_zero_blur_unchanged(self):
        video = small_video(seed=10)
        out = apply_degradation(video, [1, 3], "blur", 0.0)
        np.testing.assert_array_equal(out.frames[1], video.frames[1])

    def test_blur_preserves_mean_intensity(self):
        video = small_video(seed=11)
        out = apply_degradation(video, [2], "blur", 1.5)
        assert abs(out.frames[2].mean() - video.frames[2].mean()) < 1e-6

    def test_blur_actually_blurs(self):
        video = small_video(seed=12)
        out = apply_degradation(video, [0], "blur", 2.0)
        assert out.frames[0].std() < video.frames[0].std()

    def test_occlusion_sets_constant_rectangle(self):
        video = small_video(seed=13)
        out = apply_degradation(video, [4], "occlusion", 3, seed=5)
        diff = out.frames[4][0] != video.frames[4][0]
        assert diff.any()
        assert (out.frames[4][0][diff] == 0.5).all()
        # ground truth unchanged
        np.testing.assert_array_equal(out.gt_pose(4).xy, video.gt_pose(4).xy)

    def test_unknown_mode_rejected(self):
        video = small_video(seed=14)
        with pytest.raises(ContractError, match="mode"):
            apply_degradation(video, [0], "sepia", 1.0)

    def test_input_video_untouched(self):
        video = small_video(seed=15)
        before = [f.copy() for f in video.frames]
        apply_degradation(video, list(range(video.frame_count)), "blur", 2.0)
        for f0, f1 in zip(before, video.frames):
            np.testing.assert_array_equal(f0, f1)


class TestSplitDataset:
    def test_sizes(self):
        train, val, test = split_dataset(50, (0.8, 0.1, 0.1), seed=0,
                                         frame_count=2)
        assert (len(train), len(val), len(test)) == (40, 5, 5)

    def test_deterministic(self):
        a = split_dataset(6, (0.5, 0.5), seed=1, frame_count=2)
        b = split_dataset(6, (0.5, 0.5), seed=1, frame_count=2)
        for split_a, split_b in zip(a, b):
            for va, vb in zip(split_a, split_b):
                np.testing.assert_array_equal(va.frames[0], vb.frames[0])

    def test_disjoint_seeds_cover_all(self):
        splits = split_dataset(10, (0.6, 0.2, 0.2), seed=2, frame_count=2)
        seeds = [v.seed for split in splits for v in split]
        assert len(seeds) == 10
        assert len(set(seeds)) == 10

    def test_too_few_videos_rejected(self):
        with pytest.raises(ContractError, match="too few"):
            split_dataset(3, (0.9, 0.05, 0.05), seed=3, frame_count=2)

    def test_bad_fractions_rejected(self):
        with pytest.raises(ContractError, match="sum to 1"):
            split_dataset(10, (0.5, 0.4), seed=4, frame_count=2)


class TestDatasetIO:
    def test_round_trip_poses_exact(self, tmp_path):
        videos = [small_video(seed=s, frames=5, interval=2) for s in (21, 22)]
        save_dataset(videos, tmp_path / "data", label_interval=2, seed=99)
        loaded, manifest = load_dataset(tmp_path / "data")
        assert manifest["label_interval"] == 2
        assert manifest["seed"] == 99
        assert len(loaded) == 2
        for orig, back in zip(videos, loaded):
            np.testing.assert_array_equal(orig.labeled_mask, back.labeled_mask)
            for t in range(orig.frame_count):
                np.testing.assert_array_equal(orig.gt_pose(t).xy,
                                              back.gt_pose(t).xy)

    def test_round_trip_frames_quantized(self, tmp_path):
        videos = [small_video(seed=23, frames=3)]
        save_dataset(videos, tmp_path / "data", label_interval=7, seed=0)
        loaded, _ = load_dataset(tmp_path / "data")
        # 8-bit storage: within one gray level
        err = np.abs(loaded[0].frames[0] - videos[0].frames[0]).max()
        assert err <= 0.5 / 255.0 + 1e-12

    def test_save_load_save_is_stable(self, tmp_path):
        videos = [small_video(seed=24, frames=3)]
        save_dataset(videos, tmp_path / "a", label_interval=7, seed=0)
        loaded, _ = load_dataset(tmp_path / "a")
        save_dataset(loaded, tmp_path / "b", label_interval=7, seed=0)
        a = (tmp_path / "a" / "video_0000" / "frame_0000.pgm").read_bytes()
        b = (tmp_path / "b" / "video_0000" / "frame_0000.pgm").read_bytes()
        assert a == b

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(ContractError, match="manifest"):
            load_dataset(tmp_path)
