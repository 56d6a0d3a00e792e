import numpy as np
import pytest

from heatwarp.heatmaps import Pose, mse_loss, render_gaussian
from heatwarp.backbone import backbone_forward
from heatwarp.synth import MotionParams, SkeletonSpec, generate_video
from heatwarp.train import (AdamState, AugmentTransform, TrainConfig,
                            TrainingError, adam_step, apply_augment, augment,
                            backbone_from_checkpoint, lr_schedule,
                            merge_pseudo_labels, sample_augment,
                            train_backbone, train_warper,
                            warper_from_checkpoint)
from heatwarp.util import ContractError
from heatwarp.warper import compute_difference, warp_heatmap

from oracles import adam_scalar_reference


def tiny_skeleton():
    """3-joint chain that fits a 32x32 frame, for fast training tests."""
    return SkeletonSpec(
        joint_names=("root", "mid", "tip"),
        parents=(-1, 0, 1),
        lengths=(0.0, 6.0, 5.0),
        base_angles=(0.0, np.pi / 2 - 0.3, np.pi / 2 + 0.2),
        swing=(0.0, 0.4, 0.5),
        intensities=(1.0, 0.6, 0.85),
        flip_pairs=(),
    )


def tiny_videos(n=2, frames=7, interval=3, seed=0, **motion_kwargs):
    return [generate_video(tiny_skeleton(),
                           MotionParams(seed=seed + i, **motion_kwargs),
                           frame_count=frames, height=32, width=32,
                           label_interval=interval)
            for i in range(n)]


def tiny_config(**overrides):
    base = dict(base_lr=2e-3, epochs=2, batch_size=2, seed=0, augment=False,
                joints=3, backbone_width=6, backbone_depth=0,
                residual_blocks=1, residual_width=4, dilations=(1, 3),
                precision="float64", freeze_backbone=True)
    base.update(overrides)
    return TrainConfig(**base)


class TestAdam:
    def test_zero_gradient_fresh_state_no_change(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        state = AdamState.for_params(params)
        before = params["w"].copy()
        adam_step(params, {"w": np.zeros(3)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"], before)
        assert state.step == 1

    def test_zero_lr_bitwise_unchanged(self):
        rng = np.random.default_rng(0)
        params = {"w": rng.standard_normal(5)}
        state = AdamState.for_params(params)
        before = params["w"].copy()
        adam_step(params, {"w": rng.standard_normal(5)}, state, lr=0.0)
        assert (params["w"] == before).all()

    def test_first_step_approx_signed_lr(self):
        params = {"w": np.zeros(4)}
        state = AdamState.for_params(params)
        grad = np.array([0.5, -2.0, 1e-3, -1e-3])
        adam_step(params, {"w": grad}, state, lr=0.01)
        np.testing.assert_allclose(params["w"], -0.01 * np.sign(grad),
                                   rtol=1e-4)

    def test_three_steps_match_scalar_oracle(self):
        grads = [0.4, -1.2, 0.7]
        params = {"w": np.array([0.3])}
        state = AdamState.for_params(params)
        for g in grads:
            adam_step(params, {"w": np.array([g])}, state, lr=0.05)
        expected = adam_scalar_reference(0.3, grads, lr=0.05)
        assert abs(params["w"][0] - expected) < 1e-12

    def test_nonfinite_gradient_aborts_naming_parameter(self):
        params = {"good": np.zeros(2), "bad": np.zeros(2)}
        state = AdamState.for_params(params)
        grads = {"good": np.ones(2), "bad": np.array([1.0, np.nan])}
        with pytest.raises(TrainingError, match="bad"):
            adam_step(params, grads, state, lr=0.1)
        # aborted before mutating anything
        assert not params["good"].any()
        assert state.step == 0


class TestLrSchedule:
    def test_paper_defaults(self):
        config = TrainConfig()      # 20 epochs, milestones 10 and 15
        assert lr_schedule(0, config) == pytest.approx(1e-4)
        assert lr_schedule(9, config) == pytest.approx(1e-4)
        assert lr_schedule(10, config) == pytest.approx(1e-5)
        assert lr_schedule(15, config) == pytest.approx(1e-6)

    def test_milestones_scale_with_epochs(self):
        config = TrainConfig(epochs=10)
        assert config.resolved_milestones() == (5, 7)

    def test_explicit_milestones(self):
        config = TrainConfig(epochs=6, milestones=(2, 4))
        assert lr_schedule(3, config) == pytest.approx(1e-5)


class TestAugment:
    def test_identity_transform_unchanged(self):
        rng = np.random.default_rng(1)
        frame = rng.uniform(0, 1, (1, 16, 16))
        pose = Pose(np.array([[4.0, 5.0]]), np.array([True]))
        out_frame, out_pose = apply_augment(frame, pose, AugmentTransform())
        np.testing.assert_array_equal(out_frame, frame)
        np.testing.assert_array_equal(out_pose.xy, pose.xy)

    def test_flip_twice_restores_pose(self):
        pose = Pose(np.array([[4.25, 6.0], [10.5, 3.0]]),
                    np.array([True, True]))
        frame = np.zeros((1, 16, 16))
        flip = AugmentTransform(flip=True)
        pairs = ((0, 1),)
        f1, p1 = apply_augment(frame, pose, flip, pairs)
        assert not np.allclose(p1.xy, pose.xy)
        _, p2 = apply_augment(f1, p1, flip, pairs)
        np.testing.assert_array_equal(p2.xy, pose.xy)
        np.testing.assert_array_equal(p2.visible, pose.visible)

    def test_flip_swaps_labels(self):
        pose = Pose(np.array([[4.0, 8.0], [10.0, 8.0]]),
                    np.array([True, False]))
        _, flipped = apply_augment(np.zeros((1, 16, 16)), pose,
                                   AugmentTransform(flip=True), ((0, 1),))
        # joint 0 now carries what was joint 1 (mirrored)
        assert flipped.xy[0, 0] == pytest.approx(15.0 - 10.0)
        assert not flipped.visible[0]
        assert flipped.visible[1]

    def test_rotation_quarter_turn_coordinates_and_image(self):
        """Joint at center + (r, 0) lands at center + (0, r), and the
        rerendered image peak follows."""
        h = w = 33
        center = (w - 1) / 2.0
        r = 6.0
        pose = Pose(np.array([[center + r, center]]), np.array([True]))
        heat = render_gaussian(pose, 2.0, h, w)
        transform = AugmentTransform(rotation=np.pi / 2, scale=1.0)
        rotated, rotated_pose = apply_augment(heat, pose, transform)
        assert rotated_pose.xy[0, 0] == pytest.approx(center, abs=1e-9)
        assert rotated_pose.xy[0, 1] == pytest.approx(center + r, abs=1e-9)
        peak = np.unravel_index(np.argmax(rotated[0]), rotated[0].shape)
        assert peak[0] == pytest.approx(center + r, abs=1.0)
        assert peak[1] == pytest.approx(center, abs=1.0)

    def test_joint_leaving_frame_marked_invisible(self):
        pose = Pose(np.array([[15.0, 8.0]]), np.array([True]))
        _, out = apply_augment(np.zeros((1, 16, 16)), pose,
                               AugmentTransform(scale=1.3))
        assert not out.visible[0]

    def test_degenerate_scale_rejected(self):
        with pytest.raises(ContractError, match="scale"):
            apply_augment(np.zeros((1, 16, 16)),
                          Pose(np.zeros((1, 2)), np.array([True])),
                          AugmentTransform(scale=0.0))

    def test_sampling_respects_config(self):
        rng = np.random.default_rng(2)
        config = tiny_config(augment=True, rotation_degrees=10.0,
                             scale_range=(0.9, 1.1), flip_probability=0.0)
        for _ in range(20):
            tf = sample_augment(config, rng)
            assert abs(tf.rotation) <= np.deg2rad(10.0) + 1e-12
            assert 0.9 <= tf.scale <= 1.1
            assert not tf.flip


class TestTrainBackbone:
    def test_seeded_runs_reproduce_bitwise(self):
        videos = tiny_videos()
        config = tiny_config()
        a = train_backbone(videos, config)
        b = train_backbone(videos, config)
        assert a.history == b.history
        for key in a.tensors:
            np.testing.assert_array_equal(a.tensors[key], b.tensors[key])

    def test_loss_decreases_from_first_epoch(self):
        videos = tiny_videos(n=2, frames=7)
        config = tiny_config(epochs=6, backbone_width=8, backbone_depth=1)
        ckpt = train_backbone(videos, config)
        assert ckpt.history[-1]["train_loss"] <= ckpt.history[0]["train_loss"]

    def test_single_video_overfit(self):
        videos = tiny_videos(n=1, frames=4, interval=4)  # one labeled frame
        config = tiny_config(epochs=500, batch_size=1, base_lr=3e-3,
                             backbone_width=8, backbone_depth=1,
                             milestones=(380, 450))
        ckpt = train_backbone(videos, config)
        assert ckpt.history[-1]["train_loss"] < 1e-3

    def test_guard_active_during_training(self):
        videos = tiny_videos()
        seen = {}

        original = backbone_forward

        def spy(frame, params):
            if "checked" not in seen:
                seen["checked"] = True
                with pytest.raises(ContractError, match="guarded"):
                    videos[0].gt_pose(1)
            return original(frame, params)

        import heatwarp.train as train_module
        train_module.backbone_forward, backup = spy, train_module.backbone_forward
        try:
            train_backbone(videos, tiny_config())
        finally:
            train_module.backbone_forward = backup
        assert seen.get("checked")
        videos[0].gt_pose(1)        # guard lifted afterwards

    def test_no_labels_rejected(self):
        videos = tiny_videos(n=1, frames=4, interval=4)
        videos[0].labeled_mask[:] = False
        with pytest.raises(ContractError, match="labeled"):
            train_backbone(videos, tiny_config())


class TestTrainWarper:
    def test_identity_init_loss_equals_backbone_pair_loss(self):
        """With the head frozen at its identity initialization the warped
        prediction is exactly f_source, so pair loss equals the pseudo-label
        control."""
        videos = tiny_videos()
        backbone_ckpt = train_backbone(videos, tiny_config(epochs=4))
        config = tiny_config(epochs=1, delta_range=0)
        warper_ckpt = train_warper(videos, backbone_ckpt, config)
        params = backbone_from_checkpoint(backbone_ckpt, dtype=np.float64)
        wparams = warper_from_checkpoint(warper_ckpt, dtype=np.float64)
        from heatwarp.warper import init_warper
        identity = init_warper(config.warper_config(), seed=config.seed,
                               dtype=np.float64)
        video = videos[0]
        t = video.manual_indices()[0]
        f, _ = backbone_forward(video.frames[t], params)
        target = render_gaussian(video.gt_pose(t), config.sigma, 32, 32)
        out, _ = warp_heatmap(f, compute_difference(f, f), identity)
        direct = mse_loss(f, target, video.gt_pose(t).visible)
        warped = mse_loss(out.g, target, video.gt_pose(t).visible)
        assert warped.value == pytest.approx(direct.value, rel=1e-10)

    def test_self_warp_loss_beats_identity_control_within_two_epochs(self):
        videos = tiny_videos(n=2, frames=7, seed=5)
        backbone_ckpt = train_backbone(
            videos, tiny_config(epochs=10, backbone_width=8,
                                backbone_depth=1))
        config = tiny_config(epochs=2, delta_range=0, base_lr=5e-3,
                             backbone_width=8, backbone_depth=1)
        params = backbone_from_checkpoint(backbone_ckpt, dtype=np.float64)
        control = []
        for video in videos:
            for t in video.manual_indices():
                f, _ = backbone_forward(video.frames[t], params)
                target = render_gaussian(video.gt_pose(t), config.sigma,
                                         32, 32)
                control.append(mse_loss(f, target,
                                        video.gt_pose(t).visible).value)
        warper_ckpt = train_warper(videos, backbone_ckpt, config)
        assert warper_ckpt.history[-1]["train_loss"] < np.mean(control)

    def test_reproducible(self):
        videos = tiny_videos()
        backbone_ckpt = train_backbone(videos, tiny_config())
        a = train_warper(videos, backbone_ckpt, tiny_config())
        b = train_warper(videos, backbone_ckpt, tiny_config())
        assert a.history == b.history
        for key in a.tensors:
            np.testing.assert_array_equal(a.tensors[key], b.tensors[key])

    def test_finetune_updates_backbone(self):
        videos = tiny_videos()
        backbone_ckpt = train_backbone(videos, tiny_config())
        ckpt = train_warper(videos, backbone_ckpt,
                            tiny_config(freeze_backbone=False))
        changed = any(
            not np.array_equal(ckpt.tensors[k], backbone_ckpt.tensors[k])
            for k in backbone_ckpt.tensors)
        assert changed

    def test_frozen_backbone_unchanged(self):
        videos = tiny_videos()
        backbone_ckpt = train_backbone(videos, tiny_config())
        ckpt = train_warper(videos, backbone_ckpt,
                            tiny_config(freeze_backbone=True))
        for key in backbone_ckpt.tensors:
            np.testing.assert_array_equal(ckpt.tensors[key],
                                          backbone_ckpt.tensors[key])


class TestMergePseudoLabels:
    def _full_coverage_video(self):
        from heatwarp.synth import default_skeleton
        video = generate_video(default_skeleton(), MotionParams(seed=3),
                               frame_count=29, label_interval=7)
        return video

    def test_radius_three_on_k7_labels_every_frame(self):
        video = self._full_coverage_video()
        propagated = {0: {}}
        for t in range(video.frame_count):
            if not video.labeled_mask[t]:
                propagated[0][t] = video.gt_pose(t).copy()
        merged = merge_pseudo_labels([video], propagated, 0.2)
        assert (merged[0].labeled_mask | merged[0].pseudo_mask).all()
        assert int(merged[0].pseudo_mask.sum()) == 24
        assert merged[0].label_indices() == list(range(29))

    def test_manual_label_wins_collision(self):
        video = self._full_coverage_video()
        fake = video.gt_pose(0).copy()
        fake.xy += 5.0
        merged = merge_pseudo_labels([video], {0: {0: fake, 1: fake}}, 0.2)
        assert not merged[0].pseudo_mask[0]
        np.testing.assert_array_equal(merged[0].label_pose(0).xy,
                                      video.gt_pose(0).xy)
        assert merged[0].pseudo_mask[1]

    def test_empty_propagation_unchanged(self):
        video = self._full_coverage_video()
        merged = merge_pseudo_labels([video], {}, 0.2)
        np.testing.assert_array_equal(merged[0].pseudo_mask,
                                      np.zeros(29, dtype=bool))

    def test_confidence_threshold_marks_invisible(self):
        video = self._full_coverage_video()
        pose = video.gt_pose(1).copy()
        pose.confidence = np.full(pose.joint_count, 0.5)
        pose.confidence[2] = 0.1
        merged = merge_pseudo_labels([video], {0: {1: pose}}, threshold := 0.2)
        stored = merged[0].label_pose(1)
        assert not stored.visible[2]
        assert stored.visible[0]

    def test_original_videos_untouched(self):
        video = self._full_coverage_video()
        pose = video.gt_pose(1).copy()
        merge_pseudo_labels([video], {0: {1: pose}}, 0.2)
        assert not video.pseudo_mask.any()
