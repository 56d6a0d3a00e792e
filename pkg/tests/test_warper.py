import numpy as np
import pytest

from heatwarp.backbone import BackboneConfig, init_backbone, backbone_forward
from heatwarp.deform import deform_conv_forward
from heatwarp.heatmaps import Pose, decode_peaks, render_gaussian
from heatwarp.tensor import conv2d_forward, grad_check
from heatwarp.util import ContractError
from heatwarp.warper import (WarperConfig, WarperParams, compute_difference,
                             identity_warp_kernel, init_warper,
                             propagate_annotation, residual_stack_forward,
                             temporal_aggregate, warp_heatmap, warper_backward)


def small_config(dilations=(1, 3)):
    return WarperConfig(joints=2, residual_blocks=2, residual_width=4,
                        dilations=dilations)


def identity_params(config, seed=0):
    """Zeroed offset heads plus unscaled center-one warp kernels."""
    params = init_warper(config, seed=seed)
    params.warp_kernels = [
        (identity_warp_kernel(config.warp_spec(d)), np.zeros(config.joints))
        for d in config.dilations]
    return params


def randomized_params(config, seed=0, offset_scale=0.01):
    """Random offset heads and warp kernels.

    Bilinear gradients are one-sided on the integer lattice, so offset heads
    get small weights plus mid-cell biases: the emitted offsets then sit well
    inside a bilinear cell for any reasonable input.
    """
    rng = np.random.default_rng(seed)
    params = init_warper(config, seed=seed)
    heads = []
    for d in config.dilations:
        spec = config.offset_spec(d)
        bias = (rng.uniform(0.3, 0.45, size=spec.out_channels)
                * rng.choice([-1.0, 1.0], size=spec.out_channels))
        heads.append((rng.standard_normal(spec.weight_shape()) * offset_scale,
                      bias))
    params.offset_heads = heads
    params.warp_kernels = [
        (rng.standard_normal(config.warp_spec(d).weight_shape()),
         rng.standard_normal(config.joints))
        for d in config.dilations]
    return params


class TestComputeDifference:
    def test_self_difference_zero(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((3, 6, 6))
        assert not compute_difference(f, f.copy()).any()

    def test_antisymmetry(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 6, 6))
        b = rng.standard_normal((3, 6, 6))
        np.testing.assert_array_equal(compute_difference(a, b),
                                      -compute_difference(b, a))

    def test_matches_elementwise_subtraction(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((2, 4, 4))
        b = rng.standard_normal((2, 4, 4))
        np.testing.assert_array_equal(compute_difference(a, b), a - b)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError, match="shapes differ"):
            compute_difference(np.zeros((2, 4, 4)), np.zeros((2, 5, 4)))


class TestResidualStack:
    def test_zero_weights_pass_features_through(self):
        config = small_config()
        params = init_warper(config, seed=3)
        params.residual = [tuple(np.zeros_like(t) for t in block)
                           for block in params.residual]
        psi = np.random.default_rng(4).standard_normal((2, 8, 8))
        phi, _ = residual_stack_forward(psi, params)
        assert phi.shape == (4, 8, 8)
        np.testing.assert_array_equal(phi[:2], psi)
        assert not phi[2:].any()

    def test_spatial_size_preserved(self):
        config = small_config()
        params = init_warper(config, seed=5)
        psi = np.random.default_rng(6).standard_normal((2, 9, 7))
        phi, _ = residual_stack_forward(psi, params)
        assert phi.shape == (4, 9, 7)


class TestWarpHeatmap:
    def test_identity_composition(self):
        """Zeroed offset heads + center-one kernels: every partial equals the
        source, so g is |dilations| times the source."""
        config = small_config(dilations=(1, 2, 3))
        params = identity_params(config, seed=7)
        rng = np.random.default_rng(8)
        f_source = rng.standard_normal((2, 10, 10))
        psi = rng.standard_normal((2, 10, 10))
        output, _ = warp_heatmap(f_source, psi, params)
        for partial in output.partial_warps:
            np.testing.assert_allclose(partial, f_source, atol=1e-12)
        np.testing.assert_allclose(output.g, 3.0 * f_source, atol=1e-12)

    def test_single_dilation_configuration_runs(self):
        config = WarperConfig(joints=2, residual_blocks=2, residual_width=4,
                              dilations=(3,))
        params = randomized_params(config, seed=9)
        rng = np.random.default_rng(10)
        output, _ = warp_heatmap(rng.standard_normal((2, 12, 12)),
                                 rng.standard_normal((2, 12, 12)), params)
        assert output.g.shape == (2, 12, 12)
        assert len(output.partial_warps) == 1

    def test_g_equals_sum_of_partials_exactly(self):
        config = small_config()
        params = randomized_params(config, seed=11)
        rng = np.random.default_rng(12)
        output, _ = warp_heatmap(rng.standard_normal((2, 8, 8)),
                                 rng.standard_normal((2, 8, 8)), params)
        total = output.partial_warps[0].copy()
        for p in output.partial_warps[1:]:
            total += p
        np.testing.assert_array_equal(output.g, total)

    def test_componentwise_oracle(self):
        """g matches independently recomposed offset heads and deformable warps."""
        config = small_config(dilations=(1, 3))
        params = randomized_params(config, seed=13)
        rng = np.random.default_rng(14)
        f_source = rng.standard_normal((2, 9, 9))
        psi = rng.standard_normal((2, 9, 9))
        output, _ = warp_heatmap(f_source, psi, params)
        phi, _ = residual_stack_forward(psi, params)
        expected = np.zeros_like(f_source)
        for i, d in enumerate(config.dilations):
            w_off, b_off = params.offset_heads[i]
            off = conv2d_forward(phi, w_off, b_off, config.offset_spec(d))
            w_k, b_k = params.warp_kernels[i]
            expected = expected + deform_conv_forward(f_source, off, w_k, b_k,
                                                      config.warp_spec(d))
        assert np.max(np.abs(output.g - expected)) < 1e-12

    def test_empty_dilations_rejected_at_config(self):
        with pytest.raises(ContractError, match="empty"):
            WarperConfig(joints=2, residual_width=4, dilations=())

    def test_misaligned_psi_rejected(self):
        params = identity_params(small_config(), seed=15)
        with pytest.raises(ContractError, match="aligned"):
            warp_heatmap(np.zeros((2, 8, 8)), np.zeros((2, 6, 8)), params)


class TestWarperBackward:
    def test_gradcheck_small_instance(self):
        config = WarperConfig(joints=2, residual_blocks=2, residual_width=4,
                              dilations=(1, 3))
        params = randomized_params(config, seed=16)
        rng = np.random.default_rng(17)
        f_source = rng.standard_normal((2, 12, 12))
        psi = rng.standard_normal((2, 12, 12))
        projection = rng.standard_normal((2, 12, 12))

        # gradients of bilinear sampling are one-sided on the integer lattice;
        # confirm the chosen seed keeps every offset off it
        output, _ = warp_heatmap(f_source, psi, params)
        for off in output.offset_fields:
            assert np.abs(off - np.round(off)).min() > 1e-3

        flat_names, flat_values = [], []
        for b, block in enumerate(params.residual):
            for part, arr in zip(("conv1.weight", "conv1.bias",
                                  "conv2.weight", "conv2.bias"), block):
                flat_names.append(("residual", b, part))
                flat_values.append(arr)
        for i, (w, b_) in enumerate(params.offset_heads):
            flat_names += [("offset", i, "weight"), ("offset", i, "bias")]
            flat_values += [w, b_]
        for i, (w, b_) in enumerate(params.warp_kernels):
            flat_names += [("warp", i, "weight"), ("warp", i, "bias")]
            flat_values += [w, b_]

        def rebuild(tensors):
            p = WarperParams(config)
            it = iter(tensors)
            p.residual = [tuple(next(it) for _ in range(4))
                          for _ in range(config.residual_blocks)]
            p.offset_heads = [(next(it), next(it)) for _ in config.dilations]
            p.warp_kernels = [(next(it), next(it)) for _ in config.dilations]
            return p

        def fn(f_source_, psi_, *tensors):
            p = rebuild(tensors)
            output_, cache = warp_heatmap(f_source_, psi_, p)
            grads, gf, gpsi = warper_backward(cache, p, projection)
            grad_list = [gf, gpsi]
            for block in grads.residual:
                grad_list.extend(block)
            for pair in grads.offset_heads:
                grad_list.extend(pair)
            for pair in grads.warp_kernels:
                grad_list.extend(pair)
            return float(np.sum(projection * output_.g)), tuple(grad_list)

        report = grad_check("warper", fn, [f_source, psi] + flat_values,
                            tolerance=1e-4)
        assert report.passed, str(report)

    def test_zero_upstream_zero_grads(self):
        config = small_config()
        params = randomized_params(config, seed=18)
        rng = np.random.default_rng(19)
        output, cache = warp_heatmap(rng.standard_normal((2, 8, 8)),
                                     rng.standard_normal((2, 8, 8)), params)
        grads, gf, gpsi = warper_backward(cache, params, np.zeros_like(output.g))
        assert not gf.any() and not gpsi.any()
        assert not any(t.any() for block in grads.residual for t in block)
        assert not any(t.any() for pair in grads.offset_heads for t in pair)
        assert not any(t.any() for pair in grads.warp_kernels for t in pair)

    def test_stale_cache_rejected(self):
        config = small_config()
        params = randomized_params(config, seed=20)
        other = randomized_params(config, seed=21)
        rng = np.random.default_rng(22)
        output, cache = warp_heatmap(rng.standard_normal((2, 8, 8)),
                                     rng.standard_normal((2, 8, 8)), params)
        with pytest.raises(ContractError, match="stale cache"):
            warper_backward(cache, other, output.g)


class TestPropagateAnnotation:
    def test_zero_motion_identity(self):
        """Identical frames with the identity head reproduce the annotation."""
        config = WarperConfig(joints=3, residual_blocks=2, residual_width=6,
                              dilations=(1, 2, 3, 4))
        params = identity_params(config, seed=23)
        pose = Pose(np.array([[5.0, 9.0], [12.0, 4.0], [8.0, 8.0]]),
                    np.ones(3, dtype=bool))
        y = render_gaussian(pose, sigma=2.0, height=16, width=16)
        f = np.random.default_rng(24).standard_normal((3, 16, 16))
        propagated = propagate_annotation(y, f, f.copy(), params)
        np.testing.assert_allclose(propagated, len(config.dilations) * y,
                                   atol=1e-12)
        decoded = decode_peaks(propagated, min_confidence=0.05)
        source = decode_peaks(y, min_confidence=0.05)
        np.testing.assert_array_equal(decoded.xy, source.xy)
        np.testing.assert_array_equal(decoded.xy, pose.xy)

    def test_output_channel_count(self):
        config = small_config()
        params = identity_params(config, seed=25)
        rng = np.random.default_rng(26)
        y = rng.standard_normal((2, 8, 8))
        out = propagate_annotation(y, rng.standard_normal((2, 8, 8)),
                                   rng.standard_normal((2, 8, 8)), params)
        assert out.shape == (2, 8, 8)

    def test_shares_all_parameters_with_forward_direction(self):
        """The reverse direction is the same network with swapped difference
        order; there is no direction-specific parameter."""
        config = small_config()
        params = randomized_params(config, seed=27)
        rng = np.random.default_rng(28)
        y = rng.standard_normal((2, 8, 8))
        f_labeled = rng.standard_normal((2, 8, 8))
        f_unlabeled = rng.standard_normal((2, 8, 8))
        via_op = propagate_annotation(y, f_labeled, f_unlabeled, params)
        manual, _ = warp_heatmap(y, compute_difference(f_unlabeled, f_labeled),
                                 params)
        np.testing.assert_array_equal(via_op, manual.g)


class TestTemporalAggregate:
    def _setup(self, joints=2, frames=5, size=16):
        backbone = init_backbone(
            BackboneConfig(in_channels=1, width=4, depth=1, joints=joints),
            seed=29)
        warper = randomized_params(
            WarperConfig(joints=joints, residual_blocks=2, residual_width=4,
                         dilations=(1, 3)), seed=30)
        rng = np.random.default_rng(31)
        video = [rng.uniform(0, 1, size=(1, size, size)) for _ in range(frames)]
        return video, backbone, warper

    def _single(self, video, t, delta, backbone, warper):
        f_t, _ = backbone_forward(video[t], backbone)
        n = min(max(t + delta, 0), len(video) - 1)
        f_n, _ = backbone_forward(video[n], backbone)
        out, _ = warp_heatmap(f_n, compute_difference(f_t, f_n), warper)
        return out.g

    def test_single_delta_zero(self):
        video, backbone, warper = self._setup()
        result = temporal_aggregate(video, 2, [0], backbone, warper)
        np.testing.assert_array_equal(result,
                                      self._single(video, 2, 0, backbone, warper))

    def test_sum_decomposition(self):
        video, backbone, warper = self._setup()
        result = temporal_aggregate(video, 2, [-1, 0, 1], backbone, warper)
        expected = sum(self._single(video, 2, d, backbone, warper)
                       for d in (-1, 0, 1))
        np.testing.assert_allclose(result, expected, atol=1e-12)

    def test_boundary_clamping_keeps_summand_count(self):
        video, backbone, warper = self._setup()
        result = temporal_aggregate(video, 0, [-2, -1, 0], backbone, warper)
        # clamped indices duplicate frame 0 three times
        expected = 3.0 * self._single(video, 0, 0, backbone, warper)
        np.testing.assert_allclose(result, expected, atol=1e-10)

    def test_empty_deltas_rejected(self):
        video, backbone, warper = self._setup()
        with pytest.raises(ContractError, match="delta"):
            temporal_aggregate(video, 0, [], backbone, warper)

    def test_peak_decoding_invariant_to_rescaling(self):
        video, backbone, warper = self._setup()
        result = temporal_aggregate(video, 2, [-1, 0, 1], backbone, warper)
        a = decode_peaks(result, min_confidence=0.0)
        b = decode_peaks(result * 4.5, min_confidence=0.0)
        np.testing.assert_array_equal(a.xy, b.xy)
