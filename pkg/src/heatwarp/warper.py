"""Temporal warping head: difference tensor, residual stack, dilated offset
branches, deformable warps, and their composition.

Given heatmaps for a target and a source frame, the head computes the
difference psi = f_target - f_source, refines it through a stack of residual
blocks, predicts one offset field per dilation rate, warps the source heatmap
once per branch with a deformable convolution, and sums the partial warps.
The same parameters serve training (predict the labeled frame from a
neighbor), annotation propagation (warp a ground-truth heatmap onto an
unlabeled frame) and temporal aggregation at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneParams, backbone_forward
from .deform import _tap_coordinates, deform_conv_backward, deform_conv_forward
from .tensor import (KernelSpec, conv2d_backward, conv2d_forward, relu_backward,
                     relu_forward)
from .util import as_chw, require, spawn_rng

DEFAULT_DILATIONS = (3, 6, 12, 18, 24)


@dataclass(frozen=True)
class WarperConfig:
    joints: int = 13
    residual_blocks: int = 4
    residual_width: int = 32
    dilations: tuple[int, ...] = DEFAULT_DILATIONS
    kernel: int = 3
    offset_groups: int = 1

    def __post_init__(self):
        require(len(self.dilations) >= 1, "dilation list must not be empty")
        require(all(b > a for a, b in zip(self.dilations, self.dilations[1:])),
                f"dilations must be strictly increasing, got {self.dilations}")
        require(self.residual_blocks >= 1, "need at least one residual block")
        require(self.residual_width >= self.joints,
                f"residual_width={self.residual_width} must be >= "
                f"joints={self.joints} for the channel-padded skip")

    def residual_specs(self, block: int) -> tuple[KernelSpec, KernelSpec]:
        k = self.kernel
        in_ch = self.joints if block == 0 else self.residual_width
        return (KernelSpec(self.residual_width, in_ch, k, k),
                KernelSpec(self.residual_width, self.residual_width, k, k))

    def offset_spec(self, dilation: int) -> KernelSpec:
        k = self.kernel
        out = 2 * self.offset_groups * k * k
        return KernelSpec(out, self.residual_width, k, k, dilation=dilation)

    def warp_spec(self, dilation: int) -> KernelSpec:
        k = self.kernel
        return KernelSpec(self.joints, self.joints, k, k, dilation=dilation,
                          offset_groups=self.offset_groups)


@dataclass
class WarperParams:
    """Residual stack, per-dilation offset heads, per-dilation warp kernels.

    ``residual[b]`` is (w1, b1, w2, b2); ``offset_heads[i]`` and
    ``warp_kernels[i]`` are (weights, bias) for dilation ``config.dilations[i]``.
    """

    config: WarperConfig
    residual: list[tuple] = field(default_factory=list)
    offset_heads: list[tuple] = field(default_factory=list)
    warp_kernels: list[tuple] = field(default_factory=list)

    def named(self, prefix: str = "warper") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for b, (w1, b1, w2, b2) in enumerate(self.residual):
            out[f"{prefix}.res{b:02d}.conv1.weight"] = w1
            out[f"{prefix}.res{b:02d}.conv1.bias"] = b1
            out[f"{prefix}.res{b:02d}.conv2.weight"] = w2
            out[f"{prefix}.res{b:02d}.conv2.bias"] = b2
        for i, d in enumerate(self.config.dilations):
            w, b = self.offset_heads[i]
            out[f"{prefix}.offset_d{d:02d}.weight"] = w
            out[f"{prefix}.offset_d{d:02d}.bias"] = b
        for i, d in enumerate(self.config.dilations):
            w, b = self.warp_kernels[i]
            out[f"{prefix}.warp_d{d:02d}.weight"] = w
            out[f"{prefix}.warp_d{d:02d}.bias"] = b
        return out

    def load_named(self, tensors: dict[str, np.ndarray],
                   prefix: str = "warper") -> None:
        self.residual = [
            (tensors[f"{prefix}.res{b:02d}.conv1.weight"].copy(),
             tensors[f"{prefix}.res{b:02d}.conv1.bias"].copy(),
             tensors[f"{prefix}.res{b:02d}.conv2.weight"].copy(),
             tensors[f"{prefix}.res{b:02d}.conv2.bias"].copy())
            for b in range(self.config.residual_blocks)]
        self.offset_heads = [
            (tensors[f"{prefix}.offset_d{d:02d}.weight"].copy(),
             tensors[f"{prefix}.offset_d{d:02d}.bias"].copy())
            for d in self.config.dilations]
        self.warp_kernels = [
            (tensors[f"{prefix}.warp_d{d:02d}.weight"].copy(),
             tensors[f"{prefix}.warp_d{d:02d}.bias"].copy())
            for d in self.config.dilations]

    def astype(self, dtype) -> "WarperParams":
        cast = lambda tup: tuple(a.astype(dtype) for a in tup)
        return WarperParams(self.config,
                            [cast(t) for t in self.residual],
                            [cast(t) for t in self.offset_heads],
                            [cast(t) for t in self.warp_kernels])


def identity_warp_kernel(spec: KernelSpec, scale: float = 1.0,
                         dtype=np.float64) -> np.ndarray:
    """Center-one per-channel identity kernel times ``scale``."""
    w = np.zeros(spec.weight_shape(), dtype=dtype)
    ci, cj = spec.kernel_h // 2, spec.kernel_w // 2
    for c in range(min(spec.out_channels, spec.in_channels)):
        w[c, c, ci, cj] = scale
    return w


def init_warper(config: WarperConfig, seed: int = 0,
                dtype=np.float64) -> WarperParams:
    """He init for the residual stack; zero offset heads; identity warp kernels
    scaled by 1/len(dilations), so the untrained head is the identity warp."""
    rng = spawn_rng(seed, "warper-init")
    params = WarperParams(config)
    for b in range(config.residual_blocks):
        block = []
        for spec in config.residual_specs(b):
            fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
            block.append((rng.standard_normal(spec.weight_shape())
                          * np.sqrt(2.0 / fan_in)).astype(dtype))
            block.append(np.zeros(spec.out_channels, dtype=dtype))
        params.residual.append(tuple(block))
    for d in config.dilations:
        spec = config.offset_spec(d)
        params.offset_heads.append(
            (np.zeros(spec.weight_shape(), dtype=dtype),
             np.zeros(spec.out_channels, dtype=dtype)))
    scale = 1.0 / len(config.dilations)
    for d in config.dilations:
        spec = config.warp_spec(d)
        params.warp_kernels.append(
            (identity_warp_kernel(spec, scale, dtype),
             np.zeros(spec.out_channels, dtype=dtype)))
    return params


def _pad_channels(x: np.ndarray, out_channels: int) -> np.ndarray:
    c = x.shape[0]
    if c == out_channels:
        return x
    padded = np.zeros((out_channels,) + x.shape[1:], dtype=x.dtype)
    padded[:c] = x
    return padded


def compute_difference(f_target, f_source) -> np.ndarray:
    """Elementwise f_target - f_source, the head's motion evidence."""
    f_target = as_chw(f_target, "f_target")
    f_source = as_chw(f_source, "f_source")
    require(f_target.shape == f_source.shape,
            f"heatmap shapes differ: {f_target.shape} vs {f_source.shape}")
    return f_target - f_source


def residual_stack_forward(psi, params: WarperParams):
    config = params.config
    x = psi
    block_caches = []
    for b, (w1, b1, w2, b2) in enumerate(params.residual):
        spec1, spec2 = config.residual_specs(b)
        z1 = conv2d_forward(x, w1, b1, spec1)
        a1 = relu_forward(z1)
        z2 = conv2d_forward(a1, w2, b2, spec2)
        out = _pad_channels(x, config.residual_width) + z2
        block_caches.append((x, z1, a1))
        x = out
    return x, block_caches


def residual_stack_backward(block_caches, params: WarperParams, grad_phi):
    config = params.config
    grad = grad_phi
    grads = []
    for b in range(len(params.residual) - 1, -1, -1):
        x, z1, a1 = block_caches[b]
        w1, _, w2, _ = params.residual[b]
        spec1, spec2 = config.residual_specs(b)
        grad_a1, gw2, gb2 = conv2d_backward(a1, w2, spec2, grad)
        grad_z1 = relu_backward(z1, grad_a1)
        grad_x, gw1, gb1 = conv2d_backward(x, w1, spec1, grad_z1)
        grad_x = grad_x + grad[:x.shape[0]]
        grads.append((gw1, gb1, gw2, gb2))
        grad = grad_x
    grads.reverse()
    return grads, grad


@dataclass
class WarpOutput:
    g: np.ndarray                       # summed warped heatmap [J,H,W]
    offset_fields: list[np.ndarray]     # one per dilation
    partial_warps: list[np.ndarray]     # one per dilation; g == sum(partials)


class _FusedBranches:
    """Bilinear tap sampling for every dilation branch in one batched pass.

    Only valid for offset_groups == 1 (the default), where all input channels
    share each tap's offsets.  The corner gathers are kept so the backward
    pass can form coordinate derivatives and the input-gradient scatter
    without re-gathering.
    """

    def __init__(self, f_source: np.ndarray, offset_fields, config: WarperConfig):
        c, h, w = f_source.shape
        self.shape = (c, h, w)
        n_taps = config.kernel * config.kernel
        self.n_taps = n_taps
        parts_py, parts_px = [], []
        for d, off in zip(config.dilations, offset_fields):
            py, px = _tap_coordinates(off, config.warp_spec(d), 0, h, w)
            parts_py.append(py)
            parts_px.append(px)
        py = np.concatenate(parts_py, axis=0)       # [B*T, P]
        px = np.concatenate(parts_px, axis=0)
        flat = f_source.reshape(c, h * w)
        y0 = np.floor(py)
        x0 = np.floor(px)
        ly = py - y0
        lx = px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        corner_weights = ((1 - ly) * (1 - lx), (1 - ly) * lx,
                          ly * (1 - lx), ly * lx)
        self.dy_coeff = (-(1 - lx), -lx, (1 - lx), lx)
        self.dx_coeff = (-(1 - ly), (1 - ly), -ly, ly)
        self.gathered = []
        self.corner_index = []
        self.corner_weight = []
        self.corner_inside = []
        value = None
        scratch = np.empty((c,) + py.shape, dtype=f_source.dtype)
        for (dy, dx), wgt in zip(((0, 0), (0, 1), (1, 0), (1, 1)),
                                 corner_weights):
            rows = y0 + dy
            cols = x0 + dx
            inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
            # out-of-bounds corners gather a placeholder; masked weights and
            # masked derivative coefficients zero their contribution
            index = np.where(inside, rows * w + cols, 0)
            gathered = flat[:, index]               # [C, B*T, P]
            wgt_masked = (wgt * inside).astype(f_source.dtype, copy=False)
            if value is None:
                value = gathered * wgt_masked
            else:
                np.multiply(gathered, wgt_masked, out=scratch)
                value += scratch
            self.gathered.append(gathered)
            self.corner_index.append(index)
            self.corner_weight.append(wgt_masked)
            self.corner_inside.append(inside)
        self.value = value                          # [C, B*T, P]

    def branch_value(self, branch: int) -> np.ndarray:
        """Sampled taps of one branch as a contiguous [C*T, P] matrix."""
        c = self.shape[0]
        t = self.n_taps
        block = self.value[:, branch * t:(branch + 1) * t, :]
        return np.ascontiguousarray(block).reshape(c * t, -1)

    def coordinate_derivatives(self):
        """(d_value/d_dy, d_value/d_dx), each [C, B*T, P]."""
        d_dy = None
        d_dx = None
        scratch = np.empty_like(self.gathered[0])
        for gathered, inside, cy, cx in zip(self.gathered, self.corner_inside,
                                            self.dy_coeff, self.dx_coeff):
            cy = (cy * inside).astype(gathered.dtype, copy=False)
            cx = (cx * inside).astype(gathered.dtype, copy=False)
            if d_dy is None:
                d_dy = gathered * cy
                d_dx = gathered * cx
            else:
                np.multiply(gathered, cy, out=scratch)
                d_dy += scratch
                np.multiply(gathered, cx, out=scratch)
                d_dx += scratch
        return d_dy, d_dx

    def scatter_input_grad(self, through: np.ndarray) -> np.ndarray:
        """Accumulate d(loss)/d(f_source) from per-tap upstream ``through``
        [C, B*T, P] via the cached corner indices."""
        c, h, w = self.shape
        n_pix = h * w
        chan_base = np.arange(c, dtype=np.int64)[:, None, None] * n_pix
        flat = np.zeros(c * n_pix, dtype=np.float64)
        for index, wgt in zip(self.corner_index, self.corner_weight):
            contrib = through * wgt
            flat += np.bincount((chan_base + index[None]).ravel(),
                                weights=contrib.ravel(), minlength=c * n_pix)
        return flat.reshape(c, h, w).astype(through.dtype, copy=False)


@dataclass
class WarpCache:
    params_ref: WarperParams
    f_source: np.ndarray
    phi: np.ndarray
    block_caches: list
    offset_fields: list[np.ndarray]
    sampler: _FusedBranches | None = None


def warp_heatmap(f_source, psi, params: WarperParams):
    """Warp ``f_source`` using motion evidence ``psi``; returns (WarpOutput, cache)."""
    f_source = as_chw(f_source, "f_source")
    psi = as_chw(psi, "psi")
    require(psi.shape == f_source.shape,
            f"psi shape {psi.shape} not aligned with f_source {f_source.shape}")
    config = params.config
    require(psi.shape[0] == config.joints,
            f"psi channels={psi.shape[0]} do not match joints={config.joints}")
    phi, block_caches = residual_stack_forward(psi, params)
    offsets = []
    for i, d in enumerate(config.dilations):
        w_off, b_off = params.offset_heads[i]
        offsets.append(conv2d_forward(phi, w_off, b_off, config.offset_spec(d)))
    partials = []
    sampler = None
    if config.offset_groups == 1:
        sampler = _FusedBranches(f_source, offsets, config)
        h, w = f_source.shape[1:]
        for i, d in enumerate(config.dilations):
            w_k, b_k = params.warp_kernels[i]
            flat_w = w_k.reshape(config.joints, -1)
            partial = (flat_w @ sampler.branch_value(i)).reshape(
                config.joints, h, w)
            partials.append(partial + b_k[:, None, None])
    else:
        for i, d in enumerate(config.dilations):
            w_k, b_k = params.warp_kernels[i]
            partials.append(deform_conv_forward(f_source, offsets[i], w_k, b_k,
                                                config.warp_spec(d)))
    g = partials[0].copy()
    for partial in partials[1:]:
        g += partial
    output = WarpOutput(g, offsets, partials)
    cache = WarpCache(params, f_source, phi, block_caches, offsets, sampler)
    return output, cache


def warper_backward(cache: WarpCache, params: WarperParams, upstream,
                    need_source_grad: bool = True):
    """Gradients through summation, deformable warps, offset heads and stack.

    Returns (grads shaped like WarperParams, grad_f_source, grad_psi).
    ``need_source_grad=False`` skips the warp-input scatter (grad_f_source
    comes back None); grad_psi is always computed since the residual stack
    produces it as a byproduct of its parameter gradients.
    """
    require(cache.params_ref is params,
            "stale cache: backward called with different params than forward")
    upstream = as_chw(upstream, "upstream_grad")
    config = params.config
    grad_f_source = None
    grad_phi = np.zeros_like(cache.phi)
    offset_grads = []
    warp_grads = []
    if cache.sampler is not None:
        grad_f_source, offset_field_grads, warp_grads = _fused_backward(
            cache, params, upstream, need_source_grad)
        for i, d in enumerate(config.dilations):
            w_off, _ = params.offset_heads[i]
            gphi, gwo, gbo = conv2d_backward(cache.phi, w_off,
                                             config.offset_spec(d),
                                             offset_field_grads[i])
            grad_phi += gphi
            offset_grads.append((gwo, gbo))
    else:
        grad_f_source = (np.zeros_like(cache.f_source)
                         if need_source_grad else None)
        for i, d in enumerate(config.dilations):
            w_k, _ = params.warp_kernels[i]
            gin, goff, gwk, gbk = deform_conv_backward(
                cache.f_source, cache.offset_fields[i], w_k,
                config.warp_spec(d), upstream,
                need_input_grad=need_source_grad)
            if need_source_grad:
                grad_f_source += gin
            warp_grads.append((gwk, gbk))
            w_off, _ = params.offset_heads[i]
            gphi, gwo, gbo = conv2d_backward(cache.phi, w_off,
                                             config.offset_spec(d), goff)
            grad_phi += gphi
            offset_grads.append((gwo, gbo))
    res_grads, grad_psi = residual_stack_backward(cache.block_caches, params,
                                                  grad_phi)
    grads = WarperParams(config, res_grads, offset_grads, warp_grads)
    return grads, grad_f_source, grad_psi


def _fused_backward(cache: WarpCache, params: WarperParams, upstream,
                    need_source_grad: bool):
    """Backward through all deformable branches using the cached sampler."""
    config = params.config
    sampler = cache.sampler
    c, h, w = sampler.shape
    n_pix = h * w
    n_taps = sampler.n_taps
    branches = len(config.dilations)
    up_flat = np.ascontiguousarray(upstream.reshape(config.joints, n_pix))
    through = np.empty((c, branches * n_taps, n_pix), dtype=upstream.dtype)
    warp_grads = []
    grad_bias = upstream.sum(axis=(1, 2))
    for i in range(branches):
        w_k, _ = params.warp_kernels[i]
        flat_w = w_k.reshape(config.joints, -1)
        gwk = (up_flat @ sampler.branch_value(i).T).reshape(w_k.shape)
        warp_grads.append((gwk, grad_bias.copy()))
        block = (flat_w.T @ up_flat).reshape(c, n_taps, n_pix)
        through[:, i * n_taps:(i + 1) * n_taps] = block
    d_dy, d_dx = sampler.coordinate_derivatives()
    grad_y = np.einsum("ctp,ctp->tp", through, d_dy)
    grad_x = np.einsum("ctp,ctp->tp", through, d_dx)
    offset_field_grads = []
    for i in range(branches):
        grad_block = np.empty((n_taps, 2, n_pix), dtype=upstream.dtype)
        grad_block[:, 0] = grad_y[i * n_taps:(i + 1) * n_taps]
        grad_block[:, 1] = grad_x[i * n_taps:(i + 1) * n_taps]
        offset_field_grads.append(grad_block.reshape(2 * n_taps, h, w))
    grad_f_source = (sampler.scatter_input_grad(through)
                     if need_source_grad else None)
    return grad_f_source, offset_field_grads, warp_grads


def propagate_annotation(y_labeled, f_labeled, f_unlabeled,
                         params: WarperParams) -> np.ndarray:
    """Warp a ground-truth heatmap from a labeled frame onto an unlabeled one.

    The application direction is reversed relative to training: offsets come
    from compute_difference(f_unlabeled, f_labeled) and the warped map is the
    rendered annotation rather than a predicted heatmap.
    """
    y_labeled = as_chw(y_labeled, "y_labeled")
    f_labeled = as_chw(f_labeled, "f_labeled")
    f_unlabeled = as_chw(f_unlabeled, "f_unlabeled")
    require(y_labeled.shape == f_labeled.shape == f_unlabeled.shape,
            f"inputs not aligned: {y_labeled.shape}, {f_labeled.shape}, "
            f"{f_unlabeled.shape}")
    psi = compute_difference(f_unlabeled, f_labeled)
    output, _ = warp_heatmap(y_labeled, psi, params)
    return output.g


def temporal_aggregate(frames, t: int, deltas,
                       backbone_params: BackboneParams,
                       warper_params: WarperParams) -> np.ndarray:
    """Sum of warped neighbor heatmaps, each aligned onto frame ``t``.

    Out-of-range neighbor indices clamp to [0, T-1], duplicating boundary
    frames so the summand count stays constant.
    """
    deltas = list(deltas)
    require(len(deltas) > 0, "delta list must not be empty")
    require(0 <= t < len(frames), f"frame index {t} outside [0, {len(frames)})")
    heatmap_cache: dict[int, np.ndarray] = {}

    def heatmap_at(idx: int) -> np.ndarray:
        if idx not in heatmap_cache:
            heatmap_cache[idx], _ = backbone_forward(frames[idx], backbone_params)
        return heatmap_cache[idx]

    f_t = heatmap_at(t)
    total = None
    for delta in deltas:
        neighbor = min(max(t + delta, 0), len(frames) - 1)
        f_n = heatmap_at(neighbor)
        psi = compute_difference(f_t, f_n)
        output, _ = warp_heatmap(f_n, psi, warper_params)
        total = output.g if total is None else total + output.g
    return total
