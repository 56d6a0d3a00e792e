"""Bilinear sampling and deformable convolution with full gradients.

An offset field for a kernel with ``G`` offset groups is a rank-3 array
``[2*G*kh*kw, H, W]``: for group ``g`` and tap ``t = i*kw + j``, channel
``2*(g*kh*kw + t)`` holds the vertical displacement (dy) and the next channel
the horizontal one (dx), in pixels, added to that tap's sampling location.
With the default single group every input channel shares the tap offsets.

Sampling is bilinear with zero padding: neighbors outside the map contribute
value 0 and receive no gradient.  Bilinear interpolation is not differentiable
on the integer lattice; gradients use the cell selected by floor(), i.e. a
consistent one-sided choice at integer coordinates.
"""

from __future__ import annotations

import numpy as np

from .tensor import KernelSpec
from .util import as_chw, require


def bilinear_sample(feature_map, y: float, x: float) -> np.ndarray:
    """Sample every channel of [C,H,W] at fractional (y, x); zero outside."""
    fmap = as_chw(feature_map, "map")
    c, h, w = fmap.shape
    y0 = int(np.floor(y))
    x0 = int(np.floor(x))
    ly = y - y0
    lx = x - x0

    def read(yy: int, xx: int) -> np.ndarray:
        if 0 <= yy < h and 0 <= xx < w:
            return fmap[:, yy, xx]
        return np.zeros(c, dtype=fmap.dtype)

    return ((1 - ly) * (1 - lx) * read(y0, x0)
            + (1 - ly) * lx * read(y0, x0 + 1)
            + ly * (1 - lx) * read(y0 + 1, x0)
            + ly * lx * read(y0 + 1, x0 + 1))


def _check_deform_args(inp, offsets, weights, bias, spec: KernelSpec):
    inp = as_chw(inp, "input")
    offsets = as_chw(offsets, "offsets")
    weights = np.asarray(weights)
    c, h, w = inp.shape
    require(c == spec.in_channels,
            f"input channels={c} do not match spec in_channels={spec.in_channels}")
    require(offsets.shape[0] == spec.offset_channels,
            f"offset channels={offsets.shape[0]} do not match "
            f"2*groups*kh*kw={spec.offset_channels}")
    require(offsets.shape[1:] == (h, w),
            f"offset spatial size {offsets.shape[1:]} does not match input {(h, w)}")
    require(weights.shape == spec.weight_shape(),
            f"weights shape {weights.shape} does not match spec {spec.weight_shape()}")
    if bias is not None:
        bias = np.asarray(bias)
        require(bias.shape == (spec.out_channels,),
                f"bias shape {bias.shape} does not match out_channels="
                f"{spec.out_channels}")
    return inp, offsets, weights, bias


# the four bilinear corners as (dy, dx); weights and coordinate derivatives
# follow the same order
_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


class _TapSamples:
    """All-tap bilinear samples of one offset group, flattened over pixels.

    ``value`` is [C, T, P] with T = kh*kw, P = H*W.  ``d_dy``/``d_dx`` hold
    the analytic coordinate derivatives (built only when requested), and the
    corner bookkeeping supports scatter accumulation for the input gradient.
    """

    def __init__(self, inp: np.ndarray, py: np.ndarray, px: np.ndarray,
                 with_derivs: bool):
        c, h, w = inp.shape
        t, p = py.shape
        flat = inp.reshape(c, h * w)
        y0 = np.floor(py)
        x0 = np.floor(px)
        ly = py - y0
        lx = px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        corner_weights = ((1 - ly) * (1 - lx), (1 - ly) * lx,
                          ly * (1 - lx), ly * lx)
        dy_coeff = (-(1 - lx), -lx, (1 - lx), lx)
        dx_coeff = (-(1 - ly), (1 - ly), -ly, ly)
        self.value = np.zeros((c, t, p), dtype=inp.dtype)
        self.d_dy = np.zeros_like(self.value) if with_derivs else None
        self.d_dx = np.zeros_like(self.value) if with_derivs else None
        self.corner_index: list[np.ndarray] = []
        self.corner_weight: list[np.ndarray] = []
        for (dy, dx), wgt, cy, cx in zip(_CORNERS, corner_weights,
                                         dy_coeff, dx_coeff):
            rows = y0 + dy
            cols = x0 + dx
            inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
            index = np.where(inside, rows * w + cols, 0)
            gathered = flat[:, index]           # [C, T, P]
            wgt_masked = wgt * inside
            self.value += gathered * wgt_masked
            if with_derivs:
                self.d_dy += gathered * (cy * inside)
                self.d_dx += gathered * (cx * inside)
            self.corner_index.append(index)
            self.corner_weight.append(wgt_masked)


_GRID_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _flat_grid(h: int, w: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (h, w, np.dtype(dtype).name)
    if key not in _GRID_CACHE:
        _GRID_CACHE[key] = (np.repeat(np.arange(h, dtype=dtype), w),
                            np.tile(np.arange(w, dtype=dtype), h))
    return _GRID_CACHE[key]


def _tap_coordinates(offsets: np.ndarray, spec: KernelSpec, group: int,
                     h: int, w: int):
    """Absolute sampling coordinates (py, px), each [T, H*W]."""
    n_taps = spec.kernel_h * spec.kernel_w
    center_i = spec.kernel_h // 2
    center_j = spec.kernel_w // 2
    rel = np.array([[spec.dilation * (i - center_i), spec.dilation * (j - center_j)]
                    for i in range(spec.kernel_h)
                    for j in range(spec.kernel_w)], dtype=offsets.dtype)
    grid_y, grid_x = _flat_grid(h, w, offsets.dtype)
    block = offsets[2 * group * n_taps:2 * (group + 1) * n_taps]
    off = block.reshape(n_taps, 2, h * w)
    py = grid_y[None, :] + rel[:, 0:1] + off[:, 0]
    px = grid_x[None, :] + rel[:, 1:2] + off[:, 1]
    return py, px


def _group_slices(spec: KernelSpec):
    size = spec.in_channels // spec.offset_groups
    return [slice(g * size, (g + 1) * size) for g in range(spec.offset_groups)]


def deform_conv_forward(inp, offsets, weights, bias, spec: KernelSpec) -> np.ndarray:
    """Convolution whose taps sample at learned fractional displacements."""
    inp, offsets, weights, bias = _check_deform_args(inp, offsets, weights, bias,
                                                     spec)
    _, h, w = inp.shape
    dtype = np.result_type(inp, offsets, weights)
    n_taps = spec.kernel_h * spec.kernel_w
    value = np.empty((spec.in_channels, n_taps, h * w), dtype=dtype)
    for g, channels in enumerate(_group_slices(spec)):
        py, px = _tap_coordinates(offsets, spec, g, h, w)
        samples = _TapSamples(inp[channels].astype(dtype, copy=False), py, px,
                              with_derivs=False)
        value[channels] = samples.value
    flat_w = weights.reshape(spec.out_channels, -1)
    out = (flat_w @ value.reshape(spec.in_channels * n_taps, h * w))
    out = out.reshape(spec.out_channels, h, w)
    if bias is not None:
        out = out + bias[:, None, None]
    return out


def deform_conv_backward(inp, offsets, weights, spec: KernelSpec, upstream,
                         need_input_grad: bool = True):
    """Gradients of deform_conv_forward w.r.t. (input, offsets, weights, bias).

    ``need_input_grad=False`` skips the scatter pass and returns None for
    grad_input (useful when the source map is not being optimized).
    """
    inp, offsets, weights, _ = _check_deform_args(inp, offsets, weights, None,
                                                  spec)
    upstream = as_chw(upstream, "upstream_grad")
    _, h, w = inp.shape
    require(upstream.shape == (spec.out_channels, h, w),
            f"upstream_grad shape {upstream.shape} does not match forward output "
            f"{(spec.out_channels, h, w)}")
    dtype = np.result_type(inp, offsets, weights, upstream)
    n_taps = spec.kernel_h * spec.kernel_w
    n_pix = h * w
    up_flat = np.ascontiguousarray(upstream.reshape(spec.out_channels, n_pix))
    flat_w = weights.reshape(spec.out_channels, -1)
    # d(out)/d(sampled value): [C, T, P]
    through = (flat_w.T @ up_flat).reshape(spec.in_channels, n_taps, n_pix)
    value = np.empty((spec.in_channels, n_taps, n_pix), dtype=dtype)
    grad_offsets = np.zeros_like(offsets)
    grad_input = np.zeros(inp.shape, dtype=dtype) if need_input_grad else None
    for g, channels in enumerate(_group_slices(spec)):
        py, px = _tap_coordinates(offsets, spec, g, h, w)
        samples = _TapSamples(inp[channels].astype(dtype, copy=False), py, px,
                              with_derivs=True)
        value[channels] = samples.value
        block = slice(2 * g * n_taps, 2 * (g + 1) * n_taps)
        grad_block = np.empty((n_taps, 2, n_pix), dtype=dtype)
        grad_block[:, 0] = np.einsum("ctp,ctp->tp", through[channels],
                                     samples.d_dy)
        grad_block[:, 1] = np.einsum("ctp,ctp->tp", through[channels],
                                     samples.d_dx)
        grad_offsets[block] = grad_block.reshape(2 * n_taps, h, w)
        if need_input_grad:
            group_size = channels.stop - channels.start
            chan_base = (np.arange(group_size, dtype=np.int64)[:, None, None]
                         * n_pix)
            flat_grad = np.zeros(group_size * n_pix, dtype=np.float64)
            for index, wgt in zip(samples.corner_index, samples.corner_weight):
                contrib = through[channels] * wgt
                flat_grad += np.bincount((chan_base + index[None]).ravel(),
                                         weights=contrib.ravel(),
                                         minlength=group_size * n_pix)
            grad_input[channels] = flat_grad.reshape(group_size, h, w)
    grad_weights = (up_flat @ value.reshape(-1, n_pix).T).reshape(weights.shape)
    grad_bias = upstream.sum(axis=(1, 2))
    if need_input_grad:
        grad_input = grad_input.astype(inp.dtype, copy=False)
    return grad_input, grad_offsets, grad_weights, grad_bias


def zero_offsets(spec: KernelSpec, h: int, w: int, dtype=np.float64) -> np.ndarray:
    """All-zero offset field, under which the op equals conv2d_forward."""
    return np.zeros((spec.offset_channels, h, w), dtype=dtype)


def bilinear_resample_grid(feature_map: np.ndarray, src_y: np.ndarray,
                           src_x: np.ndarray) -> np.ndarray:
    """Sample a [C,H,W] map at per-pixel coordinates (zero outside); the
    warp used by image augmentation."""
    fmap = as_chw(feature_map, "map")
    h, w = src_y.shape
    samples = _TapSamples(fmap, src_y.reshape(1, -1), src_x.reshape(1, -1),
                          with_derivs=False)
    return samples.value.reshape(fmap.shape[0], h, w)
