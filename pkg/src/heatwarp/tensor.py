"""Dense 2-D convolution arithmetic and a finite-difference gradient oracle.

Conventions used across the package:
  * activations are rank-3 arrays [C, H, W], row-major;
  * kernels are rank-4 arrays [O, C, kh, kw];
  * "same" zero padding everywhere, so spatial sizes never change;
  * no batch axis -- batching is an outer loop owned by the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .util import ContractError, as_chw, require


@dataclass(frozen=True)
class KernelSpec:
    """Shape and dilation of one convolution layer (zero "same" padding)."""

    out_channels: int
    in_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    dilation: int = 1
    offset_groups: int = 1

    def __post_init__(self):
        require(self.kernel_h % 2 == 1 and self.kernel_w % 2 == 1,
                f"kernel must be odd for symmetric same padding, "
                f"got {self.kernel_h}x{self.kernel_w}")
        require(self.dilation >= 1, f"dilation must be >= 1, got {self.dilation}")
        require(self.out_channels >= 1 and self.in_channels >= 1,
                "channel counts must be positive")
        require(self.offset_groups >= 1 and self.in_channels % self.offset_groups == 0,
                f"offset_groups={self.offset_groups} must divide "
                f"in_channels={self.in_channels}")

    @property
    def pad_h(self) -> int:
        return self.dilation * (self.kernel_h // 2)

    @property
    def pad_w(self) -> int:
        return self.dilation * (self.kernel_w // 2)

    @property
    def offset_channels(self) -> int:
        """Channel count of the offset field paired with this kernel."""
        return 2 * self.offset_groups * self.kernel_h * self.kernel_w

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def _check_conv_args(inp, weights, bias, spec: KernelSpec):
    inp = as_chw(inp, "input")
    weights = np.asarray(weights)
    c, _, _ = inp.shape
    require(c == spec.in_channels,
            f"input channels={c} do not match spec in_channels={spec.in_channels}")
    require(weights.shape == spec.weight_shape(),
            f"weights shape {weights.shape} does not match spec {spec.weight_shape()}")
    if bias is not None:
        bias = np.asarray(bias)
        require(bias.shape == (spec.out_channels,),
                f"bias shape {bias.shape} does not match out_channels="
                f"{spec.out_channels}")
    return inp, weights, bias


def _zero_pad(inp: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    c, h, w = inp.shape
    padded = np.zeros((c, h + 2 * pad_h, w + 2 * pad_w), dtype=inp.dtype)
    padded[:, pad_h:pad_h + h, pad_w:pad_w + w] = inp
    return padded


def _im2col(padded: np.ndarray, spec: KernelSpec, h: int, w: int) -> np.ndarray:
    """Stack every tap's window: [C*kh*kw, H*W], rows ordered (c, i, j)."""
    c = padded.shape[0]
    d = spec.dilation
    n_taps = spec.kernel_h * spec.kernel_w
    cols = np.empty((c, n_taps, h * w), dtype=padded.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            window = padded[:, d * i:d * i + h, d * j:d * j + w]
            cols[:, i * spec.kernel_w + j] = window.reshape(c, h * w)
    return cols.reshape(c * n_taps, h * w)


def conv2d_forward(inp, weights, bias, spec: KernelSpec) -> np.ndarray:
    """Dilated same-padded convolution: out[o,y,x] = b[o] + sum w * input taps.

    Tap (i, j) of output pixel (y, x) reads input at
    (y + d*(i - kh//2), x + d*(j - kw//2)); out-of-bounds reads are zero.
    """
    inp, weights, bias = _check_conv_args(inp, weights, bias, spec)
    _, h, w = inp.shape
    padded = _zero_pad(inp, spec.pad_h, spec.pad_w)
    cols = _im2col(padded, spec, h, w)
    flat_w = weights.reshape(spec.out_channels, -1)
    out = (flat_w @ cols).reshape(spec.out_channels, h, w)
    if bias is not None:
        out = out + bias[:, None, None]
    return out


def conv2d_backward(inp, weights, spec: KernelSpec, upstream):
    """Gradients of conv2d_forward w.r.t. (input, weights, bias)."""
    inp, weights, _ = _check_conv_args(inp, weights, None, spec)
    upstream = as_chw(upstream, "upstream_grad")
    _, h, w = inp.shape
    require(upstream.shape == (spec.out_channels, h, w),
            f"upstream_grad shape {upstream.shape} does not match forward output "
            f"{(spec.out_channels, h, w)}")
    d = spec.dilation
    padded = _zero_pad(inp, spec.pad_h, spec.pad_w)
    cols = _im2col(padded, spec, h, w)
    up_flat = np.ascontiguousarray(upstream.reshape(spec.out_channels, h * w))
    grad_weights = (up_flat @ cols.T).reshape(weights.shape)
    grad_bias = upstream.sum(axis=(1, 2))
    flat_w = weights.reshape(spec.out_channels, -1)
    grad_cols = (flat_w.T @ up_flat).reshape(
        spec.in_channels, spec.kernel_h * spec.kernel_w, h, w)
    grad_padded = np.zeros_like(padded)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            grad_padded[:, d * i:d * i + h, d * j:d * j + w] += (
                grad_cols[:, i * spec.kernel_w + j])
    grad_input = grad_padded[:, spec.pad_h:spec.pad_h + h,
                             spec.pad_w:spec.pad_w + w].copy()
    return grad_input, grad_weights, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool
    detail: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = (f"{status} {self.op_name}: max rel error "
                f"{self.max_rel_error:.3e} (tol {self.tolerance:.1e})")
        return line + (f" [{self.detail}]" if self.detail else "")


def grad_check(op_name: str,
               fn: Callable,
               inputs: Sequence[np.ndarray],
               tolerance: float = 1e-4,
               step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    ``fn(*inputs)`` must return ``(value, grads)`` where ``value`` is a scalar
    and ``grads`` holds one array per input, matching shapes.  Every scalar of
    every input is perturbed by +-step; the relative error denominator is
    max(|analytic|, |numeric|, 1e-8).  Inputs must be small enough that
    2 * scalar-count forward evaluations are affordable.
    """
    work = [np.array(x, dtype=np.float64) for x in inputs]
    value, analytic = fn(*work)
    if not np.isfinite(value):
        return GradCheckReport(op_name, np.inf, tolerance, False,
                               "non-finite value at unperturbed inputs")
    analytic = [np.asarray(g, dtype=np.float64) for g in analytic]
    for idx, (x, g) in enumerate(zip(work, analytic)):
        if g.shape != x.shape:
            raise ContractError(
                f"analytic grad {idx} shape {g.shape} != input shape {x.shape}")
    worst = 0.0
    detail = ""
    for idx, x in enumerate(work):
        flat = x.reshape(-1)
        grad_flat = analytic[idx].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = fn(*work)[0]
            flat[k] = orig - step
            f_minus = fn(*work)[0]
            flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                return GradCheckReport(
                    op_name, np.inf, tolerance, False,
                    f"non-finite value perturbing input {idx} element {k}")
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(grad_flat[k]), abs(numeric), 1e-8)
            rel = abs(grad_flat[k] - numeric) / denom
            if rel > worst:
                worst = rel
                detail = f"input {idx} element {k}"
    return GradCheckReport(op_name, worst, tolerance, worst < tolerance, detail)
