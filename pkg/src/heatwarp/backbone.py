"""Small convolutional pose network: frame [C,H,W] -> per-joint heatmaps [J,H,W].

Architecture: conv(C -> width) -> ReLU -> [conv(width -> width) -> ReLU] * depth
-> conv(width -> joints), all 3x3 with zero "same" padding, so the heatmaps
come out at frame resolution.  No normalization layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (KernelSpec, conv2d_backward, conv2d_forward, relu_backward,
                     relu_forward)
from .util import as_chw, require, spawn_rng


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    width: int = 32
    depth: int = 4      # hidden conv->ReLU repeats between stem and head
    joints: int = 13
    kernel: int = 3

    def __post_init__(self):
        require(self.depth >= -1, f"depth must be >= -1, got {self.depth}")

    def layer_specs(self) -> list[KernelSpec]:
        k = self.kernel
        if self.depth == -1:
            # degenerate single-convolution net, used as a backward-pass oracle
            return [KernelSpec(self.joints, self.in_channels, k, k)]
        specs = [KernelSpec(self.width, self.in_channels, k, k)]
        specs += [KernelSpec(self.width, self.width, k, k)
                  for _ in range(self.depth)]
        specs.append(KernelSpec(self.joints, self.width, k, k))
        return specs


@dataclass
class BackboneParams:
    config: BackboneConfig
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def validate(self) -> None:
        specs = self.config.layer_specs()
        require(len(self.weights) == len(specs) and len(self.biases) == len(specs),
                f"backbone has {len(self.weights)} weight tensors for "
                f"{len(specs)} layers")
        for idx, (w, b, spec) in enumerate(zip(self.weights, self.biases, specs)):
            require(w.shape == spec.weight_shape(),
                    f"layer {idx} weights {w.shape} != {spec.weight_shape()}")
            require(b.shape == (spec.out_channels,),
                    f"layer {idx} bias {b.shape} != ({spec.out_channels},)")

    def named(self, prefix: str = "backbone") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.conv{idx:02d}.weight"] = w
            out[f"{prefix}.conv{idx:02d}.bias"] = b
        return out

    def load_named(self, tensors: dict[str, np.ndarray],
                   prefix: str = "backbone") -> None:
        for idx in range(len(self.weights)):
            self.weights[idx] = tensors[f"{prefix}.conv{idx:02d}.weight"].copy()
            self.biases[idx] = tensors[f"{prefix}.conv{idx:02d}.bias"].copy()
        self.validate()

    def astype(self, dtype) -> "BackboneParams":
        return BackboneParams(self.config,
                              [w.astype(dtype) for w in self.weights],
                              [b.astype(dtype) for b in self.biases])


def init_backbone(config: BackboneConfig, seed: int = 0,
                  dtype=np.float64) -> BackboneParams:
    """He fan-in weight init, zero biases."""
    rng = spawn_rng(seed, "backbone-init")
    params = BackboneParams(config)
    for spec in config.layer_specs():
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        scale = np.sqrt(2.0 / fan_in)
        params.weights.append(
            (rng.standard_normal(spec.weight_shape()) * scale).astype(dtype))
        params.biases.append(np.zeros(spec.out_channels, dtype=dtype))
    return params


@dataclass
class BackboneCache:
    params_ref: BackboneParams
    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]


def backbone_forward(frame, params: BackboneParams):
    """Returns (heatmaps [J,H,W], cache for the matching backward call)."""
    frame = as_chw(frame, "frame")
    require(frame.shape[1] >= 16 and frame.shape[2] >= 16,
            f"frame spatial size {frame.shape[1:]} below 16x16 minimum")
    params.validate()
    require(frame.shape[0] == params.config.in_channels,
            f"frame channels={frame.shape[0]} do not match backbone "
            f"in_channels={params.config.in_channels}")
    specs = params.config.layer_specs()
    x = frame
    layer_inputs = []
    pre_activations = []
    for idx, spec in enumerate(specs):
        layer_inputs.append(x)
        z = conv2d_forward(x, params.weights[idx], params.biases[idx], spec)
        if idx < len(specs) - 1:
            pre_activations.append(z)
            x = relu_forward(z)
        else:
            pre_activations.append(None)
            x = z
    return x, BackboneCache(params, layer_inputs, pre_activations)


def backbone_backward(cache: BackboneCache, params: BackboneParams, upstream):
    """Gradients w.r.t. every layer's (weights, bias) and the input frame."""
    require(cache.params_ref is params,
            "stale cache: backward called with different params than forward")
    upstream = as_chw(upstream, "upstream_grad")
    specs = params.config.layer_specs()
    grad_weights: list[np.ndarray | None] = [None] * len(specs)
    grad_biases: list[np.ndarray | None] = [None] * len(specs)
    grad = upstream
    for idx in range(len(specs) - 1, -1, -1):
        if idx < len(specs) - 1:
            grad = relu_backward(cache.pre_activations[idx], grad)
        grad, grad_weights[idx], grad_biases[idx] = conv2d_backward(
            cache.layer_inputs[idx], params.weights[idx], specs[idx], grad)
    grads = BackboneParams(params.config, grad_weights, grad_biases)
    return grads, grad
