"""Binary PGM/PPM image IO (maxval 255) and a color-wheel flow rasterizer."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .util import ContractError, require


def write_pgm(path, image) -> None:
    """Write a [H,W] array of values in [0,1] as binary PGM (P5)."""
    image = np.asarray(image)
    require(image.ndim == 2, f"PGM image must be rank 2, got {image.ndim}")
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a [H,W] float64 array in [0,1]."""
    raw = Path(path).read_bytes()
    magic, rest = _take_token(raw, 0)
    if magic != b"P5":
        raise ContractError(f"{path}: not a binary PGM (magic {magic!r})")
    width, rest = _take_token(raw, rest)
    height, rest = _take_token(raw, rest)
    maxval, rest = _take_token(raw, rest)
    w, h, mv = int(width), int(height), int(maxval)
    require(mv == 255, f"{path}: unsupported maxval {mv}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=rest)
    require(pixels.size == w * h, f"{path}: truncated pixel data")
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def write_ppm(path, rgb) -> None:
    """Write a [H,W,3] array of values in [0,1] as binary PPM (P6)."""
    rgb = np.asarray(rgb)
    require(rgb.ndim == 3 and rgb.shape[2] == 3,
            f"PPM image must be [H,W,3], got {rgb.shape}")
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def _take_token(raw: bytes, start: int):
    """Next whitespace-delimited token after optional comments."""
    i = start
    while i < len(raw):
        if raw[i:i + 1].isspace():
            i += 1
        elif raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        else:
            break
    j = i
    while j < len(raw) and not raw[j:j + 1].isspace():
        j += 1
    require(j > i, "truncated netpbm header")
    return raw[i:j], j + 1


def flow_to_color(flow, max_magnitude: float | None = None) -> np.ndarray:
    """Rasterize a [2,H,W] (dy, dx) field with the usual HSV color wheel:
    hue encodes direction, saturation encodes magnitude."""
    flow = np.asarray(flow)
    require(flow.ndim == 3 and flow.shape[0] == 2,
            f"flow must be [2,H,W], got {flow.shape}")
    dy, dx = flow[0], flow[1]
    magnitude = np.hypot(dy, dx)
    if max_magnitude is None:
        max_magnitude = float(magnitude.max()) or 1.0
    sat = np.clip(magnitude / max_magnitude, 0, 1)
    hue = (np.arctan2(dy, dx) + np.pi) / (2 * np.pi)   # [0,1)
    # inline HSV -> RGB with value fixed at 1
    h6 = (hue * 6.0) % 6.0
    sector = np.floor(h6).astype(int)
    f = h6 - sector
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    ones = np.ones_like(sat)
    lut = [(ones, t, p), (q, ones, p), (p, ones, t),
           (p, q, ones), (t, p, ones), (ones, p, q)]
    rgb = np.zeros(flow.shape[1:] + (3,))
    for s, (r, g, b) in enumerate(lut):
        mask = sector == s
        rgb[mask, 0] = r[mask]
        rgb[mask, 1] = g[mask]
        rgb[mask, 2] = b[mask]
    return rgb
