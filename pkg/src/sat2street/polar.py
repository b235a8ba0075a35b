"""Polar warping of square overhead images into panorama-shaped rasters.

Images are numpy arrays in channel-first layout ``(C, H, W)``; a bare
``(H, W)`` array is treated as a single channel and returned the same way.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class PolarParams:
    sat_width: int = 750
    sat_height: int = 750
    polar_width: int = 616
    polar_height: int = 112

    def __post_init__(self):
        for name in ("sat_width", "sat_height", "polar_width", "polar_height"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.sat_width != self.sat_height:
            raise ValueError(
                f"satellite image must be square, got {self.sat_width}x{self.sat_height}"
            )


def polar_source_coords(x_ps, y_ps, params: PolarParams):
    """Map polar-image pixel coordinates to (fractional) satellite coordinates.

    Column 0 looks north (towards row 0 of the satellite image); columns
    advance clockwise, so ``polar_width / 4`` looks east. Row 0 samples the
    image center and row ``polar_height`` would sample the inscribed circle.
    Works elementwise on scalars or arrays.
    """
    x_ps = np.asarray(x_ps, dtype=np.float64)
    y_ps = np.asarray(y_ps, dtype=np.float64)
    half_w = params.sat_width / 2.0
    half_h = params.sat_height / 2.0
    angle = 2.0 * np.pi * x_ps / params.polar_width
    radius = y_ps / params.polar_height
    x_s = half_w + half_w * radius * np.sin(angle)
    y_s = half_h - half_h * radius * np.cos(angle)
    if x_s.ndim == 0:
        return float(x_s), float(y_s)
    return x_s, y_s


@lru_cache(maxsize=16)
def _sampling_grid(params: PolarParams):
    ys, xs = np.meshgrid(
        np.arange(params.polar_height), np.arange(params.polar_width), indexing="ij"
    )
    x_s, y_s = polar_source_coords(xs, ys, params)
    x_s.setflags(write=False)
    y_s.setflags(write=False)
    return x_s, y_s


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray, out_of_bounds: str = "clamp"):
    """Sample a ``(C, H, W)`` image at fractional pixel-center coordinates.

    ``out_of_bounds`` is ``"clamp"`` (replicate the nearest edge pixel) or
    ``"zero"`` (neighbours outside the raster contribute zero).
    """
    _, height, width = image.shape
    if out_of_bounds == "clamp":
        x = np.clip(x, 0.0, width - 1.0)
        y = np.clip(y, 0.0, height - 1.0)
    elif out_of_bounds != "zero":
        raise ValueError(f"unknown out-of-bounds policy {out_of_bounds!r}")

    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    wx = x - x0
    wy = y - y0

    out = np.zeros((image.shape[0],) + x.shape, dtype=np.float64)
    for dy, dx, weight in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        xi = np.clip(xi, 0, width - 1)
        yi = np.clip(yi, 0, height - 1)
        out += image[:, yi, xi] * np.where(valid, weight, 0.0)
    return out


def polar_transform(satellite: np.ndarray, params: PolarParams, out_of_bounds: str = "clamp") -> np.ndarray:
    """Warp a square satellite image to a ``polar_height x polar_width`` raster."""
    image = np.asarray(satellite)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) or (H, W) image, got shape {image.shape}")
    _, height, width = image.shape
    if height != width:
        raise ValueError(f"satellite image must be square, got {height}x{width}")
    if (width, height) != (params.sat_width, params.sat_height):
        raise ValueError(
            f"satellite image is {height}x{width} but params expect "
            f"{params.sat_height}x{params.sat_width}"
        )
    x_s, y_s = _sampling_grid(params)
    out = bilinear_sample(image.astype(np.float64, copy=False), x_s, y_s, out_of_bounds)
    out = out.astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64)
    return out[0] if squeeze else out
