"""Raster container, geotransforms and the basic filters everything else builds on."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage


class ParameterError(ValueError):
    """Raised when an operation receives an invalid parameter."""


@dataclass(frozen=True)
class GeoTransform:
    """Affine map (col, row) -> (map_x, map_y).

    map_x = a*col + b*row + c
    map_y = d*col + e*row + f
    """

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def __post_init__(self):
        coeffs = (self.a, self.b, self.c, self.d, self.e, self.f)
        if not all(math.isfinite(v) for v in coeffs):
            raise ParameterError("geotransform coefficients must be finite")
        if abs(self.det) <= 1e-12:
            raise ParameterError(f"geotransform linear part is singular (det={self.det!r})")

    @property
    def det(self) -> float:
        return self.a * self.e - self.b * self.d

    def pixel_to_map(self, col, row):
        return (self.a * col + self.b * row + self.c,
                self.d * col + self.e * row + self.f)

    def map_to_pixel(self, mx, my):
        det = self.det
        dx = np.asarray(mx) - self.c
        dy = np.asarray(my) - self.f
        col = (self.e * dx - self.b * dy) / det
        row = (-self.d * dx + self.a * dy) / det
        return col, row


@dataclass(frozen=True, eq=False)
class Image:
    """Grayscale raster, float64, shape (height, width), optionally georeferenced."""

    data: np.ndarray
    geo: Optional[GeoTransform] = None

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ParameterError(f"image must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ParameterError("image must be at least 1x1")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("image samples must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


ImageLike = Union[Image, np.ndarray]


def as_array(img: ImageLike) -> np.ndarray:
    if isinstance(img, Image):
        return img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"image must be 2-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class GradientPair:
    gx: np.ndarray
    gy: np.ndarray


def compute_gradients(img: ImageLike, presmooth_sigma: float = 0.0,
                      operator: str = "central") -> GradientPair:
    """Horizontal/vertical derivatives.

    Central differences on the interior, one-sided differences on the border
    rows/columns. ``operator="sobel"`` swaps in a normalized Sobel kernel
    (replicate borders). ``presmooth_sigma > 0`` blurs the image first.
    """
    arr = as_array(img)
    if presmooth_sigma > 0:
        arr = gaussian_convolve(arr, presmooth_sigma)
    if operator == "central":
        gx = _central_diff(arr, axis=1)
        gy = _central_diff(arr, axis=0)
    elif operator == "sobel":
        gx = ndimage.sobel(arr, axis=1, mode="nearest") / 8.0
        gy = ndimage.sobel(arr, axis=0, mode="nearest") / 8.0
    else:
        raise ParameterError(f"unknown gradient operator {operator!r}")
    return GradientPair(gx, gy)


def _central_diff(arr: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(arr)
    n = arr.shape[axis]
    if n < 2:
        return out
    a = np.moveaxis(arr, axis, 0)
    o = np.moveaxis(out, axis, 0)
    if n > 2:
        o[1:-1] = (a[2:] - a[:-2]) / 2.0
    o[0] = a[1] - a[0]
    o[-1] = a[-1] - a[-2]
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps, radius ceil(3*sigma)."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma!r}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_convolve(img: ImageLike, sigma: float, axes=(0, 1)) -> np.ndarray:
    """Separable Gaussian smoothing with replicate padding.

    Also accepts stacked arrays (e.g. H x W x m); only ``axes`` are smoothed.
    """
    k = gaussian_kernel(sigma)
    arr = img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    out = arr
    for ax in axes:
        out = ndimage.correlate1d(out, k, axis=ax, mode="nearest")
    return out


class IntegralImage:
    """(H+1) x (W+1) summed-area table; ``table[i, j]`` = sum of rows < i, cols < j."""

    def __init__(self, img: ImageLike):
        arr = as_array(img)
        table = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1), dtype=np.float64)
        np.cumsum(np.cumsum(arr, axis=0), axis=1, out=table[1:, 1:])
        table.flags.writeable = False
        self.table = table

    @property
    def shape(self):
        return self.table.shape

    def box_sum(self, r0, c0, r1, c1):
        """Sum over rows [r0, r1) and cols [c0, c1). Accepts scalars or arrays."""
        t = self.table
        return t[r1, c1] - t[r0, c1] - t[r1, c0] + t[r0, c0]


def integral_image(img: ImageLike) -> IntegralImage:
    return IntegralImage(img)


def geo_predict(ref_geo: GeoTransform, sen_geo: GeoTransform, ref_pt):
    """Map a reference pixel (col, row) into sensed pixel coordinates."""
    if abs(sen_geo.det) <= 1e-12:
        raise ParameterError("sensed geotransform is not invertible")
    mx, my = ref_geo.pixel_to_map(ref_pt[0], ref_pt[1])
    col, row = sen_geo.map_to_pixel(mx, my)
    return float(col), float(row)
