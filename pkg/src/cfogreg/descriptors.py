"""Dense (one vector per pixel) structural descriptors.

Every builder returns a :class:`FeatureVolume` of shape (H, W, dims) aligned with
the input raster. Borders are handled by replicate padding so each pixel gets a
full descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import (GradientPair, ImageLike, IntegralImage, ParameterError,
                        as_array, compute_gradients, gaussian_convolve)

NORM_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    data: np.ndarray  # (H, W, dims)
    name: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64).view()
        if data.ndim != 3 or data.shape[2] < 1:
            raise ParameterError(f"feature volume must be H x W x m, got {data.shape}")
        # read-only view: shareable across threads without copying
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CfogParams:
    m: int = 9
    sigma: float = 0.8
    normalize: bool = True
    presmooth_sigma: float = 0.0

    def __post_init__(self):
        if self.m < 2:
            raise ParameterError(f"cfog.m must be >= 2, got {self.m}")
        if not self.sigma > 0:
            raise ParameterError(f"cfog.sigma must be > 0, got {self.sigma}")
        if self.presmooth_sigma < 0:
            raise ParameterError("cfog.presmooth_sigma must be >= 0")


@dataclass(frozen=True)
class HogParams:
    cell_size: int = 4
    bins: int = 9
    cells_per_block: int = 2
    normalize: bool = True

    def __post_init__(self):
        if self.cell_size < 2:
            raise ParameterError(f"hog.cell_size must be >= 2, got {self.cell_size}")
        if self.bins != 9 or self.cells_per_block != 2:
            raise ParameterError("pixel-wise HOG uses fixed 2x2 cells and 9 bins")


@dataclass(frozen=True)
class LssParams:
    patch_radius: int = 2
    region_radius: int = 20
    radial_bins: int = 3
    angular_bins: int = 8
    var_noise: float = 25.0 * (1.0 / 255.0) ** 2

    def __post_init__(self):
        if self.patch_radius < 0 or self.region_radius <= self.patch_radius:
            raise ParameterError("lss.region_radius must exceed lss.patch_radius")
        if self.region_radius < 1 or self.radial_bins < 1 or self.angular_bins < 1:
            raise ParameterError("lss radii and bin counts must be positive")
        if self.var_noise < 0:
            raise ParameterError("lss.var_noise must be >= 0")

    @property
    def dims(self) -> int:
        return self.radial_bins * self.angular_bins


@dataclass(frozen=True)
class SurfParams:
    haar_scale: int = 2
    subregion_grid: int = 4
    subregion_size: int = 5
    normalize: bool = True

    def __post_init__(self):
        if self.haar_scale < 1:
            raise ParameterError("surf.haar_scale must be >= 1")
        if self.subregion_grid != 4 or self.subregion_size != 5:
            raise ParameterError("simplified U-SURF uses a fixed 4x4 grid of 5x5 sub-regions")

    @property
    def block(self) -> int:
        return self.subregion_grid * self.subregion_size


def l2_normalize(vol: np.ndarray) -> np.ndarray:
    """Per-pixel L2 normalization; vectors with norm < 1e-10 become exact zeros."""
    norm = np.sqrt(np.einsum("ijk,ijk->ij", vol, vol))
    ok = norm >= NORM_FLOOR
    out = np.zeros_like(vol)
    out[ok] = vol[ok] / norm[ok][:, None]
    return out


def _check_size(arr: np.ndarray, min_side: int, what: str):
    if arr.shape[0] < min_side or arr.shape[1] < min_side:
        raise ParameterError(
            f"{what}: image {arr.shape[1]}x{arr.shape[0]} is smaller than the "
            f"required {min_side}x{min_side}")


# --------------------------------------------------------------------------- CFOG

def oriented_gradient_channel(grads: GradientPair, theta: float) -> np.ndarray:
    if not 0.0 <= theta < math.pi:
        raise ParameterError(f"theta must lie in [0, pi), got {theta}")
    return np.abs(math.cos(theta) * grads.gx + math.sin(theta) * grads.gy)


def build_cfog(img: ImageLike, p: CfogParams = CfogParams()) -> FeatureVolume:
    arr = as_array(img)
    _check_size(arr, 3, "CFOG")
    grads = compute_gradients(arr, presmooth_sigma=p.presmooth_sigma)
    thetas = np.arange(p.m) * (math.pi / p.m)
    vol = np.abs(grads.gx[:, :, None] * np.cos(thetas) + grads.gy[:, :, None] * np.sin(thetas))
    vol = gaussian_convolve(vol, p.sigma, axes=(0, 1))
    # (1, 2, 1)/4 along the periodic orientation axis
    vol = (np.roll(vol, 1, axis=2) + 2.0 * vol + np.roll(vol, -1, axis=2)) * 0.25
    if p.normalize:
        vol = l2_normalize(vol)
    return FeatureVolume(vol, "CFOG")


# --------------------------------------------------------------------------- HOG

def orientation_histogram_channels(grads: GradientPair, bins: int = 9) -> np.ndarray:
    """Split each pixel's gradient magnitude over the two nearest unsigned orientation bins.

    Bin k is centred on k*pi/bins; the axis is circular over [0, pi).
    """
    mag = np.hypot(grads.gx, grads.gy)
    theta = np.mod(np.arctan2(grads.gy, grads.gx), math.pi)
    t = theta * (bins / math.pi)
    k0f = np.floor(t)
    frac = t - k0f
    k0 = k0f.astype(np.int64) % bins
    k1 = (k0 + 1) % bins
    out = np.zeros(mag.shape + (bins,))
    rows, cols = np.indices(mag.shape)
    out[rows, cols, k0] = mag * (1.0 - frac)
    out[rows, cols, k1] += mag * frac
    return out


def hog_cell_weights(cell_size: int) -> np.ndarray:
    """Bilinear weights (2, 2*cell_size) of block offsets -cs..cs-1 towards the two cell centres."""
    cs = cell_size
    offsets = np.arange(-cs, cs, dtype=np.float64)
    centers = np.array([-cs / 2.0 - 0.5, cs / 2.0 - 0.5])
    return np.maximum(0.0, 1.0 - np.abs(offsets[None, :] - centers[:, None]) / cs)


def build_pixelwise_hog(img: ImageLike, p: HogParams = HogParams()) -> FeatureVolume:
    arr = as_array(img)
    cs = p.cell_size
    _check_size(arr, 2 * cs + 1, "pixel-wise HOG")
    h, w = arr.shape
    chans = orientation_histogram_channels(compute_gradients(arr), p.bins)
    padded = np.pad(chans, ((cs, cs), (cs, cs), (0, 0)), mode="edge")
    weights = hog_cell_weights(cs)
    n = 2 * cs

    # vertical pass: (2, H, W + 2cs, bins)
    vert = np.zeros((2, h, w + 2 * cs, p.bins))
    for i in range(n):
        rows = padded[i:i + h]
        for c in range(2):
            if weights[c, i]:
                vert[c] += weights[c, i] * rows
    out = np.zeros((h, w, 2, 2, p.bins))
    for j in range(n):
        cols = vert[:, :, j:j + w]
        for c in range(2):
            if weights[c, j]:
                out[:, :, :, c, :] += weights[c, j] * np.moveaxis(cols, 0, 2)
    vol = out.reshape(h, w, 4 * p.bins)
    if p.normalize:
        vol = l2_normalize(vol)
    return FeatureVolume(vol, "FHOG")


# --------------------------------------------------------------------------- LSS

def lss_bin_layout(p: LssParams):
    """Region offsets used by the descriptor and their log-polar bin index.

    Returns (dy, dx, bin) integer arrays. The centre offset and offsets beyond
    ``region_radius`` are excluded. Angular bins are centred on multiples of
    2*pi/angular_bins; radial edges are spaced in log(1 + rho).
    """
    R = p.region_radius
    dy, dx = np.mgrid[-R:R + 1, -R:R + 1]
    dy = dy.ravel()
    dx = dx.ravel()
    rho = np.hypot(dy, dx)
    keep = (rho > 0) & (rho <= R)
    dy, dx, rho = dy[keep], dx[keep], rho[keep]
    rbin = np.minimum(p.radial_bins - 1,
                      np.floor(p.radial_bins * np.log1p(rho) / math.log1p(R)).astype(np.int64))
    ang = np.mod(np.arctan2(dy, dx), 2 * math.pi)
    abin = np.floor(ang * p.angular_bins / (2 * math.pi) + 0.5).astype(np.int64) % p.angular_bins
    return dy, dx, rbin * p.angular_bins + abin


def _box_sum_valid(a: np.ndarray, k: int, tmp=None, out=None) -> np.ndarray:
    """Sums over every k x k window fully inside ``a`` (separable running adds)."""
    h, w = a.shape[0] - k + 1, a.shape[1] - k + 1
    if tmp is None:
        tmp = np.empty((h, a.shape[1]))
    if out is None:
        out = np.empty((h, w))
    np.copyto(tmp, a[:h])
    for i in range(1, k):
        tmp += a[i:i + h]
    np.copyto(out, tmp[:, :w])
    for j in range(1, k):
        out += tmp[:, j:j + w]
    return out


def build_lss(img: ImageLike, p: LssParams = LssParams()) -> FeatureVolume:
    arr = as_array(img)
    R, r = p.region_radius, p.patch_radius
    _check_size(arr, 2 * R + 1, "LSS")
    h, w = arr.shape
    k = 2 * r + 1
    # SSD_{-d}(x) = SSD_d(x - d): evaluate half of the offsets on a domain
    # extended by R and read the mirrored offset from a shifted window.
    pad = 2 * R + r
    P = np.pad(arr, pad, mode="edge")
    eh, ew = h + 2 * R, w + 2 * R
    core = P[R:R + eh + 2 * r, R:R + ew + 2 * r]
    diff = np.empty_like(core)
    tmp = np.empty((eh, ew + 2 * r))
    ext = np.empty((eh, ew))

    def ssd_ext(dy, dx):
        np.subtract(core, P[R + dy:R + dy + eh + 2 * r, R + dx:R + dx + ew + 2 * r], out=diff)
        np.multiply(diff, diff, out=diff)
        return _box_sum_valid(diff, k, tmp, ext)

    def own(e):
        return e[R:R + h, R:R + w]

    def mirrored(e, dy, dx):
        return e[R - dy:R - dy + h, R - dx:R - dx + w]

    var_auto = np.zeros((h, w))
    for dy, dx in ((0, 1), (1, -1), (1, 0), (1, 1)):
        e = ssd_ext(dy, dx)
        np.maximum(var_auto, own(e), out=var_auto)
        np.maximum(var_auto, mirrored(e, dy, dx), out=var_auto)
    denom = np.maximum(var_auto, max(p.var_noise, 1e-300))

    # exp(-x / denom) is decreasing in x, so the per-bin maximum correlation
    # comes from the per-bin minimum SSD
    dys, dxs, bins = lss_bin_layout(p)
    bin_of = {(dy, dx): b for dy, dx, b in zip(dys.tolist(), dxs.tolist(), bins.tolist())}
    min_ssd = np.full((p.dims, h, w), np.inf)
    for (dy, dx), b in bin_of.items():
        if dy < 0 or (dy == 0 and dx < 0):
            continue
        e = ssd_ext(dy, dx)
        np.minimum(min_ssd[b], own(e), out=min_ssd[b])
        bm = bin_of[(-dy, -dx)]
        np.minimum(min_ssd[bm], mirrored(e, dy, dx), out=min_ssd[bm])
    desc = np.exp(-np.moveaxis(min_ssd, 0, 2) / denom[:, :, None])

    lo = desc.min(axis=2, keepdims=True)
    span = desc.max(axis=2, keepdims=True) - lo
    flat = span[..., 0] <= NORM_FLOOR
    span[flat] = 1.0
    out = (desc - lo) / span
    out[flat] = 0.0
    return FeatureVolume(out, "FLSS")


def lss_correlation_surface(img: ImageLike, x: int, y: int, p: LssParams = LssParams()) -> np.ndarray:
    """The (2R+1) x (2R+1) correlation surface of one pixel, before log-polar binning.

    Entry [R + dy, R + dx] is exp(-SSD(q, q + d) / max(var_noise, var_auto(q))).
    Slow; meant for inspection and debugging.
    """
    arr = as_array(img)
    R, r = p.region_radius, p.patch_radius
    P = np.pad(arr, R + r + 1, mode="edge")
    cy, cx = y + R + r + 1, x + R + r + 1
    centre = P[cy - r:cy + r + 1, cx - r:cx + r + 1]

    def ssd(dy, dx):
        other = P[cy + dy - r:cy + dy + r + 1, cx + dx - r:cx + dx + r + 1]
        return float(np.sum((centre - other) ** 2))

    var_auto = max(ssd(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx)
    denom = max(p.var_noise, var_auto, 1e-300)
    out = np.empty((2 * R + 1, 2 * R + 1))
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            out[R + dy, R + dx] = math.exp(-ssd(dy, dx) / denom)
    return out


# --------------------------------------------------------------------------- U-SURF

def haar_responses(ii: IntegralImage, s: int):
    """Haar dx, dy with half-size ``s`` at every pixel of the integral image's source.

    dx = sum(rows [y-s, y+s), cols [x, x+s)) - sum(rows [y-s, y+s), cols [x-s, x))
    dy = sum(rows [y, y+s), cols [x-s, x+s)) - sum(rows [y-s, y), cols [x-s, x+s))
    Pixels closer than ``s`` to the border get zero.
    """
    T = ii.table
    H, W = T.shape[0] - 1, T.shape[1] - 1
    dx = np.zeros((H, W))
    dy = np.zeros((H, W))
    ys = slice(s, H - s + 1)
    xs = slice(s, W - s + 1)
    hh = H - 2 * s + 1
    ww = W - 2 * s + 1
    if hh <= 0 or ww <= 0:
        return dx, dy

    def box(r0, c0, r1, c1):
        # r*, c* are offsets relative to (y, x) for the valid grid
        return (T[s + r1:s + r1 + hh, s + c1:s + c1 + ww] - T[s + r0:s + r0 + hh, s + c1:s + c1 + ww]
                - T[s + r1:s + r1 + hh, s + c0:s + c0 + ww] + T[s + r0:s + r0 + hh, s + c0:s + c0 + ww])

    dx[ys, xs] = box(-s, 0, s, s) - box(-s, -s, s, 0)
    dy[ys, xs] = box(0, -s, s, s) - box(-s, -s, 0, s)
    return dx, dy


def build_usurf(img: ImageLike, p: SurfParams = SurfParams()) -> FeatureVolume:
    arr = as_array(img)
    B = p.block
    half = B // 2
    _check_size(arr, B + 1, "U-SURF")
    h, w = arr.shape
    s = p.haar_scale
    pad = half + s
    # mean removal keeps integral-image sums small; Haar responses are unaffected
    Q = np.pad(arr - arr.mean(), pad, mode="edge")
    dx, dy = haar_responses(IntegralImage(Q), s)
    tables = [IntegralImage(np.abs(dx)).table, IntegralImage(np.abs(dy)).table]
    n = p.subregion_size
    out = np.zeros((h, w, p.subregion_grid, p.subregion_grid, 2))
    for i in range(p.subregion_grid):
        r0 = pad - half + n * i
        for j in range(p.subregion_grid):
            c0 = pad - half + n * j
            for t, T in enumerate(tables):
                out[:, :, i, j, t] = (T[r0 + n:r0 + n + h, c0 + n:c0 + n + w]
                                      - T[r0:r0 + h, c0 + n:c0 + n + w]
                                      - T[r0 + n:r0 + n + h, c0:c0 + w]
                                      + T[r0:r0 + h, c0:c0 + w])
    vol = out.reshape(h, w, 2 * p.subregion_grid ** 2)
    if p.normalize:
        vol = l2_normalize(vol)
    return FeatureVolume(vol, "FSURF")


# --------------------------------------------------------------------------- dispatch

DESCRIPTOR_MEASURES = ("CFOG", "FHOG", "FLSS", "FSURF")


def default_params(measure: str):
    return {"CFOG": CfogParams(), "FHOG": HogParams(),
            "FLSS": LssParams(), "FSURF": SurfParams()}[measure]


def build_volume(img: ImageLike, measure: str, params=None) -> FeatureVolume:
    measure = measure.upper()
    if measure not in DESCRIPTOR_MEASURES:
        raise ParameterError(f"unknown descriptor measure {measure!r}")
    if params is None:
        params = default_params(measure)
    builder = {"CFOG": build_cfog, "FHOG": build_pixelwise_hog,
               "FLSS": build_lss, "FSURF": build_usurf}[measure]
    return builder(img, params)


def footprint_radius(measure: str, params=None) -> int:
    """How far (pixels) an input change can reach in the output volume."""
    measure = measure.upper()
    if params is None:
        params = default_params(measure)
    if measure == "CFOG":
        radius = int(math.ceil(3 * params.sigma)) + 1
        if params.presmooth_sigma > 0:
            radius += int(math.ceil(3 * params.presmooth_sigma))
        return radius
    if measure == "FHOG":
        return 2 * params.cell_size + 1
    if measure == "FSURF":
        return params.block // 2 + params.haar_scale
    if measure == "FLSS":
        return params.region_radius + params.patch_radius + 1
    raise ParameterError(f"unknown descriptor measure {measure!r}")


def dump_volume(vol: FeatureVolume, directory, prefix: str = "channel") -> list:
    """Write each channel as an 8-bit PGM (linear min/max stretch) for inspection."""
    from .raster_io import rescale_to_unit, write_image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(vol.dims):
        path = directory / f"{prefix}_{k:02d}.pgm"
        write_image(path, rescale_to_unit(vol.data[:, :, k]))
        paths.append(path)
    return paths
