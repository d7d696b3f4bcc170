"""Template matching scores over a square search range.

Offsets ``v = (vx, vy)`` are displacements of the sensed match relative to the
sensed search centre: a template centred at reference pixel ``c`` is compared
with the sensed window centred at ``c_sen + v``. Every map stores "higher is
better" scores, so SSD is stored negated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft

from .descriptors import FeatureVolume
from .imagecore import ImageLike, ParameterError, as_array

MEASURES = ("CFOG", "FHOG", "FLSS", "FSURF", "NCC", "MI")


class MatchSkipped(Exception):
    """The template or search footprint does not fit inside an input."""


@dataclass(frozen=True)
class MatchConfig:
    template_size: int = 101
    search_radius: int = 10
    measure: str = "CFOG"
    mi_bins: int = 32

    def __post_init__(self):
        if self.template_size < 9 or self.template_size % 2 == 0:
            raise ParameterError(f"template_size must be odd and >= 9, got {self.template_size}")
        if self.search_radius < 1:
            raise ParameterError(f"search_radius must be >= 1, got {self.search_radius}")
        if self.mi_bins < 4:
            raise ParameterError(f"mi_bins must be >= 4, got {self.mi_bins}")
        object.__setattr__(self, "measure", self.measure.upper())
        if self.measure not in MEASURES:
            raise ParameterError(f"unknown measure {self.measure!r}; choose from {MEASURES}")

    @property
    def half(self) -> int:
        return self.template_size // 2


@dataclass(eq=False)
class SimilarityMap:
    scores: np.ndarray  # (2r+1, 2r+1), row = vy + r, col = vx + r
    measure_id: str
    peak: Tuple[int, int] = (0, 0)
    subpixel: Tuple[float, float] = (0.0, 0.0)
    refined: bool = False
    degenerate: bool = False

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("similarity scores must be finite")
        self.peak = pick_peak(self.scores)
        self.subpixel = (float(self.peak[0]), float(self.peak[1]))

    @property
    def radius(self) -> int:
        return self.scores.shape[0] // 2

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    def score_at(self, vx: int, vy: int) -> float:
        r = self.radius
        return float(self.scores[vy + r, vx + r])

    @property
    def peak_score(self) -> float:
        return self.score_at(*self.peak)


def _offset_order(radius: int) -> np.ndarray:
    """Flat indices of the (2r+1)^2 grid sorted by offset magnitude, then row-major."""
    vy, vx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    mag2 = (vx * vx + vy * vy).ravel()
    return np.lexsort((np.arange(mag2.size), mag2))


def pick_peak(scores: np.ndarray) -> Tuple[int, int]:
    """Argmax with deterministic ties: smallest |v| first, then row-major."""
    r = scores.shape[0] // 2
    flat = scores.ravel()
    best = flat.max()
    tied = np.flatnonzero(flat == best)
    order = _offset_order(r)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    idx = tied[np.argmin(rank[tied])]
    row, col = divmod(int(idx), scores.shape[1])
    return col - r, row - r


# --------------------------------------------------------------------------- SSD

def _footprints(shape_ref, shape_sen, center, sen_center, half, radius):
    cx, cy = center
    sx, sy = sen_center
    h1, w1 = shape_ref[:2]
    h2, w2 = shape_sen[:2]
    if not (cx - half >= 0 and cy - half >= 0 and cx + half < w1 and cy + half < h1):
        raise MatchSkipped(f"template at ({cx}, {cy}) needs a {half}px margin in the reference")
    ext = half + radius
    if not (sx - ext >= 0 and sy - ext >= 0 and sx + ext < w2 and sy + ext < h2):
        raise MatchSkipped(f"search window at ({sx}, {sy}) needs a {ext}px margin in the sensed image")
    tmpl = (slice(cy - half, cy + half + 1), slice(cx - half, cx + half + 1))
    search = (slice(sy - ext, sy + ext + 1), slice(sx - ext, sx + ext + 1))
    return tmpl, search


def _check_volumes(d1: FeatureVolume, d2: FeatureVolume):
    if d1.dims != d2.dims:
        raise ParameterError(f"volume dims differ: {d1.dims} vs {d2.dims}")


def _int_point(pt) -> Tuple[int, int]:
    return int(round(pt[0])), int(round(pt[1]))


def ssd_match_spatial(d1: FeatureVolume, d2: FeatureVolume, center, cfg: MatchConfig,
                      sen_center=None) -> SimilarityMap:
    """Direct evaluation of -sum((D1(x) - D2(x + v))^2) over the template window."""
    _check_volumes(d1, d2)
    center = _int_point(center)
    sen_center = center if sen_center is None else _int_point(sen_center)
    half, r = cfg.half, cfg.search_radius
    tmpl, search = _footprints(d1.data.shape, d2.data.shape, center, sen_center, half, r)
    t = d1.data[tmpl]
    s = d2.data[search]
    n = cfg.template_size
    scores = np.empty((2 * r + 1, 2 * r + 1))
    for iy in range(2 * r + 1):
        for ix in range(2 * r + 1):
            diff = t - s[iy:iy + n, ix:ix + n]
            scores[iy, ix] = -np.vdot(diff, diff)
    return SimilarityMap(scores, d1.name or "SSD")


def ssd_match_fft(d1: FeatureVolume, d2: FeatureVolume, center, cfg: MatchConfig,
                  sen_center=None) -> SimilarityMap:
    """Frequency-domain SSD.

    -SSD(v) = 2*corr(T, S)(v) - corr(ones, S^2)(v) - sum(T^2), each correlation
    computed with zero-padded real FFTs of size >= template + search extent,
    so no circular wrap reaches the valid lags.
    """
    _check_volumes(d1, d2)
    center = _int_point(center)
    sen_center = center if sen_center is None else _int_point(sen_center)
    half, r = cfg.half, cfg.search_radius
    tmpl, search = _footprints(d1.data.shape, d2.data.shape, center, sen_center, half, r)
    t = d1.data[tmpl]
    s = d2.data[search]
    n = cfg.template_size
    L = n + 2 * r
    size = sfft.next_fast_len(L, real=True)
    shape = (size, size)

    ft = sfft.rfft2(t, s=shape, axes=(0, 1))
    fs = sfft.rfft2(s, s=shape, axes=(0, 1))
    cross = sfft.irfft2(np.sum(np.conj(ft) * fs, axis=2), s=shape)

    s2 = np.einsum("ijk,ijk->ij", s, s)
    fmask = sfft.rfft2(np.ones((n, n)), s=shape)
    energy = sfft.irfft2(np.conj(fmask) * sfft.rfft2(s2, s=shape), s=shape)

    m = 2 * r + 1
    scores = 2.0 * cross[:m, :m] - energy[:m, :m] - np.vdot(t, t)

    # FFT rounding can reorder near-ties; re-score the candidates exactly
    scale = max(1.0, float(np.abs(scores).max()))
    cand = np.flatnonzero(scores.ravel() >= scores.max() - 1e-9 * scale)
    if cand.size > 1:
        exact = np.empty(cand.size)
        for i, idx in enumerate(cand):
            iy, ix = divmod(int(idx), m)
            diff = t - s[iy:iy + n, ix:ix + n]
            exact[i] = -np.vdot(diff, diff)
        scores.ravel()[cand] = exact
    return SimilarityMap(scores, d1.name or "SSD")


# --------------------------------------------------------------------------- intensity baselines

def _intensity_windows(ref, sen, center, sen_center, cfg):
    a = as_array(ref)
    b = as_array(sen)
    center = _int_point(center)
    sen_center = center if sen_center is None else _int_point(sen_center)
    tmpl, search = _footprints(a.shape, b.shape, center, sen_center, cfg.half, cfg.search_radius)
    t = a[tmpl]
    windows = sliding_window_view(b[search], (cfg.template_size, cfg.template_size))
    return t, windows


def ncc_match(ref: ImageLike, sen: ImageLike, center, cfg: MatchConfig,
              sen_center=None) -> SimilarityMap:
    """Zero-mean normalized cross-correlation; flat sensed windows score 0."""
    t, windows = _intensity_windows(ref, sen, center, sen_center, cfg)
    m = windows.shape[0]
    tz = t - t.mean()
    tnorm = np.sqrt(np.vdot(tz, tz))
    if tnorm <= 1e-12 * max(1.0, float(np.abs(t).max())):
        return SimilarityMap(np.zeros((m, m)), "NCC", degenerate=True)
    w = windows - windows.mean(axis=(2, 3), keepdims=True)
    num = np.einsum("ijkl,kl->ij", w, tz)
    wnorm = np.sqrt(np.einsum("ijkl,ijkl->ij", w, w))
    den = wnorm * tnorm
    scores = np.zeros((m, m))
    ok = wnorm > 1e-12
    scores[ok] = np.clip(num[ok] / den[ok], -1.0, 1.0)
    return SimilarityMap(scores, "NCC")


def _bin_index(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - lo) * (bins / (hi - lo))).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def mutual_information_from_indices(ia: np.ndarray, ib: np.ndarray, bins: int) -> float:
    joint = np.bincount((ia * bins + ib).ravel(), minlength=bins * bins).reshape(bins, bins)
    pj = joint / joint.sum()
    return _entropy(pj.sum(axis=1)) + _entropy(pj.sum(axis=0)) - _entropy(pj.ravel())


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """MI (nats) of two equally-shaped windows, each binned over its own range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ia = _bin_index(a, float(a.min()), float(a.max()), bins)
    ib = _bin_index(b, float(b.min()), float(b.max()), bins)
    return mutual_information_from_indices(ia, ib, bins)


def mi_match(ref: ImageLike, sen: ImageLike, center, cfg: MatchConfig,
             sen_center=None) -> SimilarityMap:
    """MI over the search range. Sensed intensities are binned over the whole
    search window's range so every offset shares one quantization."""
    t, windows = _intensity_windows(ref, sen, center, sen_center, cfg)
    bins = cfg.mi_bins
    m = windows.shape[0]
    ia = _bin_index(t, float(t.min()), float(t.max()), bins)
    lo, hi = float(np.min(windows)), float(np.max(windows))
    scores = np.empty((m, m))
    for iy in range(m):
        for ix in range(m):
            ib = _bin_index(windows[iy, ix], lo, hi, bins)
            scores[iy, ix] = mutual_information_from_indices(ia, ib, bins)
    degenerate = float(t.max()) == float(t.min())
    return SimilarityMap(scores, "MI", degenerate=degenerate)


# --------------------------------------------------------------------------- sub-pixel

def parabola_offset(s_minus: float, s0: float, s_plus: float) -> float:
    """Vertex offset of the parabola through (-1, s_minus), (0, s0), (1, s_plus), clamped to +-0.5."""
    den = s_minus - 2.0 * s0 + s_plus
    if abs(den) < 1e-12:
        return 0.0
    delta = (s_minus - s_plus) / (2.0 * den)
    return float(min(0.5, max(-0.5, delta)))


def subpixel_refine(smap: SimilarityMap) -> Tuple[float, float]:
    """Separable quadratic fit around the peak; border peaks stay integer (``refined=False``)."""
    px, py = smap.peak
    r = smap.radius
    if abs(px) >= r or abs(py) >= r:
        smap.subpixel = (float(px), float(py))
        smap.refined = False
        return smap.subpixel
    row, col = py + r, px + r
    s = smap.scores
    dx = parabola_offset(s[row, col - 1], s[row, col], s[row, col + 1])
    dy = parabola_offset(s[row - 1, col], s[row, col], s[row + 1, col])
    smap.subpixel = (px + dx, py + dy)
    smap.refined = True
    return smap.subpixel


# --------------------------------------------------------------------------- export

def write_map_text(path, smap: SimilarityMap) -> None:
    r = smap.radius
    with open(path, "w") as fh:
        fh.write(f"# measure={smap.measure_id} radius={r} peak={smap.peak[0]},{smap.peak[1]} "
                 f"subpixel={smap.subpixel[0]:.6f},{smap.subpixel[1]:.6f}\n")
        for row in smap.scores:
            fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def write_map_heatmap(path, smap: SimilarityMap) -> None:
    from .raster_io import rescale_to_unit, write_image

    write_image(path, rescale_to_unit(smap.scores))
