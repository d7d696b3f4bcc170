"""Control-point detection: grid-chip Harris points on the reference, template
matching in the sensed image around the geo-predicted location."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from . import descriptors
from .imagecore import (Image, ImageLike, ParameterError, as_array, compute_gradients,
                        gaussian_convolve, geo_predict)
from .similarity import (MatchConfig, MatchSkipped, SimilarityMap, mi_match, ncc_match,
                         ssd_match_fft, subpixel_refine)

log = logging.getLogger(__name__)

# whole-image descriptor volumes up to this many pixels, per-point chips beyond
CHIP_MODE_PIXELS = 4_000_000
HARRIS_WINDOW_SIGMA = 1.5


@dataclass(frozen=True)
class HarrisParams:
    grid_n: int = 10
    k_per_chip: int = 2
    chip_size: int = 60
    harris_k: float = 0.04
    min_response: float = 1e-6
    min_separation: float = 8.0

    def __post_init__(self):
        if self.grid_n < 1:
            raise ParameterError(f"harris.grid_n must be >= 1, got {self.grid_n}")
        if self.k_per_chip < 1:
            raise ParameterError(f"harris.k_per_chip must be >= 1, got {self.k_per_chip}")
        if self.chip_size < 16:
            raise ParameterError(f"harris.chip_size must be >= 16, got {self.chip_size}")
        if self.min_response < 0 or self.min_separation < 0:
            raise ParameterError("harris.min_response and harris.min_separation must be >= 0")


@dataclass(frozen=True)
class FeaturePoint:
    x: int
    y: int
    response: float


@dataclass
class ControlPoint:
    ref_x: float
    ref_y: float
    sen_x: float
    sen_y: float
    score: float
    residual: float = math.nan

    @property
    def ref_xy(self) -> Tuple[float, float]:
        return (self.ref_x, self.ref_y)

    @property
    def sen_xy(self) -> Tuple[float, float]:
        return (self.sen_x, self.sen_y)


@dataclass
class MatchResult:
    cps: List[ControlPoint] = field(default_factory=list)
    skipped: List[Tuple[FeaturePoint, str]] = field(default_factory=list)

    @property
    def skipped_count(self) -> int:
        return len(self.skipped)


# --------------------------------------------------------------------------- Harris

def harris_response(arr: np.ndarray, k: float = 0.04, window_sigma: float = HARRIS_WINDOW_SIGMA) -> np.ndarray:
    g = compute_gradients(arr)
    sxx = gaussian_convolve(g.gx * g.gx, window_sigma)
    syy = gaussian_convolve(g.gy * g.gy, window_sigma)
    sxy = gaussian_convolve(g.gx * g.gy, window_sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def grid_nodes(length: int, n: int, margin: int) -> List[int]:
    """n evenly spaced node coordinates over [margin, length - 1 - margin]."""
    lo, hi = margin, length - 1 - margin
    if hi < lo:
        return []
    if n == 1:
        return [int(round((lo + hi) / 2))]
    return [int(round(v)) for v in np.linspace(lo, hi, n)]


def detect_harris(img: ImageLike, p: HarrisParams = HarrisParams(), margin: int = 0) -> List[FeaturePoint]:
    """Evenly distributed Harris points, at most ``k_per_chip`` per grid chip.

    Chips of ``chip_size`` pixels are centred on an n x n lattice of nodes spanning
    the usable area; points closer than ``margin`` to the border are dropped.
    """
    arr = as_array(img)
    h, w = arr.shape
    if h < p.chip_size or w < p.chip_size:
        return []
    context = int(math.ceil(3 * HARRIS_WINDOW_SIGMA)) + 2
    half = p.chip_size // 2
    points: List[FeaturePoint] = []
    seen = set()
    for ny in grid_nodes(h, p.grid_n, margin):
        for nx in grid_nodes(w, p.grid_n, margin):
            y0, y1 = max(0, ny - half), min(h, ny - half + p.chip_size)
            x0, x1 = max(0, nx - half), min(w, nx - half + p.chip_size)
            cy0, cy1 = max(0, y0 - context), min(h, y1 + context)
            cx0, cx1 = max(0, x0 - context), min(w, x1 + context)
            resp = harris_response(arr[cy0:cy1, cx0:cx1], p.harris_k)
            peaks = resp == ndimage.maximum_filter(resp, size=3, mode="nearest")
            resp = resp[y0 - cy0:y1 - cy0, x0 - cx0:x1 - cx0]
            peaks = peaks[y0 - cy0:y1 - cy0, x0 - cx0:x1 - cx0] & (resp >= p.min_response)
            ys, xs = np.nonzero(peaks)
            ys = ys + y0
            xs = xs + x0
            inside = ((xs >= margin) & (xs <= w - 1 - margin)
                      & (ys >= margin) & (ys <= h - 1 - margin))
            ys, xs = ys[inside], xs[inside]
            vals = resp[ys - y0, xs - x0]
            order = np.lexsort((xs, ys, -vals))
            kept: List[FeaturePoint] = []
            for i in order:
                x, y = int(xs[i]), int(ys[i])
                if any((x - q.x) ** 2 + (y - q.y) ** 2 < p.min_separation ** 2 for q in kept):
                    continue
                kept.append(FeaturePoint(x, y, float(vals[i])))
                if len(kept) == p.k_per_chip:
                    break
            for q in kept:
                if (q.x, q.y) not in seen:
                    seen.add((q.x, q.y))
                    points.append(q)
    return points


# --------------------------------------------------------------------------- matching

def predict_center(ref: ImageLike, sen: ImageLike, pt) -> Tuple[float, float]:
    ref_geo = ref.geo if isinstance(ref, Image) else None
    sen_geo = sen.geo if isinstance(sen, Image) else None
    if ref_geo is not None and sen_geo is not None:
        return geo_predict(ref_geo, sen_geo, pt)
    return float(pt[0]), float(pt[1])


def _crop(arr: np.ndarray, cx: int, cy: int, radius: int):
    """Window of ``radius`` around (cx, cy), clipped; returns (array, x0, y0)."""
    h, w = arr.shape
    x0, y0 = max(0, cx - radius), max(0, cy - radius)
    x1, y1 = min(w, cx + radius + 1), min(h, cy + radius + 1)
    return arr[y0:y1, x0:x1], x0, y0


class _VolumeSource:
    """Descriptor volumes for one image pair: whole-image or built per chip."""

    def __init__(self, ref: np.ndarray, sen: np.ndarray, measure: str, params, chip_mode: bool,
                 volumes=None):
        self.ref = ref
        self.sen = sen
        self.measure = measure
        self.params = params
        self.chip_mode = chip_mode and volumes is None
        self.margin = descriptors.footprint_radius(measure, params)
        if volumes is not None:
            self.vref, self.vsen = volumes
        elif not chip_mode:
            self.vref = descriptors.build_volume(ref, measure, params)
            self.vsen = descriptors.build_volume(sen, measure, params)

    def match(self, center, sen_center, cfg: MatchConfig) -> SimilarityMap:
        if not self.chip_mode:
            return ssd_match_fft(self.vref, self.vsen, center, cfg, sen_center)
        # bounds first, so out-of-image points never trigger a chip build
        _check_bounds(self.ref.shape, self.sen.shape, center, sen_center, cfg)
        rchip, rx0, ry0 = _crop(self.ref, center[0], center[1], cfg.half + self.margin)
        schip, sx0, sy0 = _crop(self.sen, sen_center[0], sen_center[1],
                                cfg.half + cfg.search_radius + self.margin)
        vref = descriptors.build_volume(rchip, self.measure, self.params)
        vsen = descriptors.build_volume(schip, self.measure, self.params)
        return ssd_match_fft(vref, vsen, (center[0] - rx0, center[1] - ry0), cfg,
                             (sen_center[0] - sx0, sen_center[1] - sy0))


def _check_bounds(ref_shape, sen_shape, center, sen_center, cfg: MatchConfig):
    half, ext = cfg.half, cfg.half + cfg.search_radius
    cx, cy = center
    sx, sy = sen_center
    if not (cx - half >= 0 and cy - half >= 0 and cx + half < ref_shape[1] and cy + half < ref_shape[0]):
        raise MatchSkipped(f"template at ({cx}, {cy}) needs a {half}px margin in the reference")
    if not (sx - ext >= 0 and sy - ext >= 0 and sx + ext < sen_shape[1] and sy + ext < sen_shape[0]):
        raise MatchSkipped(f"search window at ({sx}, {sy}) needs a {ext}px margin in the sensed image")


def match_points(ref: ImageLike, sen: ImageLike, points, cfg: MatchConfig = MatchConfig(),
                 descriptor_params=None, jobs: int = 1,
                 chip_mode: Optional[bool] = None, volumes=None) -> MatchResult:
    """Template-match every feature point; results keep input order for any ``jobs``.

    ``volumes`` may carry prebuilt (reference, sensed) descriptor volumes to reuse.
    """
    ref_arr = as_array(ref)
    sen_arr = as_array(sen)
    measure = cfg.measure
    if chip_mode is None:
        chip_mode = max(ref_arr.size, sen_arr.size) > CHIP_MODE_PIXELS
    source = None
    if measure in descriptors.DESCRIPTOR_MEASURES:
        source = _VolumeSource(ref_arr, sen_arr, measure, descriptor_params, chip_mode, volumes)

    def one(pt: FeaturePoint):
        center = (int(pt.x), int(pt.y))
        px, py = predict_center(ref, sen, center)
        sen_center = (int(round(px)), int(round(py)))
        try:
            if source is not None:
                smap = source.match(center, sen_center, cfg)
            elif measure == "NCC":
                smap = ncc_match(ref_arr, sen_arr, center, cfg, sen_center)
            else:
                smap = mi_match(ref_arr, sen_arr, center, cfg, sen_center)
        except MatchSkipped as exc:
            return None, str(exc)
        if smap.degenerate:
            return None, "degenerate template"
        dx, dy = subpixel_refine(smap)
        return ControlPoint(float(center[0]), float(center[1]),
                            sen_center[0] + dx, sen_center[1] + dy, smap.peak_score), None

    points = list(points)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one, points))
    else:
        outcomes = [one(pt) for pt in points]

    result = MatchResult()
    for pt, (cp, reason) in zip(points, outcomes):
        if cp is None:
            result.skipped.append((pt, reason))
        else:
            result.cps.append(cp)
    if result.skipped:
        log.info("%d of %d points skipped", len(result.skipped), len(points))
    return result


# --------------------------------------------------------------------------- CSV

CSV_HEADER = ["ref_x", "ref_y", "sen_x", "sen_y", "score", "residual"]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def write_cps(path, cps) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for cp in cps:
            writer.writerow([_fmt(cp.ref_x), _fmt(cp.ref_y), _fmt(cp.sen_x), _fmt(cp.sen_y),
                             f"{cp.score:.9g}", _fmt(cp.residual)])


def read_cps(path) -> List[ControlPoint]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        cps = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields")
            cps.append(ControlPoint(*(float(v) for v in row)))
    return cps
