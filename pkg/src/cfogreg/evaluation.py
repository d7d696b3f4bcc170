"""Synthetic multimodal pairs with exact ground truth, and the precision /
noise / parameter sweeps run over them."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import descriptors
from .descriptors import CfogParams
from .imagecore import Image, ParameterError
from .matching import (ControlPoint, HarrisParams, detect_harris, match_points)
from .registration import reject_outliers
from .similarity import MatchConfig

log = logging.getLogger(__name__)

CORRECT_THRESHOLD = 1.5
SCENES = ("checkerboard", "blobs", "filtered-noise", "shapes", "loaded")
RADIOMETRIC = ("identity", "inversion", "gamma", "quantize", "region-remap")
TRANSFORMS = ("translation", "affine", "piecewise")


# --------------------------------------------------------------------------- ground truth

@dataclass(frozen=True)
class GroundTruth:
    """Reference pixel -> sensed pixel mapping.

    ``kind`` is translation (params = (tx, ty)), affine (params = a, b, c, d, e, f
    with sx = a*x + b*y + c, sy = d*x + e*y + f), piecewise (params = affine for
    x < split, then the extra x-shear (kx, ky) applied right of ``split``), or
    projective (params = 3x3 row-major homography).
    """

    kind: str
    params: Tuple[float, ...]
    split: float = 0.0

    def apply(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        p = self.params
        if self.kind == "translation":
            return x + p[0], y + p[1]
        if self.kind == "affine":
            return p[0] * x + p[1] * y + p[2], p[3] * x + p[4] * y + p[5]
        if self.kind == "piecewise":
            sx = p[0] * x + p[1] * y + p[2]
            sy = p[3] * x + p[4] * y + p[5]
            right = np.maximum(x - self.split, 0.0)
            return sx + p[6] * right, sy + p[7] * right
        if self.kind == "projective":
            w = p[6] * x + p[7] * y + p[8]
            return (p[0] * x + p[1] * y + p[2]) / w, (p[3] * x + p[4] * y + p[5]) / w
        raise ParameterError(f"unknown transform kind {self.kind!r}")

    def inverse_apply(self, sx, sy):
        sx = np.asarray(sx, dtype=np.float64)
        sy = np.asarray(sy, dtype=np.float64)
        p = self.params
        if self.kind == "translation":
            return sx - p[0], sy - p[1]
        if self.kind in ("affine", "piecewise"):
            left = _invert_affine(p[:6])
            x, y = _apply_affine(left, sx, sy)
            if self.kind == "affine":
                return x, y
            right_aff = (p[0] + p[6], p[1], p[2] - p[6] * self.split,
                         p[3] + p[7], p[4], p[5] - p[7] * self.split)
            xr, yr = _apply_affine(_invert_affine(right_aff), sx, sy)
            use_right = x >= self.split
            return np.where(use_right, xr, x), np.where(use_right, yr, y)
        if self.kind == "projective":
            H = np.linalg.inv(np.asarray(p).reshape(3, 3)).ravel()
            w = H[6] * sx + H[7] * sy + H[8]
            return (H[0] * sx + H[1] * sy + H[2]) / w, (H[3] * sx + H[4] * sy + H[5]) / w
        raise ParameterError(f"unknown transform kind {self.kind!r}")

    def errors(self, cps: Sequence[ControlPoint]) -> np.ndarray:
        if not cps:
            return np.zeros(0)
        arr = np.array([[c.ref_x, c.ref_y, c.sen_x, c.sen_y] for c in cps])
        tx, ty = self.apply(arr[:, 0], arr[:, 1])
        return np.hypot(arr[:, 2] - tx, arr[:, 3] - ty)


def _apply_affine(p, x, y):
    return p[0] * x + p[1] * y + p[2], p[3] * x + p[4] * y + p[5]


def _invert_affine(p):
    a, b, c, d, e, f = p
    det = a * e - b * d
    ia, ib, id_, ie = e / det, -b / det, -d / det, a / det
    return (ia, ib, -(ia * c + ib * f), id_, ie, -(id_ * c + ie * f))


# --------------------------------------------------------------------------- scenes

def _stretch(a: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    lo, hi = np.percentile(a, [lo_pct, hi_pct])
    if hi <= lo:
        return np.zeros_like(a)
    return np.clip((a - lo) / (hi - lo), 0.0, 1.0)


def make_scene(kind: str, shape: Tuple[int, int], rng: np.random.Generator,
               cell: int = 16, image: Optional[np.ndarray] = None) -> np.ndarray:
    """Base scene in [0, 1]."""
    h, w = shape
    if kind == "checkerboard":
        yy, xx = np.mgrid[0:h, 0:w]
        return np.where(((yy // cell) + (xx // cell)) % 2 == 0, 0.8, 0.2)
    if kind == "blobs":
        out = np.zeros(shape)
        yy, xx = np.mgrid[0:h, 0:w]
        count = max(8, h * w // 600)
        for _ in range(count):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            s = rng.uniform(3.0, 12.0)
            out += rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        return _stretch(out)
    if kind == "filtered-noise":
        return _stretch(ndimage.gaussian_filter(rng.standard_normal(shape), 2.5, mode="reflect"))
    if kind == "shapes":
        out = np.full(shape, rng.uniform(0.3, 0.6))
        yy, xx = np.mgrid[0:h, 0:w]
        count = max(12, h * w // 900)
        for _ in range(count):
            level = rng.uniform(0.0, 1.0)
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            if rng.random() < 0.5:
                hh, ww = rng.uniform(4, 24), rng.uniform(4, 24)
                mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
            else:
                r = rng.uniform(4, 16)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            out[mask] = level
        # low-amplitude texture so flat regions are not perfectly flat
        out = out + 0.05 * ndimage.gaussian_filter(rng.standard_normal(shape), 1.5)
        return np.clip(ndimage.gaussian_filter(out, 0.7), 0.0, 1.0)
    if kind == "loaded":
        if image is None:
            raise ParameterError("scene 'loaded' needs an image")
        src = np.asarray(image, dtype=np.float64)
        if src.shape[0] < h or src.shape[1] < w:
            raise ParameterError("loaded scene is smaller than the requested canvas")
        return src[:h, :w].copy()
    raise ParameterError(f"unknown scene {kind!r}; choose from {SCENES}")


def apply_radiometric(a: np.ndarray, kind: str, rng: np.random.Generator,
                      gamma: float = 0.4, levels: int = 8, regions: int = 2) -> np.ndarray:
    a = np.clip(a, 0.0, 1.0)
    if kind == "identity":
        return a.copy()
    if kind == "inversion":
        return 1.0 - a
    if kind == "gamma":
        return a ** gamma
    if kind == "quantize":
        return np.minimum(np.floor(a * levels), levels - 1) / (levels - 1)
    if kind == "region-remap":
        # each tile of a regions x regions partition gets its own intensity map
        out = np.empty_like(a)
        h, w = a.shape
        ys = np.linspace(0, h, regions + 1).astype(int)
        xs = np.linspace(0, w, regions + 1).astype(int)
        for i in range(regions):
            for j in range(regions):
                tile = a[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
                choice = rng.integers(3)
                if choice == 0:
                    mapped = 1.0 - tile
                elif choice == 1:
                    mapped = tile ** rng.uniform(0.3, 0.6)
                else:
                    mapped = 1.0 - tile ** rng.uniform(1.5, 2.5)
                out[ys[i]:ys[i + 1], xs[j]:xs[j + 1]] = mapped
        return out
    raise ParameterError(f"unknown radiometric map {kind!r}; choose from {RADIOMETRIC}")


# --------------------------------------------------------------------------- pairs

@dataclass(frozen=True)
class SyntheticPairSpec:
    scene: str = "shapes"
    size: int = 256
    radiometric: str = "identity"
    gamma: float = 0.4
    levels: int = 8
    noise_var: float = 0.0
    transform: str = "translation"
    shift: Tuple[float, float] = (0.0, 0.0)
    affine: Tuple[float, ...] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    piecewise_shear: Tuple[float, float] = (0.0, 0.02)
    cell: int = 16
    image: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.scene not in SCENES:
            raise ParameterError(f"unknown scene {self.scene!r}")
        if self.radiometric not in RADIOMETRIC:
            raise ParameterError(f"unknown radiometric map {self.radiometric!r}")
        if self.transform not in TRANSFORMS:
            raise ParameterError(f"unknown transform {self.transform!r}")
        if not 0.0 <= self.noise_var <= 0.01:
            raise ParameterError("noise_var must lie in [0, 0.01]")
        if self.size < 16:
            raise ParameterError("size must be >= 16")

    def truth(self) -> GroundTruth:
        if self.transform == "translation":
            return GroundTruth("translation", tuple(float(v) for v in self.shift))
        if self.transform == "affine":
            return GroundTruth("affine", tuple(float(v) for v in self.affine))
        return GroundTruth("piecewise", tuple(float(v) for v in self.affine + tuple(self.piecewise_shear)),
                           split=self.size / 2.0)


@dataclass
class SyntheticPair:
    ref: Image
    sen: Image
    truth: GroundTruth
    clean_sen: np.ndarray
    unit_noise: np.ndarray
    spec: SyntheticPairSpec

    def with_noise(self, variance: float) -> "SyntheticPair":
        """Same pair with the stored unit noise field rescaled to ``variance``."""
        sen = self.clean_sen + math.sqrt(variance) * self.unit_noise
        return replace(self, sen=Image(sen), spec=replace(self.spec, noise_var=variance))


def generate_pair(spec: SyntheticPairSpec, seed: int) -> SyntheticPair:
    """Reference = base scene; sensed = warp(radiometric(base)) + N(0, noise_var)."""
    rng = np.random.default_rng(seed)
    truth = spec.truth()
    n = spec.size
    # margin covers every point the inverse warp can reach
    corners_x = np.array([0, n - 1, 0, n - 1], dtype=np.float64)
    corners_y = np.array([0, 0, n - 1, n - 1], dtype=np.float64)
    bx, by = truth.inverse_apply(corners_x, corners_y)
    reach = max(0.0, float(np.max(np.abs(np.concatenate([bx - corners_x, by - corners_y])))))
    margin = int(math.ceil(reach)) + 4
    canvas = make_scene(spec.scene, (n + 2 * margin, n + 2 * margin), rng, spec.cell,
                        None if spec.image is None else np.asarray(spec.image))
    ref = canvas[margin:margin + n, margin:margin + n].copy()
    mapped = apply_radiometric(canvas, spec.radiometric, rng, spec.gamma, spec.levels)

    integral_shift = (truth.kind == "translation"
                      and all(float(v).is_integer() for v in truth.params))
    if integral_shift:
        tx, ty = int(truth.params[0]), int(truth.params[1])
        sen = mapped[margin - ty:margin - ty + n, margin - tx:margin - tx + n].copy()
    else:
        sy, sx = np.mgrid[0:n, 0:n].astype(np.float64)
        rx, ry = truth.inverse_apply(sx, sy)
        sen = ndimage.map_coordinates(mapped, [ry + margin, rx + margin], order=1, mode="nearest")
    unit_noise = rng.standard_normal((n, n))
    noisy = sen + math.sqrt(spec.noise_var) * unit_noise if spec.noise_var > 0 else sen.copy()
    return SyntheticPair(Image(ref), Image(noisy), truth, sen, unit_noise, spec)


# --------------------------------------------------------------------------- sweeps

@dataclass
class PrecisionReport:
    measure: str
    template_size: int
    noise_var: float
    correct: int
    total: int
    seconds_per_match: float = 0.0
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass(frozen=True)
class SweepConfig:
    search_radius: int = 10
    harris: HarrisParams = HarrisParams(grid_n=4, k_per_chip=2, chip_size=40)
    jobs: int = 1


def _descriptor_params(measure: str, cfog: Optional[CfogParams]):
    if measure == "CFOG" and cfog is not None:
        return cfog
    return None


def evaluate_pairs(pairs: Sequence[SyntheticPair], measure: str, template_size: int,
                   sweep: SweepConfig = SweepConfig(), cfog: Optional[CfogParams] = None,
                   points_cache=None, volume_cache=None) -> PrecisionReport:
    """Detect, match and score one (measure, template size) cell over ``pairs``."""
    measure = measure.upper()
    cfg = MatchConfig(template_size=template_size, search_radius=sweep.search_radius, measure=measure)
    correct = total = 0
    elapsed = 0.0
    for k, pair in enumerate(pairs):
        pts = None if points_cache is None else points_cache.get(k)
        if pts is None:
            pts = detect_harris(pair.ref, sweep.harris, margin=cfg.half + cfg.search_radius)
        volumes = None
        params = _descriptor_params(measure, cfog)
        if measure in descriptors.DESCRIPTOR_MEASURES:
            key = (k, measure, params)
            if volume_cache is not None and key in volume_cache:
                volumes = volume_cache[key]
            else:
                volumes = (descriptors.build_volume(pair.ref, measure, params),
                           descriptors.build_volume(pair.sen, measure, params))
                if volume_cache is not None:
                    volume_cache[key] = volumes
        t0 = time.perf_counter()
        res = match_points(pair.ref, pair.sen, pts, cfg, descriptor_params=params,
                           jobs=sweep.jobs, volumes=volumes)
        elapsed += time.perf_counter() - t0
        errs = pair.truth.errors(res.cps)
        correct += int(np.sum(errs < CORRECT_THRESHOLD))
        total += len(res.cps)
    noise = pairs[0].spec.noise_var if pairs else 0.0
    return PrecisionReport(measure, template_size, noise, correct, total,
                           elapsed / total if total else 0.0)


def _points_for(pairs, sweep: SweepConfig, margin: int):
    return {k: detect_harris(p.ref, sweep.harris, margin=margin) for k, p in enumerate(pairs)}


def run_precision_sweep(pairs: Sequence[SyntheticPair], measures: Sequence[str],
                        template_sizes: Sequence[int], sweep: SweepConfig = SweepConfig()) -> List[PrecisionReport]:
    """Precision per (measure, template size); one shared point set per pair
    (border margin taken from the largest template) so sizes are comparable."""
    margin = max(template_sizes) // 2 + sweep.search_radius
    points = _points_for(pairs, sweep, margin)
    volumes: dict = {}
    reports = []
    for measure in measures:
        for size in template_sizes:
            reports.append(evaluate_pairs(pairs, measure, size, sweep,
                                          points_cache=points, volume_cache=volumes))
    return reports


NOISE_TEMPLATE = 81
NOISE_VARIANCES = (0.0, 0.0025, 0.005, 0.0075, 0.01)


def run_noise_sweep(pairs: Sequence[SyntheticPair], measures: Sequence[str],
                    variances: Sequence[float] = NOISE_VARIANCES, template_size: int = NOISE_TEMPLATE,
                    sweep: SweepConfig = SweepConfig()) -> List[PrecisionReport]:
    """Precision per (variance, measure) at a fixed template size.

    Each pair's stored unit noise field is rescaled for every variance, so the
    levels differ only in noise amplitude.
    """
    if any(not 0.0 <= v <= 0.01 for v in variances):
        raise ParameterError("noise variances must lie in [0, 0.01]")
    margin = template_size // 2 + sweep.search_radius
    points = _points_for(pairs, sweep, margin)
    reports = []
    for v in variances:
        noisy = [p.with_noise(v) for p in pairs]
        for measure in measures:
            reports.append(evaluate_pairs(noisy, measure, template_size, sweep, points_cache=points))
    return reports


PARAM_SIGMAS = (0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6)
PARAM_MS = (4, 6, 8, 9, 10, 12, 14, 16, 18)
REFERENCE_CFOG = CfogParams(m=9, sigma=0.8)


@dataclass
class ParamStudyReport:
    sigma_cells: List[Tuple[float, PrecisionReport]]
    m_cells: List[Tuple[int, PrecisionReport]]
    reference: CfogParams = REFERENCE_CFOG

    @property
    def best_sigma(self) -> float:
        return max(self.sigma_cells, key=lambda c: (c[1].precision, -abs(c[0] - self.reference.sigma)))[0]

    @property
    def best_m(self) -> int:
        return max(self.m_cells, key=lambda c: (c[1].precision, -abs(c[0] - self.reference.m)))[0]


def run_param_study(pairs: Sequence[SyntheticPair], template_size: int = 101,
                    sigmas: Sequence[float] = PARAM_SIGMAS, ms: Sequence[int] = PARAM_MS,
                    sweep: SweepConfig = SweepConfig()) -> ParamStudyReport:
    """CFOG sigma sweep at m=9 and m sweep at sigma=0.8, as two one-factor studies."""
    margin = template_size // 2 + sweep.search_radius
    points = _points_for(pairs, sweep, margin)
    sigma_cells = []
    for s in sigmas:
        rep = evaluate_pairs(pairs, "CFOG", template_size, sweep, CfogParams(m=9, sigma=s), points)
        sigma_cells.append((float(s), rep))
    m_cells = []
    for m in ms:
        rep = evaluate_pairs(pairs, "CFOG", template_size, sweep, CfogParams(m=m, sigma=0.8), points)
        m_cells.append((int(m), rep))
    return ParamStudyReport(sigma_cells, m_cells)


def descriptor_timings(img, repeats: int = 3, measures=descriptors.DESCRIPTOR_MEASURES) -> Dict[str, float]:
    """Best-of-``repeats`` wall-clock volume build time per descriptor."""
    out = {}
    for measure in measures:
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            descriptors.build_volume(img, measure)
            best = min(best, time.perf_counter() - t0)
        out[measure] = best
    return out


# --------------------------------------------------------------------------- suites

def synthetic_suite(seed: int, size: int = 256, count: int = 8,
                    radiometric: Sequence[str] = ("inversion", "gamma", "quantize", "region-remap"),
                    scenes: Sequence[str] = ("shapes", "filtered-noise"), noise_var: float = 0.0,
                    max_shift: int = 5) -> List[SyntheticPair]:
    """Deterministic suite cycling through scenes x radiometric maps with random integer shifts."""
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(count):
        scene = scenes[k % len(scenes)]
        radio = radiometric[(k // len(scenes)) % len(radiometric)]
        shift = tuple(float(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        spec = SyntheticPairSpec(scene=scene, size=size, radiometric=radio, noise_var=noise_var,
                                 shift=shift)
        pairs.append(generate_pair(spec, int(rng.integers(2 ** 31))))
    return pairs


# --------------------------------------------------------------------------- check points

def fit_projective(src: np.ndarray, dst: np.ndarray) -> GroundTruth:
    """Least-squares homography (normalized DLT) mapping src -> dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        raise ParameterError("projective fit needs at least 4 point pairs")

    def norm(p):
        c = p.mean(axis=0)
        s = math.sqrt(2) / max(np.mean(np.hypot(*(p - c).T)), 1e-12)
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])

    Ts, Td = norm(src), norm(dst)
    ps = (Ts @ np.column_stack([src, np.ones(len(src))]).T).T
    pd = (Td @ np.column_stack([dst, np.ones(len(dst))]).T).T
    rows = []
    for (x, y, _), (u, v, _) in zip(ps, pd):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    H = H / H[2, 2]
    return GroundTruth("projective", tuple(float(v) for v in H.ravel()))


def bootstrap_check_points(ref, sen, n_check: int = 50, template_size: int = 201,
                           search_radius: int = 10, rmse_threshold: float = 1.0,
                           harris: HarrisParams = HarrisParams(), jobs: int = 1):
    """Ground truth for a real pair without one: large-template CFOG matching,
    cubic outlier rejection, keep the ``n_check`` lowest-residual CPs and fit a
    projective model to them. Returns (GroundTruth, check CPs)."""
    cfg = MatchConfig(template_size=template_size, search_radius=search_radius, measure="CFOG")
    pts = detect_harris(ref, harris, margin=cfg.half + search_radius)
    res = match_points(ref, sen, pts, cfg, jobs=jobs)
    report = reject_outliers(res.cps, order=3, rmse_threshold=rmse_threshold)
    best = sorted(report.survivors, key=lambda c: c.residual)[:n_check]
    src = np.array([[c.ref_x, c.ref_y] for c in best])
    dst = np.array([[c.sen_x, c.sen_y] for c in best])
    return fit_projective(src, dst), best


# --------------------------------------------------------------------------- output

def reports_to_csv(reports: Sequence[PrecisionReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["measure", "template_size", "noise_var", "correct", "total", "precision"])
    for r in reports:
        w.writerow([r.measure, r.template_size, f"{r.noise_var:.6g}", r.correct, r.total,
                    f"{r.precision:.6f}"])
    return buf.getvalue()


def timings_to_csv(reports: Sequence[PrecisionReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["measure", "template_size", "noise_var", "seconds_per_match"])
    for r in reports:
        w.writerow([r.measure, r.template_size, f"{r.noise_var:.6g}", f"{r.seconds_per_match:.6g}"])
    return buf.getvalue()


def mean_precision(reports: Sequence[PrecisionReport], measure: str, **match) -> float:
    sel = [r for r in reports if r.measure == measure
           and all(getattr(r, k) == v for k, v in match.items())]
    correct = sum(r.correct for r in sel)
    total = sum(r.total for r in sel)
    return correct / total if total else 0.0


def summary_lines(precision: Sequence[PrecisionReport], noise: Sequence[PrecisionReport],
                  study: Optional[ParamStudyReport], suite: str, seed: int, count: int) -> List[str]:
    """Human-readable digest of a bench run (no timings, so it is reproducible)."""
    lines = [f"suite={suite} seed={seed} pairs={count}", "", "precision by template size:"]
    for r in precision:
        lines.append(f"  {r.measure:<6} t={r.template_size:<4d} {r.correct:>5d}/{r.total:<5d} "
                     f"precision={r.precision:.4f}")
    lines += ["", "precision by noise variance:"]
    for r in noise:
        lines.append(f"  {r.measure:<6} v={r.noise_var:<7.4g} {r.correct:>5d}/{r.total:<5d} "
                     f"precision={r.precision:.4f}")
    if study is not None:
        lines += ["", f"CFOG parameter study: best sigma={study.best_sigma:g}, best m={study.best_m} "
                      f"(reference sigma={study.reference.sigma:g}, m={study.reference.m})"]
    return lines
