"""Piecewise-affine (TIN) mapping and inverse-mapping rectification."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .imagecore import ImageLike, as_array
from .matching import ControlPoint
from .registration import PolynomialModel

log = logging.getLogger(__name__)

DUPLICATE_TOL = 1e-6
MIN_AREA = 1e-9
INSIDE_TOL = 1e-12
EDGE_TOL = 1e-6


class TinError(ValueError):
    pass


# --------------------------------------------------------------------------- Delaunay

def _incircle(tri_pts: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Signed in-circle determinant for CCW triangles (T, 3, 2) vs point p; > 0 means inside."""
    d = tri_pts - p
    sq = np.einsum("tij,tij->ti", d, d)
    ax, ay, bx, by, cx, cy = d[:, 0, 0], d[:, 0, 1], d[:, 1, 0], d[:, 1, 1], d[:, 2, 0], d[:, 2, 1]
    return (ax * (by * sq[:, 2] - sq[:, 1] * cy)
            - ay * (bx * sq[:, 2] - sq[:, 1] * cx)
            + sq[:, 0] * (bx * cy - by * cx))


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def bowyer_watson(points: np.ndarray) -> np.ndarray:
    """Delaunay triangles (CCW index triples) of distinct, not-all-collinear 2-D points."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = max(float((hi - lo).max()) / 2.0, 1e-300)
    work = (pts - center) / scale
    big = 1e4
    super_pts = np.array([[0.0, 2 * big], [-2 * big, -big], [2 * big, -big]])
    allp = np.vstack([work, super_pts])
    tris = [np.array([n, n + 1, n + 2])]
    tri_arr = np.array(tris)
    alive = np.array([True])

    for i in range(n):
        p = allp[i]
        idx = np.flatnonzero(alive)
        det = _incircle(allp[tri_arr[idx]], p)
        bad = idx[det > 1e-12]
        if bad.size == 0:
            # p sits on circumcircles only; fall back to the containing triangle
            for t in idx:
                a, b, c = allp[tri_arr[t]]
                if _orient(a, b, p) >= 0 and _orient(b, c, p) >= 0 and _orient(c, a, p) >= 0:
                    bad = np.array([t])
                    break
        edges = {}
        for t in bad:
            a, b, c = tri_arr[t]
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                if key in edges:
                    edges[key] = None
                else:
                    edges[key] = e
        alive[bad] = False
        new = [(e[0], e[1], i) for e in edges.values() if e is not None]
        tri_arr = np.vstack([tri_arr, np.array(new, dtype=np.int64)])
        alive = np.concatenate([alive, np.ones(len(new), dtype=bool)])

    final = tri_arr[alive]
    final = final[(final < n).all(axis=1)]
    return final.astype(np.int64)


# --------------------------------------------------------------------------- TIN

@dataclass
class Tin:
    ref: np.ndarray        # (N, 2) reference coords of the vertices
    sen: np.ndarray        # (N, 2) sensed coords of the vertices
    triangles: np.ndarray  # (T, 3) vertex indices, CCW in the reference frame
    affines: np.ndarray    # (T, 6): sen_x = a*x + b*y + c, sen_y = d*x + e*y + f
    dropped: List[int] = field(default_factory=list)

    @property
    def vertices(self) -> List[ControlPoint]:
        return [ControlPoint(float(r[0]), float(r[1]), float(s[0]), float(s[1]), 0.0)
                for r, s in zip(self.ref, self.sen)]

    def apply_affine(self, t: int, x, y):
        a, b, c, d, e, f = self.affines[t]
        return a * x + b * y + c, d * x + e * y + f

    def locate(self, x, y) -> np.ndarray:
        """Index of the containing triangle per point (-1 outside); ties go to the lower index."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        out = np.full(x.shape, -1, dtype=np.int64)
        for t in range(len(self.triangles)):
            todo = out < 0
            if not todo.any():
                break
            inside = _inside(self.ref[self.triangles[t]], x, y)
            out[todo & inside] = t
        return out

    def apply(self, x, y, fallback: Optional[PolynomialModel] = None):
        """Sensed coords for reference points; outside the hull uses ``fallback`` (else NaN)."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        tri = self.locate(x, y)
        sx = np.full(x.shape, np.nan)
        sy = np.full(x.shape, np.nan)
        for t in np.unique(tri[tri >= 0]):
            sel = tri == t
            sx[sel], sy[sel] = self.apply_affine(t, x[sel], y[sel])
        outside = tri < 0
        if fallback is not None and outside.any():
            sx[outside], sy[outside] = fallback.apply(x[outside], y[outside])
        return sx, sy, tri


def _inside(v: np.ndarray, x, y) -> np.ndarray:
    """Barycentric containment test, tolerant of points on edges."""
    (x0, y0), (x1, y1), (x2, y2) = v
    den = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
    l0 = ((y1 - y2) * (x - x2) + (x2 - x1) * (y - y2)) / den
    l1 = ((y2 - y0) * (x - x2) + (x0 - x2) * (y - y2)) / den
    l2 = 1.0 - l0 - l1
    return (l0 >= -INSIDE_TOL) & (l1 >= -INSIDE_TOL) & (l2 >= -INSIDE_TOL)


def triangle_affine(ref_tri: np.ndarray, sen_tri: np.ndarray) -> np.ndarray:
    """Exact affine taking the 3 reference vertices onto the 3 sensed vertices."""
    p0 = ref_tri[0]
    s0 = sen_tri[0]
    P = np.column_stack([ref_tri[1] - p0, ref_tri[2] - p0])
    S = np.column_stack([sen_tri[1] - s0, sen_tri[2] - s0])
    J = S @ np.linalg.inv(P)
    c = s0 - J @ p0
    return np.array([J[0, 0], J[0, 1], c[0], J[1, 0], J[1, 1], c[1]])


def build_tin(cps: Sequence[ControlPoint]) -> Tin:
    ref = np.array([[c.ref_x, c.ref_y] for c in cps], dtype=np.float64).reshape(-1, 2)
    sen = np.array([[c.sen_x, c.sen_y] for c in cps], dtype=np.float64).reshape(-1, 2)
    keep, dropped = [], []
    for i, p in enumerate(ref):
        if keep and np.min(np.hypot(*(ref[keep] - p).T)) <= DUPLICATE_TOL:
            dropped.append(i)
        else:
            keep.append(i)
    if dropped:
        log.info("TIN: dropped %d duplicate control points", len(dropped))
    if len(keep) < 3:
        raise TinError(f"TIN needs at least 3 distinct control points, got {len(keep)}")
    ref, sen = ref[keep], sen[keep]
    span = max(float(np.ptp(ref, axis=0).max()), 1.0)
    sv = np.linalg.svd(ref - ref.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * span:
        raise TinError("TIN control points are collinear")
    tris = bowyer_watson(ref)
    good = []
    for tri in tris:
        a, b, c = ref[tri]
        if 0.5 * abs(_orient(a, b, c)) > MIN_AREA:
            good.append(tri)
    if not good:
        raise TinError("TIN triangulation produced no usable triangles")
    tris = np.array(good, dtype=np.int64)
    affines = np.array([triangle_affine(ref[t], sen[t]) for t in tris])
    return Tin(ref, sen, tris, affines, dropped)


# --------------------------------------------------------------------------- rectification

@dataclass
class RectifyResult:
    image: np.ndarray     # (H, W) in the reference frame
    coverage: np.ndarray  # True where the sensed sample was in bounds
    in_tin: np.ndarray    # True where a triangle (not the fallback) supplied the mapping

    @property
    def unmapped_fraction(self) -> float:
        return float(1.0 - self.coverage.mean())


def bilinear_sample(arr: np.ndarray, x: np.ndarray, y: np.ndarray, fill: float = 0.0):
    """Bilinear interpolation; samples outside [0, W-1] x [0, H-1] get ``fill``."""
    h, w = arr.shape
    # affine roundoff can land a border pixel a hair outside the frame
    valid = ((x >= -EDGE_TOL) & (x <= w - 1 + EDGE_TOL) & (y >= -EDGE_TOL) & (y <= h - 1 + EDGE_TOL)
             & np.isfinite(x) & np.isfinite(y))
    xs = np.clip(np.where(valid, x, 0.0), 0, w - 1)
    ys = np.clip(np.where(valid, y, 0.0), 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = arr[y0, x0] * (1.0 - fx) + arr[y0, x1] * fx
    bot = arr[y1, x0] * (1.0 - fx) + arr[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    out[~valid] = fill
    return out, valid


def tin_coordinate_grid(tin: Tin, out_shape: Tuple[int, int], fallback: Optional[PolynomialModel] = None,
                        rows: Optional[Tuple[int, int]] = None):
    """Sensed coords for every reference-frame pixel (inverse mapping).

    ``rows`` restricts the grid to output rows [r0, r1); results per pixel do
    not depend on the band split.
    """
    h, w = out_shape
    r0, r1 = (0, h) if rows is None else rows
    bh = r1 - r0
    sx = np.full((bh, w), np.nan)
    sy = np.full((bh, w), np.nan)
    owner = np.full((bh, w), -1, dtype=np.int64)
    for t, tri in enumerate(tin.triangles):
        v = tin.ref[tri]
        x0 = max(0, int(np.floor(v[:, 0].min())))
        x1 = min(w - 1, int(np.ceil(v[:, 0].max())))
        y0 = max(r0, int(np.floor(v[:, 1].min())))
        y1 = min(r1 - 1, int(np.ceil(v[:, 1].max())))
        if x1 < x0 or y1 < y0:
            continue
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        sub = (slice(y0 - r0, y1 + 1 - r0), slice(x0, x1 + 1))
        sel = _inside(v, xx, yy) & (owner[sub] < 0)
        if not sel.any():
            continue
        mx, my = tin.apply_affine(t, xx[sel], yy[sel])
        sx[sub][sel] = mx
        sy[sub][sel] = my
        owner[sub][sel] = t
    outside = owner < 0
    if fallback is not None and outside.any():
        yy, xx = np.nonzero(outside)
        fx, fy = fallback.apply(xx.astype(np.float64), (yy + r0).astype(np.float64))
        sx[outside] = fx
        sy[outside] = fy
    return sx, sy, owner >= 0


def rectify(sen: ImageLike, tin: Tin, fallback: Optional[PolynomialModel], out_shape, fill: float = 0.0,
            jobs: int = 1) -> RectifyResult:
    """Resample the sensed image into the reference frame through the TIN.

    With ``jobs`` > 1 the output is processed in row bands on a thread pool;
    the result is identical to the single-threaded one.
    """
    arr = as_array(sen)
    h = int(out_shape[0])

    def band(rows):
        sx, sy, in_tin = tin_coordinate_grid(tin, out_shape, fallback, rows)
        image, coverage = bilinear_sample(arr, sx, sy, fill)
        return image, coverage, in_tin

    if jobs > 1 and h > 1:
        edges = np.linspace(0, h, min(jobs, h) + 1).astype(int)
        bands = list(zip(edges[:-1], edges[1:]))
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(band, bands))
    else:
        parts = [band((0, h))]
    return RectifyResult(*(np.concatenate(p, axis=0) for p in zip(*parts)))


# --------------------------------------------------------------------------- sidecar

def write_model(path, poly: Optional[PolynomialModel], tin: Optional[Tin]) -> None:
    lines = []
    if poly is not None:
        lines += ["[polynomial]",
                  f"order = {poly.order}",
                  f"center = {float(poly.center[0])!r} {float(poly.center[1])!r}",
                  f"scale = {float(poly.scale)!r}",
                  "coeffs_x = " + " ".join(repr(float(c)) for c in poly.coeffs_x),
                  "coeffs_y = " + " ".join(repr(float(c)) for c in poly.coeffs_y),
                  ""]
    if tin is not None:
        lines += ["[tin]", f"vertices = {len(tin.ref)}"]
        for k, (r, s) in enumerate(zip(tin.ref, tin.sen)):
            lines.append(f"v {k} {float(r[0])!r} {float(r[1])!r} {float(s[0])!r} {float(s[1])!r}")
        lines.append(f"triangles = {len(tin.triangles)}")
        for k, (tri, aff) in enumerate(zip(tin.triangles, tin.affines)):
            lines.append(f"t {k} {tri[0]} {tri[1]} {tri[2]} " + " ".join(repr(float(a)) for a in aff))
        lines.append("")
    Path(path).write_text("\n".join(lines))


def read_model(path):
    poly_fields = {}
    ref, sen, tris, affs = [], [], [], []
    section = None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        if section == "polynomial":
            key, _, value = line.partition("=")
            poly_fields[key.strip()] = value.split()
        elif section == "tin":
            parts = line.split()
            if parts[0] == "v":
                ref.append([float(parts[2]), float(parts[3])])
                sen.append([float(parts[4]), float(parts[5])])
            elif parts[0] == "t":
                tris.append([int(p) for p in parts[2:5]])
                affs.append([float(p) for p in parts[5:11]])
    poly = None
    if poly_fields:
        poly = PolynomialModel(int(poly_fields["order"][0]),
                               tuple(float(c) for c in poly_fields["coeffs_x"]),
                               tuple(float(c) for c in poly_fields["coeffs_y"]),
                               tuple(float(c) for c in poly_fields["center"]),
                               float(poly_fields["scale"][0]))
    tin = None
    if tris:
        tin = Tin(np.array(ref), np.array(sen), np.array(tris, dtype=np.int64), np.array(affs))
    return poly, tin
