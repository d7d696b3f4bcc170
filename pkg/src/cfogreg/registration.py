"""Polynomial mapping models and iterative largest-residual outlier rejection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .imagecore import ParameterError
from .matching import ControlPoint

log = logging.getLogger(__name__)

TERM_COUNTS = {1: 3, 2: 6, 3: 10}


class FitError(ValueError):
    pass


def monomial_exponents(order: int) -> List[Tuple[int, int]]:
    """(i, j) exponent pairs of x**i * y**j, grouped by total degree."""
    return [(deg - j, j) for deg in range(order + 1) for j in range(deg + 1)]


@dataclass(frozen=True)
class PolynomialModel:
    """Maps reference pixel coords to sensed pixel coords.

    Inputs are normalized as ((x - cx) / scale, (y - cy) / scale) before the
    monomials are evaluated; ``center`` and ``scale`` travel with the coefficients.
    """

    order: int
    coeffs_x: Tuple[float, ...]
    coeffs_y: Tuple[float, ...]
    center: Tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        if self.order not in TERM_COUNTS:
            raise ParameterError(f"polynomial order must be 1, 2 or 3, got {self.order}")
        n = TERM_COUNTS[self.order]
        if len(self.coeffs_x) != n or len(self.coeffs_y) != n:
            raise ParameterError(f"order {self.order} needs {n} coefficients per coordinate")
        if not all(math.isfinite(c) for c in self.coeffs_x + self.coeffs_y):
            raise ParameterError("polynomial coefficients must be finite")

    def design(self, x, y) -> np.ndarray:
        return design_matrix(x, y, self.order, self.center, self.scale)

    def apply(self, x, y):
        A = self.design(np.atleast_1d(x), np.atleast_1d(y))
        return A @ np.asarray(self.coeffs_x), A @ np.asarray(self.coeffs_y)


def design_matrix(x, y, order, center=(0.0, 0.0), scale=1.0) -> np.ndarray:
    u = (np.asarray(x, dtype=np.float64) - center[0]) / scale
    v = (np.asarray(y, dtype=np.float64) - center[1]) / scale
    return np.stack([u ** i * v ** j for i, j in monomial_exponents(order)], axis=-1)


def _normalization(x: np.ndarray, y: np.ndarray):
    cx = 0.5 * (x.min() + x.max())
    cy = 0.5 * (y.min() + y.max())
    scale = 0.5 * max(x.max() - x.min(), y.max() - y.min())
    return (float(cx), float(cy)), float(scale) if scale > 0 else 1.0


def _arrays(cps: Sequence[ControlPoint]):
    a = np.array([[c.ref_x, c.ref_y, c.sen_x, c.sen_y] for c in cps], dtype=np.float64).reshape(-1, 4)
    return a[:, 0], a[:, 1], a[:, 2], a[:, 3]


def fit_polynomial(cps: Sequence[ControlPoint], order: int = 3) -> PolynomialModel:
    """Least-squares fit of sensed coords as polynomials in reference coords."""
    if order not in TERM_COUNTS:
        raise ParameterError(f"polynomial order must be 1, 2 or 3, got {order}")
    n_terms = TERM_COUNTS[order]
    if len(cps) < n_terms:
        raise FitError(f"order-{order} fit needs at least {n_terms} control points, got {len(cps)}")
    rx, ry, sx, sy = _arrays(cps)
    center, scale = _normalization(rx, ry)
    A = design_matrix(rx, ry, order, center, scale)
    rank = np.linalg.matrix_rank(A)
    if rank < n_terms:
        raise FitError(f"design matrix is rank deficient ({rank} < {n_terms}): reference "
                       f"points are collinear or too clustered for an order-{order} model")
    coef, *_ = np.linalg.lstsq(A, np.column_stack([sx, sy]), rcond=None)
    return PolynomialModel(order, tuple(float(c) for c in coef[:, 0]),
                           tuple(float(c) for c in coef[:, 1]), center, scale)


def residuals(model: PolynomialModel, cps: Sequence[ControlPoint]) -> np.ndarray:
    rx, ry, sx, sy = _arrays(cps)
    px, py = model.apply(rx, ry)
    return np.hypot(px - sx, py - sy)


def rmse(res: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(res)))) if len(res) else 0.0


@dataclass
class RejectionReport:
    survivors: List[ControlPoint]
    removed: List[Tuple[ControlPoint, float]] = field(default_factory=list)
    final_rmse: float = math.nan
    iterations: int = 0
    converged: bool = False
    rmse_history: List[float] = field(default_factory=list)
    model: PolynomialModel = None

    def summary_lines(self) -> List[str]:
        lines = [f"converged={'yes' if self.converged else 'no'}",
                 f"iterations={self.iterations}",
                 f"survivors={len(self.survivors)}",
                 f"removed={len(self.removed)}",
                 f"final_rmse={self.final_rmse:.6f}"]
        for k, value in enumerate(self.rmse_history):
            lines.append(f"rmse[{k}]={value:.6f}")
        for cp, res in self.removed:
            lines.append(f"removed ref=({cp.ref_x:.6f},{cp.ref_y:.6f}) "
                         f"sen=({cp.sen_x:.6f},{cp.sen_y:.6f}) residual={res:.6f}")
        return lines


def reject_outliers(cps: Sequence[ControlPoint], order: int = 3, rmse_threshold: float = 3.5,
                    min_cps: int = None) -> RejectionReport:
    """Fit, stop if RMSE < threshold, else drop the single largest residual; repeat.

    Stops unconverged when another removal would leave fewer than ``min_cps``
    points. Survivors carry their final residuals.
    """
    n_terms = TERM_COUNTS.get(order)
    if n_terms is None:
        raise ParameterError(f"polynomial order must be 1, 2 or 3, got {order}")
    if min_cps is None:
        min_cps = n_terms
    if min_cps < n_terms:
        raise ParameterError(f"min_cps must be >= {n_terms} for an order-{order} model")
    if rmse_threshold <= 0:
        raise ParameterError("rmse_threshold must be > 0")
    current = [ControlPoint(c.ref_x, c.ref_y, c.sen_x, c.sen_y, c.score, c.residual) for c in cps]
    report = RejectionReport(survivors=current)
    if len(current) < min_cps:
        raise FitError(f"need at least {min_cps} control points, got {len(current)}")

    for _ in range(len(cps) + 1):
        model = fit_polynomial(current, order)
        res = residuals(model, current)
        err = rmse(res)
        report.rmse_history.append(err)
        report.model = model
        for cp, r in zip(current, res):
            cp.residual = float(r)
        if err < rmse_threshold:
            report.converged = True
            break
        if len(current) - 1 < min_cps:
            log.warning("outlier rejection stopped at %d points with RMSE %.3f", len(current), err)
            break
        worst = int(np.argmax(res))  # first index wins ties
        report.removed.append((current.pop(worst), float(res[worst])))
        report.iterations += 1
    report.survivors = current
    report.final_rmse = report.rmse_history[-1]
    return report
