"""Multimodal image registration with dense structural feature volumes.

Template matching runs on per-pixel descriptor volumes (CFOG, pixel-wise HOG,
LSS, U-SURF) with an FFT sum-of-squared-differences search, followed by
polynomial outlier rejection and piecewise-linear rectification.
"""

from .descriptors import (CfogParams, FeatureVolume, HogParams, LssParams, SurfParams,
                          build_cfog, build_lss, build_pixelwise_hog, build_usurf, build_volume)
from .imagecore import GeoTransform, Image, ParameterError
from .matching import ControlPoint, HarrisParams, detect_harris, match_points
from .registration import FitError, PolynomialModel, fit_polynomial, reject_outliers
from .similarity import MatchConfig, MatchSkipped, SimilarityMap, ssd_match_fft, ssd_match_spatial
from .tin import Tin, TinError, build_tin, rectify

__version__ = "0.1.0"

__all__ = [
    "CfogParams", "ControlPoint", "FeatureVolume", "FitError", "GeoTransform", "HarrisParams",
    "HogParams", "Image", "LssParams", "MatchConfig", "MatchSkipped", "ParameterError",
    "PolynomialModel", "SimilarityMap", "SurfParams", "Tin", "TinError", "build_cfog",
    "build_lss", "build_pixelwise_hog", "build_tin", "build_usurf", "build_volume",
    "detect_harris", "fit_polynomial", "match_points", "rectify", "reject_outliers",
    "ssd_match_fft", "ssd_match_spatial",
]
