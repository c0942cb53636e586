"""Subpixel image registration and drift-stability analysis.

Two registration engines share a common image model:

* ``TRURegistration`` / :func:`register_tru` - coarse-to-fine least-squares
  matching over a cubic-spline pyramid.
* ``XREGRegistration`` / :func:`register_xreg` - per-box correlation with
  parabolic subpixel peak fitting and a median over boxes.
"""

__version__ = "0.1.0"

from .affine import AffineTransform, MotionModel, warp_image
from .image import RegionSpec, extract_region, image_stats, load_pgm, save_pgm
from .optimize import MLConfig, minimize
from .spline import build_pyramid, prefilter, wavelet_decompose
from .tru import RegistrationResult, TruConfig, TRURegistration, register_tru
from .xreg import BoxSpec, XREGRegistration, register_xreg

__all__ = [
    "AffineTransform",
    "BoxSpec",
    "MLConfig",
    "MotionModel",
    "RegionSpec",
    "RegistrationResult",
    "TRURegistration",
    "TruConfig",
    "XREGRegistration",
    "build_pyramid",
    "extract_region",
    "image_stats",
    "load_pgm",
    "minimize",
    "prefilter",
    "register_tru",
    "register_xreg",
    "save_pgm",
    "wavelet_decompose",
    "warp_image",
]
