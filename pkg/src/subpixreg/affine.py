"""Affine and rigid transform algebra plus spline-based image warping.

A transform maps a point ``p`` to ``A @ (p - c) + c + t`` where ``c`` is the
pivot (usually the image center).  Angles are radians internally; the
``theta_deg`` accessors exist for reporting.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .spline import CoefficientGrid, prefilter, spline_eval
from .utils.validation import check_image

__all__ = [
    "AffineTransform",
    "MotionModel",
    "apply_point",
    "compose",
    "invert",
    "rescale_to_level",
    "warp_image",
    "image_center",
]

SINGULAR_TOL = 1e-9


@dataclass(frozen=True)
class AffineTransform:
    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def translation(cls, tx, ty):
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def rigid(cls, tx=0.0, ty=0.0, theta=0.0):
        """Rotation by ``theta`` radians followed by translation (tx, ty).

        With y pointing down, positive angles turn +x toward +y.
        """
        c, s = np.cos(theta), np.sin(theta)
        return cls(float(c), float(-s), float(s), float(c), float(tx), float(ty))

    @classmethod
    def from_matrix(cls, linear, translation):
        (a11, a12), (a21, a22) = np.asarray(linear, dtype=np.float64)
        tx, ty = np.asarray(translation, dtype=np.float64)
        return cls(float(a11), float(a12), float(a21), float(a22), float(tx), float(ty))

    @property
    def linear(self):
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def translation_vector(self):
        return np.array([self.tx, self.ty])

    @property
    def det(self):
        return self.a11 * self.a22 - self.a12 * self.a21

    @property
    def theta(self):
        """Rotation angle of the linear part in radians."""
        return float(np.arctan2(self.a21 - self.a12, self.a11 + self.a22))

    @property
    def theta_deg(self):
        return float(np.degrees(self.theta))

    def to_rigid_params(self):
        return self.tx, self.ty, self.theta

    def is_identity(self, tol=0.0):
        ident = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        return bool(np.all(np.abs(np.array(self.as_tuple()) - ident) <= tol))

    def as_tuple(self):
        return (self.a11, self.a12, self.a21, self.a22, self.tx, self.ty)


class MotionModel(enum.Enum):
    """Parameterizations the registration engine can optimize."""

    TRANSLATION = "translation"
    RIGID = "rigid"
    AFFINE = "affine"

    @classmethod
    def coerce(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown motion model {value!r}; expected one of {names}") from None

    @property
    def n_params(self):
        return {"translation": 2, "rigid": 3, "affine": 6}[self.value]

    def to_params(self, T):
        if self is MotionModel.TRANSLATION:
            return np.array([T.tx, T.ty])
        if self is MotionModel.RIGID:
            return np.array([T.tx, T.ty, T.theta])
        return np.array(T.as_tuple())

    def from_params(self, p):
        p = np.asarray(p, dtype=np.float64)
        if self is MotionModel.TRANSLATION:
            return AffineTransform.translation(p[0], p[1])
        if self is MotionModel.RIGID:
            return AffineTransform.rigid(p[0], p[1], p[2])
        return AffineTransform(*map(float, p[:6]))

    def coordinate_jacobian(self, p, dx, dy):
        """Derivatives of the mapped coordinates with respect to the parameters.

        ``dx, dy`` are the pivot-relative source coordinates ``p - c``.
        Returns ``(dqx, dqy)``, each of shape ``(n_params,) + dx.shape``.
        """
        zeros = np.zeros_like(dx)
        ones = np.ones_like(dx)
        if self is MotionModel.TRANSLATION:
            return np.stack([ones, zeros]), np.stack([zeros, ones])
        if self is MotionModel.RIGID:
            c, s = np.cos(p[2]), np.sin(p[2])
            return (
                np.stack([ones, zeros, -s * dx - c * dy]),
                np.stack([zeros, ones, c * dx - s * dy]),
            )
        return (
            np.stack([dx, dy, zeros, zeros, ones, zeros]),
            np.stack([zeros, zeros, dx, dy, zeros, ones]),
        )


def image_center(shape):
    """Pivot of an image of the given (h, w) shape, in (x, y) pixels."""
    h, w = shape
    return ((w - 1) / 2.0, (h - 1) / 2.0)


def apply_point(T, x, y, center=(0.0, 0.0)):
    """Map point(s) ``(x, y)`` through ``T`` about ``center``."""
    cx, cy = center
    dx = np.asarray(x, dtype=np.float64) - cx
    dy = np.asarray(y, dtype=np.float64) - cy
    xo = T.a11 * dx + T.a12 * dy + cx + T.tx
    yo = T.a21 * dx + T.a22 * dy + cy + T.ty
    if np.ndim(xo) == 0:
        return float(xo), float(yo)
    return xo, yo


def compose(T2, T1):
    """Transform equivalent to applying ``T1`` then ``T2`` (same pivot)."""
    A = T2.linear @ T1.linear
    t = T2.linear @ T1.translation_vector + T2.translation_vector
    return AffineTransform.from_matrix(A, t)


def invert(T):
    det = T.det
    if abs(det) <= SINGULAR_TOL:
        raise ValueError(f"transform is singular (det={det:.3g})")
    A_inv = np.array([[T.a22, -T.a12], [-T.a21, T.a11]]) / det
    return AffineTransform.from_matrix(A_inv, -A_inv @ T.translation_vector)


def rescale_to_level(T, delta_levels):
    """Carry ``T`` across pyramid levels; ``+1`` moves one level finer.

    The linear part is scale free; translations scale by ``2**delta_levels``.
    """
    f = 2.0 ** delta_levels
    return AffineTransform(T.a11, T.a12, T.a21, T.a22, T.tx * f, T.ty * f)


def warp_image(img, T, center=None, coeffs=None, fill=0.0):
    """Resample ``img`` at ``T(p)`` for every output pixel ``p``.

    Returns ``(warped, valid)``; ``valid`` is false where ``T(p)`` falls
    outside the source domain, and those samples are set to ``fill``.
    """
    arr = check_image(img, min_size=8)
    if coeffs is None:
        coeffs = prefilter(arr)
    elif not isinstance(coeffs, CoefficientGrid):
        coeffs = CoefficientGrid(np.asarray(coeffs, dtype=np.float64))
    h, w = arr.shape
    if center is None:
        center = image_center(arr.shape)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    qx, qy = apply_point(T, xx, yy, center)
    valid = (qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)
    out = np.full(arr.shape, float(fill))
    if valid.any():
        out[valid] = spline_eval(coeffs, qx[valid], qy[valid])
    return out, valid
