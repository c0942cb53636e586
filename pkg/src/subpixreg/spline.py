"""Cubic B-spline image model and the L2 spline pyramid.

The interpolating cubic spline of an image is represented by its B-spline
coefficients (``CoefficientGrid``).  Pyramid levels are built with the
least-squares (L2) optimal cubic-spline reduce filter, truncated to a
finite symmetric kernel; ``expand`` is the matching spline interpolator.
All filters use whole-sample mirror boundary extension.
"""

from dataclasses import dataclass
from functools import lru_cache
from math import comb, factorial

import numpy as np

from .utils.validation import check_divisible, check_image

__all__ = [
    "POLE",
    "CoefficientGrid",
    "SplinePyramid",
    "WaveletBands",
    "bspline",
    "prefilter",
    "spline_eval",
    "reduce",
    "expand",
    "reduce_filter",
    "expand_filter",
    "build_pyramid",
    "gaussian_smooth",
    "wavelet_decompose",
]

POLE = np.sqrt(3.0) - 2.0
# Half-length of the truncated pyramid kernels (31 taps).
FILTER_HALF_LENGTH = 15
MIN_LEVEL_SIZE = 16


def bspline(degree, x):
    """Centered B-spline of the given degree evaluated at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    half = (degree + 1) / 2.0
    for k in range(degree + 2):
        out += (-1) ** k * comb(degree + 1, k) * np.clip(x + half - k, 0.0, None) ** degree
    return out / factorial(degree)


# ---------------------------------------------------------------------------
# Interpolation prefilter and evaluation


@dataclass(frozen=True)
class CoefficientGrid:
    """B-spline coefficients of the interpolating cubic spline of an image."""

    coeffs: np.ndarray

    @property
    def width(self):
        return self.coeffs.shape[1]

    @property
    def height(self):
        return self.coeffs.shape[0]

    def __call__(self, x, y, gradient=False):
        return spline_eval(self, x, y, gradient=gradient)


def _causal_init(f, z):
    # Exact initial value for the mirror-extended (period 2N-2) causal pass.
    n = f.shape[0]
    k = np.arange(1, n - 1)
    weights = z ** k + z ** (2 * n - 2 - k)
    acc = f[0] + z ** (n - 1) * f[-1] + np.tensordot(weights, f[1:-1], axes=(0, 0))
    return acc / (1.0 - z ** (2 * n - 2))


def _prefilter_axis0(f):
    z = POLE
    n = f.shape[0]
    cp = np.empty_like(f)
    cp[0] = _causal_init(f, z)
    for k in range(1, n):
        cp[k] = f[k] + z * cp[k - 1]
    cm = np.empty_like(f)
    cm[-1] = (z / (z * z - 1.0)) * (cp[-1] + z * cp[-2])
    for k in range(n - 2, -1, -1):
        cm[k] = z * (cm[k + 1] - cp[k])
    return 6.0 * cm


def prefilter(img):
    """Compute cubic B-spline interpolation coefficients of ``img``.

    Separable recursive filtering (causal then anti-causal pass per axis)
    with the pole ``sqrt(3) - 2`` and mirror boundaries.
    """
    arr = check_image(img, min_size=4)
    c = _prefilter_axis0(arr)
    c = _prefilter_axis0(c.T).T
    return CoefficientGrid(np.ascontiguousarray(c))


def _weights(t):
    t2 = t * t
    t3 = t2 * t
    omt = 1.0 - t
    w = (
        omt * omt * omt / 6.0,
        0.5 * t3 - t2 + 2.0 / 3.0,
        -0.5 * t3 + 0.5 * t2 + 0.5 * t + 1.0 / 6.0,
        t3 / 6.0,
    )
    d = (
        -0.5 * omt * omt,
        1.5 * t2 - 2.0 * t,
        -1.5 * t2 + t + 0.5,
        0.5 * t2,
    )
    return w, d


def _mirror_index(i, n):
    i = np.abs(i)
    return np.where(i > n - 1, 2 * (n - 1) - i, i)


def spline_eval(coeffs, x, y, gradient=False):
    """Evaluate the cubic spline at real coordinates ``(x, y)``.

    Returns the interpolated values, or ``(value, d/dx, d/dy)`` when
    ``gradient`` is true.  Coordinates must lie in ``[0, w-1] x [0, h-1]``.
    """
    c = coeffs.coeffs if isinstance(coeffs, CoefficientGrid) else np.asarray(coeffs, dtype=np.float64)
    h, w = c.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)
    shape = x.shape
    x = x.ravel()
    y = y.ravel()
    if x.size and (x.min() < 0 or x.max() > w - 1 or y.min() < 0 or y.max() > h - 1):
        raise ValueError(f"spline query outside the domain [0, {w - 1}] x [0, {h - 1}]")

    ix = np.minimum(np.floor(x).astype(np.intp), w - 2)
    iy = np.minimum(np.floor(y).astype(np.intp), h - 2)
    wx, dx = _weights(x - ix)
    wy, dy = _weights(y - iy)
    cols = [_mirror_index(ix + k, w) for k in (-1, 0, 1, 2)]
    flat = c.ravel()

    value = np.zeros(x.shape)
    gx = np.zeros(x.shape) if gradient else None
    gy = np.zeros(x.shape) if gradient else None
    for j in range(4):
        row = _mirror_index(iy + (j - 1), h) * w
        s = np.zeros(x.shape)
        sd = np.zeros(x.shape) if gradient else None
        for i in range(4):
            v = flat[row + cols[i]]
            s += wx[i] * v
            if gradient:
                sd += dx[i] * v
        value += wy[j] * s
        if gradient:
            gx += wy[j] * sd
            gy += dy[j] * s
    if gradient:
        return value.reshape(shape), gx.reshape(shape), gy.reshape(shape)
    return value.reshape(shape)


# ---------------------------------------------------------------------------
# Pyramid filters


def _sampled_response(degree, omega, scale=1.0, support=16):
    k = np.arange(-support, support + 1)
    vals = bspline(degree, k / scale)
    return np.cos(np.outer(omega, k)) @ vals


def _cross_correlation_taps():
    # u[k] = integral of beta3(x - k) * beta3(x / 2); piecewise polynomial
    # between integer knots, so Gauss-Legendre per unit interval is exact.
    nodes, wts = np.polynomial.legendre.leggauss(8)
    taps = {}
    for k in range(-7, 8):
        total = 0.0
        for m in range(-6, 6):
            xs = m + 0.5 + 0.5 * nodes
            total += np.sum(0.5 * wts * bspline(3, xs - k) * bspline(3, xs / 2.0))
        taps[k] = total
    return taps


def _truncate(full, half_length):
    k = np.arange(-half_length, half_length + 1)
    return full[k % full.size].copy()


def _normalize_phases(taps, phase_sum):
    # Each polyphase branch (even / odd tap index) sums to ``phase_sum`` so
    # constants are reproduced exactly after truncation.
    k = np.arange(taps.size) - taps.size // 2
    out = taps.copy()
    for parity in (0, 1):
        sel = (k % 2) == parity
        out[sel] *= phase_sum / out[sel].sum()
    return out


@lru_cache(maxsize=None)
def _filters(half_length):
    n = 4096
    omega = 2.0 * np.pi * np.fft.fftfreq(n)
    u = _cross_correlation_taps()
    big_u = sum(v * np.cos(k * omega) for k, v in u.items())
    b3 = _sampled_response(3, omega)
    b3_2 = _sampled_response(3, 2.0 * omega)
    b7_2 = _sampled_response(7, 2.0 * omega)
    reduce_response = b3_2 / (2.0 * b7_2) * big_u / b3
    expand_response = _sampled_response(3, omega, scale=2.0) / b3_2
    r = np.real(np.fft.ifft(reduce_response))
    e = np.real(np.fft.ifft(expand_response))
    r = _truncate(r, half_length)
    e = _truncate(e, half_length)
    # FFT round-off leaves ~1e-17 asymmetry; keep the kernels exactly even.
    r = _normalize_phases(0.5 * (r + r[::-1]), 0.5)
    e = _normalize_phases(0.5 * (e + e[::-1]), 1.0)
    r.setflags(write=False)
    e.setflags(write=False)
    return r, e


def reduce_filter():
    """Symmetric reduce kernel (taps ``-K..K``), unit DC gain."""
    return _filters(FILTER_HALF_LENGTH)[0]


def expand_filter():
    """Symmetric expand kernel (taps ``-K..K``), DC gain 2."""
    return _filters(FILTER_HALF_LENGTH)[1]


def _filter_decimate_axis0(f, taps):
    # out[l] = sum_k taps[k] * f[2l - k], mirror-extended input.
    half = taps.size // 2
    n_out = f.shape[0] // 2
    pad = [(half, half)] + [(0, 0)] * (f.ndim - 1)
    g = np.pad(f, pad, mode="reflect")
    out = np.zeros((n_out,) + f.shape[1:])
    for i, tap in enumerate(taps):
        k = i - half
        start = half - k
        out += tap * g[start:start + 2 * n_out:2]
    return out


def _upsample_filter_axis0(g, taps):
    # out[2l + p] = sum_j taps[2j + p] * g[l - j], mirror-extended coarse signal.
    half = taps.size // 2
    n = g.shape[0]
    pad_len = half // 2 + 1
    pad = [(pad_len, pad_len)] + [(0, 0)] * (g.ndim - 1)
    gp = np.pad(g, pad, mode="reflect")
    out = np.empty((2 * n,) + g.shape[1:])
    for parity in (0, 1):
        acc = np.zeros((n,) + g.shape[1:])
        for i, tap in enumerate(taps):
            k = i - half
            if (k - parity) % 2:
                continue
            j = (k - parity) // 2
            acc += tap * gp[pad_len - j:pad_len - j + n]
        out[parity::2] = acc
    return out


def reduce(img):
    """Low-pass filter rows then columns and decimate by two."""
    arr = check_image(img)
    h, w = arr.shape
    if h % 2 or w % 2:
        raise ValueError(f"reduce needs even dimensions, got {w}x{h}")
    taps = reduce_filter()
    out = _filter_decimate_axis0(arr.T, taps).T
    out = _filter_decimate_axis0(out, taps)
    return np.ascontiguousarray(out)


def expand(img):
    """Upsample by two with the matched spline interpolation filter."""
    arr = check_image(img)
    taps = expand_filter()
    out = _upsample_filter_axis0(arr.T, taps).T
    out = _upsample_filter_axis0(out, taps)
    return np.ascontiguousarray(out)


def _convolve_axis0(f, taps):
    half = taps.size // 2
    g = np.pad(f, [(half, half)] + [(0, 0)] * (f.ndim - 1), mode="reflect")
    out = np.zeros_like(f)
    for i, tap in enumerate(taps):
        out += tap * g[i:i + f.shape[0]]
    return out


def gaussian_smooth(img, sigma):
    """Separable sampled-Gaussian low-pass (taps out to 4 sigma), mirror boundaries."""
    arr = check_image(img)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma!r}")
    if sigma == 0:
        return arr.copy()
    half = int(np.ceil(4.0 * sigma))
    if half >= min(arr.shape):
        raise ValueError(f"sigma {sigma} too large for a {arr.shape[1]}x{arr.shape[0]} image")
    k = np.arange(-half, half + 1)
    taps = np.exp(-0.5 * (k / sigma) ** 2)
    taps /= taps.sum()
    out = _convolve_axis0(arr.T, taps).T
    return np.ascontiguousarray(_convolve_axis0(out, taps))


@dataclass(frozen=True)
class SplinePyramid:
    """Low-pass pyramid; ``levels[0]`` is full resolution."""

    levels: tuple

    @property
    def depth(self):
        return len(self.levels) - 1

    def __getitem__(self, k):
        return self.levels[k]

    def __len__(self):
        return len(self.levels)


def build_pyramid(img, depth):
    """Build ``depth`` successive reductions of ``img``.

    The returned pyramid holds ``depth + 1`` images.  Dimensions must be
    divisible by ``2**depth`` and level ``depth - 1`` must be at least 16x16.
    """
    if int(depth) != depth or depth < 1:
        raise ValueError(f"depth must be a positive integer, got {depth!r}")
    depth = int(depth)
    arr = check_image(img)
    check_divisible(arr.shape, depth)
    h, w = arr.shape
    if min(h, w) // 2 ** (depth - 1) < MIN_LEVEL_SIZE:
        raise ValueError(
            f"depth {depth} too large for a {w}x{h} image: level {depth - 1} would be "
            f"smaller than {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}"
        )
    levels = [arr]
    for _ in range(depth):
        levels.append(reduce(levels[-1]))
    return SplinePyramid(tuple(levels))


@dataclass(frozen=True)
class WaveletBands:
    """One-level separable decomposition.

    ``HL`` is high-pass along x (responds to vertical edges), ``LH`` is
    high-pass along y, ``HH`` is high-pass along both.
    """

    LL: np.ndarray
    LH: np.ndarray
    HL: np.ndarray
    HH: np.ndarray


def highpass_filter():
    """Modulated mirror of the reduce kernel: g[k] = (-1)^k h[1 - k]."""
    h = reduce_filter()
    half = h.size // 2
    k = np.arange(-half - 1, half + 2)
    idx = 1 - k
    g = np.where(np.abs(idx) <= half, h[np.clip(idx + half, 0, h.size - 1)], 0.0)
    return (-1.0) ** np.abs(k) * g


def wavelet_decompose(img):
    """Dyadic (scale 2, unit translation) filter-bank decomposition."""
    arr = check_image(img)
    h, w = arr.shape
    if h % 2 or w % 2:
        raise ValueError(f"wavelet_decompose needs even dimensions, got {w}x{h}")
    lo = reduce_filter()
    hi = highpass_filter()
    rows_lo = _filter_decimate_axis0(arr.T, lo).T
    rows_hi = _filter_decimate_axis0(arr.T, hi).T
    LL = np.ascontiguousarray(_filter_decimate_axis0(rows_lo, lo))
    LH = np.ascontiguousarray(_filter_decimate_axis0(rows_lo, hi))
    HL = np.ascontiguousarray(_filter_decimate_axis0(rows_hi, lo))
    HH = np.ascontiguousarray(_filter_decimate_axis0(rows_hi, hi))
    return WaveletBands(LL, LH, HL, HH)
