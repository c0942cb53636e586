"""Correlation-box registration with parabolic subpixel peak fitting.

Each box around a reference feature is coarsely matched to an integer
offset, a small correlation surface is sampled around that offset, and a
2D quadratic fitted to the surface locates the subpixel peak.  The
reported shift is the componentwise median over all boxes.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .utils.validation import check_image, check_image_stack, check_same_shape

__all__ = [
    "XregError",
    "BoxSpec",
    "CorrelationSurface",
    "XregResult",
    "auto_coarse_match",
    "correlation_surface",
    "parabolic_peak",
    "register_xreg",
    "select_boxes",
    "XREGRegistration",
]

DEFAULT_HALF_SIZE = 16
DEFAULT_RADIUS = 2
DEFAULT_MAX_RADIUS = 8


class XregError(ValueError):
    """A box could not be matched (flat content, border peak, bad fit)."""


@dataclass(frozen=True)
class BoxSpec:
    name: str
    ref_center: tuple
    init_offset: tuple = None
    half_size: int = DEFAULT_HALF_SIZE

    def __post_init__(self):
        cx, cy = self.ref_center
        object.__setattr__(self, "ref_center", (int(round(cx)), int(round(cy))))
        if self.init_offset is not None:
            dx, dy = self.init_offset
            object.__setattr__(self, "init_offset", (int(dx), int(dy)))
        if self.half_size < 1:
            raise ValueError("half_size must be >= 1")

    def window(self, dx=0, dy=0):
        cx, cy = self.ref_center
        hs = self.half_size
        return slice(cy + dy - hs, cy + dy + hs + 1), slice(cx + dx - hs, cx + dx + hs + 1)

    def fits(self, shape, reach):
        h, w = shape
        cx, cy = self.ref_center
        lo = self.half_size + reach
        return cx - lo >= 0 and cy - lo >= 0 and cx + lo <= w - 1 and cy + lo <= h - 1

    def to_dict(self):
        d = {"name": self.name, "x": self.ref_center[0], "y": self.ref_center[1],
             "half_size": self.half_size}
        if self.init_offset is not None:
            d["init_offset"] = list(self.init_offset)
        return d

    @classmethod
    def from_dict(cls, d):
        init = d.get("init_offset")
        return cls(d["name"], (d["x"], d["y"]), tuple(init) if init is not None else None,
                   d.get("half_size", DEFAULT_HALF_SIZE))


@dataclass(frozen=True)
class CorrelationSurface:
    values: np.ndarray
    center_offset: tuple
    r: int


@dataclass
class XregResult:
    per_box: list
    tx_px: float
    ty_px: float
    n_used: int = 0
    failures: dict = field(default_factory=dict)


def _zero_mean_unit(a):
    a = a - a.mean()
    norm = np.sqrt(np.sum(a * a))
    return a, norm


def _ncc(ref_box, in_box):
    a, na = _zero_mean_unit(ref_box)
    b, nb = _zero_mean_unit(in_box)
    if nb == 0.0:
        return -np.inf
    return float(np.sum(a * b) / (na * nb))


def _ref_box(ref, box):
    patch = ref[box.window()]
    if np.ptp(patch) == 0.0:
        raise XregError(f"box {box.name!r} has zero-variance reference content")
    return patch


def auto_coarse_match(ref, input, box, max_radius=DEFAULT_MAX_RADIUS):
    """Integer offset maximizing normalized cross-correlation within ``max_radius``.

    Ties go to the smallest offset norm, then lexicographic ``(dx, dy)``.
    """
    if not (box.fits(ref.shape, 0) and box.fits(input.shape, max_radius)):
        raise XregError(f"box {box.name!r} plus search radius {max_radius} leaves the image")
    patch = _ref_box(ref, box)
    best = None
    for dy in range(-max_radius, max_radius + 1):
        for dx in range(-max_radius, max_radius + 1):
            score = _ncc(patch, input[box.window(dx, dy)])
            key = (-score, dx * dx + dy * dy, dx, dy)
            if best is None or key < best:
                best = key
    if not np.isfinite(best[0]):
        raise XregError(f"box {box.name!r}: input content is flat over the whole search window")
    return best[2], best[3]


def _score(a, b, normalized, name):
    if not normalized:
        return float(np.sum(a * b))
    score = _ncc(a, b)
    if not np.isfinite(score):
        raise XregError(f"box {name!r}: zero-variance input content")
    return score


def correlation_surface(ref, input, box, r=DEFAULT_RADIUS, normalized=True, init_offset=None,
                        symmetric=True):
    """Sample the correlation between the reference box and displaced input boxes.

    ``values[j, i]`` scores displacement ``d = (i - r, j - r)`` about the
    initial offset: the reference box against the input box at ``init + d``.
    With ``symmetric`` this is averaged with the reference box at ``-d``
    against the input box at ``init``; both peak at the same ``d``, and the
    average makes the surface of identical images exactly point-symmetric.
    ``normalized`` selects zero-mean normalized correlation, otherwise the
    raw sum of products.
    """
    if r < 1:
        raise ValueError("surface radius must be >= 1")
    ox, oy = init_offset if init_offset is not None else (box.init_offset or (0, 0))
    ref_reach = r if symmetric else 0
    if not (box.fits(ref.shape, ref_reach) and box.fits(input.shape, max(abs(ox), abs(oy)) + r)):
        raise XregError(f"box {box.name!r} at offset ({ox}, {oy}) +/- {r} leaves the image")
    patch = _ref_box(ref, box)
    fixed_input = input[box.window(ox, oy)]
    values = np.empty((2 * r + 1, 2 * r + 1))
    for j in range(2 * r + 1):
        for i in range(2 * r + 1):
            dx, dy = i - r, j - r
            score = _score(patch, input[box.window(ox + dx, oy + dy)], normalized, box.name)
            if symmetric:
                score = 0.5 * (score + _score(ref[box.window(-dx, -dy)], fixed_input, normalized, box.name))
            values[j, i] = score
    return CorrelationSurface(values, (ox, oy), r)


def _design(coords):
    x, y = coords
    return np.stack([x * x, y * y, x * y, x, y, np.ones_like(x)], axis=1)


def parabolic_peak(surface, fit_size=3):
    """Subpixel peak of a correlation surface from a least-squares quadratic fit.

    The fit ``a x^2 + b y^2 + c xy + d x + e y + f`` uses the 3x3 neighbourhood
    of the discrete maximum (``fit_size=3``) or the whole surface
    (``fit_size`` equal to its width).  Returns ``(dx, dy)`` including the
    surface's ``center_offset``.
    """
    v = np.asarray(surface.values, dtype=np.float64)
    n = v.shape[0]
    r = surface.r
    j, i = np.unravel_index(np.argmax(v), v.shape)
    if fit_size == 3:
        if i in (0, n - 1) or j in (0, n - 1):
            raise XregError(f"correlation peak on the surface border at ({i - r}, {j - r})")
        yy, xx = np.mgrid[-1:2, -1:2]
        z = v[j - 1:j + 2, i - 1:i + 2].ravel()
        base = (i - r, j - r)
        limit = 1.0
    elif fit_size == n:
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        z = v.ravel()
        base = (0, 0)
        limit = float(r)
    else:
        raise ValueError(f"fit_size must be 3 or {n}, got {fit_size}")
    A = _design((xx.ravel().astype(float), yy.ravel().astype(float)))
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    a, b, c, d, e, _ = coef
    hess = np.array([[2 * a, c], [c, 2 * b]])
    det = 4 * a * b - c * c
    if a >= 0 or b >= 0 or det <= 0:
        raise XregError("quadratic fit is not concave")
    off = np.linalg.solve(hess, [-d, -e])
    if np.any(np.abs(off) > limit):
        raise XregError(f"vertex offset {off.tolist()} exceeds {limit} px")
    ox, oy = surface.center_offset
    return (float(base[0] + off[0] + ox), float(base[1] + off[1] + oy))


def register_xreg(ref, input, boxes, r=DEFAULT_RADIUS, normalized=True, fit_size=3,
                  auto_match=True, max_radius=DEFAULT_MAX_RADIUS, symmetric=True):
    """Per-box correlation peaks and their componentwise median.

    Boxes that fail are dropped with a warning; at least a majority of
    the boxes (5 of 9) must survive.
    """
    ref = check_image(ref, "reference")
    input = check_image(input, "input")
    check_same_shape(ref, input)
    boxes = list(boxes)
    if len(boxes) < 3:
        raise ValueError(f"at least 3 boxes are required, got {len(boxes)}")
    per_box = []
    failures = {}
    for box in boxes:
        try:
            if auto_match or box.init_offset is None:
                init = auto_coarse_match(ref, input, box, max_radius)
            else:
                init = box.init_offset
            surface = correlation_surface(ref, input, box, r, normalized, init_offset=init, symmetric=symmetric)
            per_box.append(parabolic_peak(surface, fit_size))
        except XregError as exc:
            failures[box.name] = str(exc)
            per_box.append((np.nan, np.nan))
            warnings.warn(f"XREG box {box.name!r} dropped: {exc}", RuntimeWarning, stacklevel=2)
    good = np.array([p for p in per_box if np.isfinite(p[0])]).reshape(-1, 2)
    needed = len(boxes) // 2 + 1
    if len(good) < needed:
        raise XregError(f"only {len(good)} of {len(boxes)} boxes survived; need {needed}")
    tx, ty = np.median(good, axis=0)
    return XregResult(per_box, float(tx), float(ty), len(good), failures)


def select_boxes(ref, n=9, half_size=DEFAULT_HALF_SIZE, reach=DEFAULT_MAX_RADIUS + DEFAULT_RADIUS + 1,
                 prefix="box"):
    """Pick ``n`` non-overlapping high-contrast boxes from a reference image.

    Candidates sit on a grid of pitch ``half_size``; the score is the
    squared gradient energy inside the box.  Replaces manual feature
    picking.
    """
    ref = check_image(ref, "reference")
    h, w = ref.shape
    lo = half_size + reach
    xs = np.arange(lo, w - lo, half_size)
    ys = np.arange(lo, h - lo, half_size)
    if xs.size == 0 or ys.size == 0:
        raise ValueError(f"image {w}x{h} too small for boxes of half size {half_size}")
    gy, gx = np.gradient(ref)
    energy = gx * gx + gy * gy
    integral = np.pad(energy.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    cands = []
    for cy in ys:
        for cx in xs:
            y0, y1, x0, x1 = cy - half_size, cy + half_size + 1, cx - half_size, cx + half_size + 1
            score = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
            cands.append((-score, int(cy), int(cx)))
    cands.sort()
    chosen = []
    for score, cy, cx in cands:
        if -score <= 0:
            break
        if all(max(abs(cx - x), abs(cy - y)) > half_size for y, x in chosen):
            chosen.append((cy, cx))
        if len(chosen) == n:
            break
    if len(chosen) < n:
        raise ValueError(f"found only {len(chosen)} textured boxes, {n} requested")
    return [BoxSpec(f"{prefix}{k}", (cx, cy), None, half_size) for k, (cy, cx) in enumerate(chosen)]


class XREGRegistration(BaseEstimator):
    """Estimator wrapper around :func:`register_xreg`.

    ``fit`` stores the reference and, when ``boxes`` is None, picks
    ``n_boxes`` textured boxes automatically.  ``predict`` returns one
    ``(tx_px, ty_px)`` row per input image.
    """

    def __init__(self, boxes=None, n_boxes=9, half_size=DEFAULT_HALF_SIZE, radius=DEFAULT_RADIUS,
                 max_radius=DEFAULT_MAX_RADIUS, normalized=True, fit_size=3, auto_match=True,
                 symmetric=True):
        self.boxes = boxes
        self.n_boxes = n_boxes
        self.half_size = half_size
        self.radius = radius
        self.max_radius = max_radius
        self.normalized = normalized
        self.fit_size = fit_size
        self.auto_match = auto_match
        self.symmetric = symmetric

    def fit(self, X, y=None):
        self.reference_ = check_image(X, "reference")
        if self.boxes is None:
            self.boxes_ = select_boxes(self.reference_, self.n_boxes, self.half_size,
                                       reach=self.max_radius + self.radius + 1)
        else:
            self.boxes_ = [b if isinstance(b, BoxSpec) else BoxSpec.from_dict(b) for b in self.boxes]
        return self

    def register(self, image):
        check_is_fitted(self, "reference_")
        return register_xreg(self.reference_, image, self.boxes_, self.radius, self.normalized,
                             self.fit_size, self.auto_match, self.max_radius, self.symmetric)

    def predict(self, X):
        check_is_fitted(self, "reference_")
        self.results_ = [self.register(img) for img in check_image_stack(X)]
        return np.array([[r.tx_px, r.ty_px] for r in self.results_])
