"""Coarse-to-fine spline-pyramid registration by least-squares intensity matching.

Both images are reduced into L2 cubic-spline pyramids.  Starting from the
identity at the coarsest level, a Marquardt-Levenberg minimization of the
sum of squared differences between the reference and the warped input is
run at every level; the result seeds the next finer level with its
translation doubled.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from .affine import AffineTransform, MotionModel, apply_point, image_center, rescale_to_level, warp_image
from .optimize import DomainError, LeastSquaresProblem, MLConfig, OptimizationError, minimize
from .spline import build_pyramid, gaussian_smooth, prefilter, spline_eval
from .utils.validation import check_divisible, check_image, check_image_stack, check_same_shape

__all__ = [
    "InsufficientOverlapError",
    "TruConfig",
    "RegistrationResult",
    "SSDProblem",
    "ssd_criterion",
    "register_tru",
    "register_batch_tru",
    "TRURegistration",
]


class InsufficientOverlapError(DomainError, ValueError):
    """Too few reference pixels map inside the input image."""


@dataclass(frozen=True)
class TruConfig:
    depth: int = 4
    model: MotionModel = MotionModel.RIGID
    ml: MLConfig = field(default_factory=MLConfig)
    min_valid_fraction: float = 0.8
    photometric: bool = False
    # finest level optimized; 0 runs all the way to full resolution
    finest_level: int = 0
    # Gaussian blur applied to both images first; counters the pull of
    # interpolated input noise toward half-pixel shifts
    presmooth_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "model", MotionModel.coerce(self.model))
        if int(self.depth) != self.depth or self.depth < 1:
            raise ValueError(f"depth must be an integer >= 1, got {self.depth!r}")
        if not 0 < self.min_valid_fraction <= 1:
            raise ValueError(f"min_valid_fraction must be in (0, 1], got {self.min_valid_fraction!r}")
        if not 0 <= self.finest_level <= self.depth:
            raise ValueError("finest_level must lie in [0, depth]")
        if not 0 <= self.presmooth_sigma <= 8:
            raise ValueError(f"presmooth_sigma must lie in [0, 8], got {self.presmooth_sigma!r}")

    def to_dict(self):
        ml = self.ml
        return {
            "depth": self.depth,
            "model": self.model.value,
            "min_valid_fraction": self.min_valid_fraction,
            "photometric": self.photometric,
            "finest_level": self.finest_level,
            "presmooth_sigma": self.presmooth_sigma,
            "ml": {
                "lambda0": ml.lambda0,
                "lambda_up": ml.lambda_up,
                "lambda_down": ml.lambda_down,
                "max_iters": ml.max_iters,
                "step_tol": ml.step_tol,
                "cost_tol": ml.cost_tol,
            },
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        ml = MLConfig(**d.pop("ml", {}))
        return cls(ml=ml, **d)


@dataclass
class RegistrationResult:
    """Outcome of one registration.

    ``transform`` maps reference pixel coordinates into the input image
    (about the image center), so a scene that moved by +d in the input
    yields ``tx_px, ty_px = +d``.  With photometric fitting, ``gain`` and
    ``offset`` map input intensities onto the reference.
    """

    tx_px: float
    ty_px: float
    theta_deg: float
    final_cost: float
    per_level: list
    converged: bool
    transform: AffineTransform = field(default_factory=AffineTransform)
    failed_level: int = None
    message: str = ""
    gain: float = 1.0
    offset: float = 0.0

    @classmethod
    def failure(cls, message, failed_level=None):
        return cls(np.nan, np.nan, np.nan, np.nan, [], False, AffineTransform(), failed_level, message)


class SSDProblem(LeastSquaresProblem):
    """Residuals ``input(T(p)) - ref(p)`` over the pixels mapped inside the input.

    Residuals of pixels whose mapped position leaves the input domain are
    zero, so the vector length stays fixed while they drop out of the sum.
    """

    def __init__(self, ref, input_coeffs, model=MotionModel.RIGID, center=None,
                 photometric=False, min_valid_fraction=0.8):
        self.ref = check_image(ref).ravel()
        self.coeffs = input_coeffs
        self.h, self.w = input_coeffs.height, input_coeffs.width
        self.model = MotionModel.coerce(model)
        self.center = image_center((self.h, self.w)) if center is None else center
        self.photometric = photometric
        self.min_valid_fraction = min_valid_fraction
        yy, xx = np.mgrid[0:self.h, 0:self.w].astype(np.float64)
        self.xx, self.yy = xx.ravel(), yy.ravel()
        self.dx = self.xx - self.center[0]
        self.dy = self.yy - self.center[1]
        self._cache = None

    @property
    def n_params(self):
        return self.model.n_params + (2 if self.photometric else 0)

    def transform(self, p):
        return self.model.from_params(p[:self.model.n_params])

    def _sample(self, p):
        p = np.asarray(p, dtype=np.float64)
        if self._cache is not None and np.array_equal(self._cache[0], p):
            return self._cache[1]
        qx, qy = apply_point(self.transform(p), self.xx, self.yy, self.center)
        valid = (qx >= 0) & (qx <= self.w - 1) & (qy >= 0) & (qy <= self.h - 1)
        n_valid = int(np.count_nonzero(valid))
        if n_valid < self.min_valid_fraction * valid.size:
            raise InsufficientOverlapError(
                f"only {n_valid}/{valid.size} pixels overlap (minimum fraction {self.min_valid_fraction})"
            )
        v, gx, gy = spline_eval(self.coeffs, qx[valid], qy[valid], gradient=True)
        sample = (valid, v, gx, gy)
        self._cache = (p.copy(), sample)
        return sample

    def n_valid(self, p):
        return int(np.count_nonzero(self._sample(p)[0]))

    def residuals(self, p):
        valid, v, _, _ = self._sample(p)
        r = np.zeros(self.ref.size)
        if self.photometric:
            a, b = p[-2], p[-1]
            r[valid] = (1.0 + a) * v + b - self.ref[valid]
        else:
            r[valid] = v - self.ref[valid]
        return r

    def jacobian(self, p):
        valid, v, gx, gy = self._sample(p)
        n_geo = self.model.n_params
        dqx, dqy = self.model.coordinate_jacobian(p[:n_geo], self.dx[valid], self.dy[valid])
        J = np.zeros((self.ref.size, self.n_params))
        geo = gx * dqx + gy * dqy
        if self.photometric:
            geo *= 1.0 + p[-2]
            J[valid, n_geo] = v
            J[valid, n_geo + 1] = 1.0
        J[valid, :n_geo] = geo.T
        return J


def ssd_criterion(ref, input, T, model=MotionModel.RIGID, center=None, min_valid_fraction=0.8):
    """Return ``(cost, residuals, jacobian)`` of the SSD criterion at ``T``.

    ``cost`` is ``0.5 * ||r||^2`` over valid pixels; the Jacobian is taken
    with respect to the parameters of ``model``.
    """
    ref = check_image(ref, "reference", min_size=8)
    input = check_image(input, "input", min_size=8)
    check_same_shape(ref, input)
    model = MotionModel.coerce(model)
    problem = SSDProblem(ref, prefilter(input), model, center, min_valid_fraction=min_valid_fraction)
    p = model.to_params(T)
    r = problem.residuals(p)
    return 0.5 * float(r @ r), r, problem.jacobian(p)


def _initial_params(T, model, photometric, gain_offset):
    p = model.to_params(T)
    if photometric:
        p = np.concatenate([p, gain_offset])
    return p


def register_tru(ref, input, cfg=None):
    """Register ``input`` onto ``ref`` through the spline pyramid."""
    cfg = cfg or TruConfig()
    ref = check_image(ref, "reference")
    input = check_image(input, "input")
    check_same_shape(ref, input)
    check_divisible(ref.shape, cfg.depth)
    if cfg.presmooth_sigma > 0:
        ref = gaussian_smooth(ref, cfg.presmooth_sigma)
        input = gaussian_smooth(input, cfg.presmooth_sigma)
    ref_pyr = build_pyramid(ref, cfg.depth)
    in_pyr = build_pyramid(input, cfg.depth)
    cx0, cy0 = image_center(ref.shape)

    model = cfg.model
    T = AffineTransform.identity()
    gain_offset = np.zeros(2)
    per_level = []
    problem = None
    outcome = None
    for level in range(cfg.depth, cfg.finest_level - 1, -1):
        scale = 2.0 ** level
        problem = SSDProblem(
            ref_pyr[level], prefilter(in_pyr[level]), model,
            center=(cx0 / scale, cy0 / scale),
            photometric=cfg.photometric, min_valid_fraction=cfg.min_valid_fraction,
        )
        p0 = _initial_params(T, model, cfg.photometric, gain_offset)
        try:
            outcome = minimize(problem, p0, cfg.ml)
        except (OptimizationError, InsufficientOverlapError) as exc:
            result = RegistrationResult.failure(f"level {level}: {exc}", failed_level=level)
            result.per_level = per_level
            full = rescale_to_level(T, level)
            result.transform = full
            result.tx_px, result.ty_px, result.theta_deg = full.tx, full.ty, full.theta_deg
            return result
        T = problem.transform(outcome.params)
        if cfg.photometric:
            gain_offset = outcome.params[-2:].copy()
        per_level.append((level, outcome.iterations, outcome.cost))
        if level > cfg.finest_level:
            T = rescale_to_level(T, 1)

    T_full = rescale_to_level(T, cfg.finest_level)
    n_valid = problem.n_valid(outcome.params)
    return RegistrationResult(
        tx_px=T_full.tx,
        ty_px=T_full.ty,
        theta_deg=T_full.theta_deg,
        final_cost=2.0 * outcome.cost / max(n_valid, 1),
        per_level=per_level,
        converged=outcome.converged,
        transform=T_full,
        message=outcome.reason,
        gain=1.0 + gain_offset[0],
        offset=gain_offset[1],
    )


def _register_item(image_id, name, ref, img, cfg):
    with threadpool_limits(limits=1):
        try:
            result = register_tru(ref, img, cfg)
        except (ValueError, OptimizationError) as exc:
            result = RegistrationResult.failure(str(exc))
    return image_id, name, result


def register_batch_tru(ref_regions, inputs, cfg=None, n_jobs=1):
    """Register every region of every input image against the reference.

    ``ref_regions`` maps region name to reference window; ``inputs`` is a
    sequence of ``(image_id, {region name: window})``.  Returns
    ``(image_id, region name, RegistrationResult)`` rows in input order,
    regions in ``ref_regions`` order.  Failures are carried in the results.
    """
    cfg = cfg or TruConfig()
    tasks = []
    for image_id, regions in inputs:
        for name, ref in ref_regions.items():
            if name not in regions:
                raise ValueError(f"image {image_id!r} lacks region {name!r}")
            tasks.append((image_id, name, ref, regions[name]))
    if n_jobs == 1:
        return [_register_item(*t, cfg) for t in tasks]
    return Parallel(n_jobs=n_jobs)(delayed(_register_item)(*t, cfg) for t in tasks)


class TRURegistration(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`register_tru`.

    ``fit`` stores the reference image; ``predict`` returns one row
    ``(tx_px, ty_px, theta_deg)`` per input image and ``transform`` resamples
    the inputs into the reference frame.

    Parameters
    ----------
    depth : int, default=4
        Number of pyramid reductions.  Image sides must be multiples of
        ``2**depth``.
    model : {"rigid", "translation", "affine"}, default="rigid"
    lambda0, max_iters, step_tol, cost_tol : Marquardt-Levenberg settings.
    min_valid_fraction : float, default=0.8
    photometric : bool, default=False
        Also fit a global gain/offset between the images.
    presmooth_sigma : float, default=1.0
        Gaussian blur (px) applied to both images before the pyramid; 0 disables it.
    """

    def __init__(self, depth=4, model="rigid", lambda0=1e-3, max_iters=50, step_tol=1e-7,
                 cost_tol=1e-9, min_valid_fraction=0.8, photometric=False, presmooth_sigma=1.0):
        self.depth = depth
        self.model = model
        self.lambda0 = lambda0
        self.max_iters = max_iters
        self.step_tol = step_tol
        self.cost_tol = cost_tol
        self.min_valid_fraction = min_valid_fraction
        self.photometric = photometric
        self.presmooth_sigma = presmooth_sigma

    def _config(self):
        ml = MLConfig(lambda0=self.lambda0, max_iters=self.max_iters,
                      step_tol=self.step_tol, cost_tol=self.cost_tol)
        return TruConfig(depth=self.depth, model=self.model, ml=ml,
                         min_valid_fraction=self.min_valid_fraction, photometric=self.photometric,
                         presmooth_sigma=self.presmooth_sigma)

    def fit(self, X, y=None):
        self.config_ = self._config()
        ref = check_image(X, "reference")
        check_divisible(ref.shape, self.depth)
        self.reference_ = ref
        return self

    def register(self, image):
        check_is_fitted(self, "reference_")
        return register_tru(self.reference_, image, self.config_)

    def predict(self, X):
        check_is_fitted(self, "reference_")
        self.results_ = [self.register(img) for img in check_image_stack(X)]
        return np.array([[r.tx_px, r.ty_px, r.theta_deg] for r in self.results_])

    def transform(self, X):
        """Warp each input into the reference frame (invalid pixels are 0)."""
        check_is_fitted(self, "reference_")
        images = check_image_stack(X)
        out = []
        for img in images:
            result = self.register(img)
            out.append(warp_image(img, result.transform)[0])
        return np.stack(out)

    def fit_predict(self, X, y=None):
        """Use the first image of the stack as reference and register the rest."""
        images = check_image_stack(X)
        return self.fit(images[0]).predict(images)
