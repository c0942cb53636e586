import dataclasses

import numpy as np
import pytest
from sklearn.base import clone

from oracles import smooth_image, ssd_scan
from subpixreg.affine import AffineTransform, MotionModel, compose, invert
from subpixreg.optimize import MLConfig, OptimizationError, check_jacobian, minimize
from subpixreg.spline import build_pyramid, gaussian_smooth, prefilter
from subpixreg.synth import random_scene, render_scene
from subpixreg.tru import (
    InsufficientOverlapError,
    RegistrationResult,
    SSDProblem,
    TRURegistration,
    TruConfig,
    register_batch_tru,
    register_tru,
    ssd_criterion,
)


def pair(size, T, seed=0, noise=0.0):
    spec = random_scene(size, size, seed=seed)
    ref = render_scene(spec)
    inp = render_scene(spec, T)
    if noise:
        rng = np.random.default_rng(seed + 1000)
        inp = inp + rng.normal(0.0, noise * np.ptp(ref), inp.shape)
    return ref, inp


# --- criterion ------------------------------------------------------------------

def test_ssd_identity(smooth64):
    cost, r, J = ssd_criterion(smooth64, smooth64, AffineTransform.identity())
    # interpolation is exact at grid points up to rounding
    assert cost <= 1e-18 and np.abs(r).max() <= 1e-9
    assert J.shape == (64 * 64, 3)


@pytest.mark.parametrize("model", list(MotionModel))
@pytest.mark.parametrize("seed", [0, 1])
def test_jacobian_matches_finite_differences(model, seed):
    ref = smooth_image((32, 32), sigma=2.5, seed=seed)
    inp = smooth_image((32, 32), sigma=2.5, seed=seed + 50)
    problem = SSDProblem(ref, prefilter(inp), model, min_valid_fraction=0.3)
    T = AffineTransform(1.01, 0.02, -0.015, 0.99, 0.3, -0.2)
    p = model.to_params(AffineTransform.rigid(0.3, -0.2, 0.02) if model is MotionModel.RIGID else T)
    J = problem.jacobian(p) if problem.residuals(p) is not None else None
    fd = check_jacobian(problem, p, h=1e-5)
    # Pixels crossing the domain edge within +/-h jump in or out; compare the
    # rest, which is what the chain rule describes.
    valid = problem._sample(p)[0]
    for s in (-1, 1):
        for k in range(p.size):
            e = np.zeros_like(p)
            e[k] = s * 1e-5
            valid = valid & problem._sample(p + e)[0]
    col_scale = np.abs(J[valid]).max(axis=0)
    err = np.abs(J[valid] - fd[valid]).max(axis=0)
    assert np.all(err <= 1e-4 * col_scale)


def test_jacobian_photometric():
    ref = smooth_image((32, 32), sigma=2.5, seed=3)
    inp = 1.1 * smooth_image((32, 32), sigma=2.5, seed=3) + 5.0
    problem = SSDProblem(ref, prefilter(inp), MotionModel.RIGID, photometric=True)
    p = np.array([0.1, -0.05, 0.01, 0.05, -2.0])
    J = problem.jacobian(p) if problem.residuals(p) is not None else None
    fd = check_jacobian(problem, p, h=1e-5)
    valid = problem._sample(p)[0]
    assert np.all(np.abs(J[valid] - fd[valid]).max(axis=0) <= 1e-4 * np.abs(J[valid]).max(axis=0))


def test_cost_symmetric_bowl():
    yy, xx = np.mgrid[0:48, 0:48].astype(float)
    img = 1000.0 * np.exp(-((xx - 23.5) ** 2 + (yy - 23.5) ** 2) / 60.0) + 50.0 * np.cos((xx - 23.5) / 3.0)
    for d in (0.3, 1.0, 2.7):
        for vec in ((d, 0.0), (0.0, d), (d, d / 2)):
            plus = ssd_criterion(img, img, AffineTransform.translation(*vec))[0]
            minus = ssd_criterion(img, img, AffineTransform.translation(-vec[0], -vec[1]))[0]
            assert plus > 0
            assert abs(plus - minus) <= 1e-6 * plus


def test_insufficient_overlap(smooth64):
    with pytest.raises(InsufficientOverlapError, match="overlap"):
        ssd_criterion(smooth64, smooth64, AffineTransform.translation(20, 0))


# --- register_tru -------------------------------------------------------------------

def test_identity_registration():
    ref, _ = pair(128, AffineTransform.identity(), seed=4)
    res = register_tru(ref, ref, TruConfig(depth=3))
    assert abs(res.tx_px) <= 1e-8 and abs(res.ty_px) <= 1e-8 and abs(res.theta_deg) <= 1e-8
    assert res.final_cost <= 1e-18 and res.converged


def test_known_subpixel_shift():
    ref, inp = pair(256, AffineTransform.translation(0.5, -0.25), seed=1)
    res = register_tru(ref, inp)
    assert res.converged
    assert abs(res.tx_px - 0.5) <= 0.02 and abs(res.ty_px + 0.25) <= 0.02
    assert [lvl for lvl, _, _ in res.per_level] == [4, 3, 2, 1, 0]
    assert all(np.isfinite(c) for _, _, c in res.per_level)


def test_known_rigid_drift():
    T = AffineTransform.rigid(-1.7, 2.2, np.radians(0.4))
    ref, inp = pair(256, T, seed=2)
    res = register_tru(ref, inp)
    assert abs(res.tx_px + 1.7) <= 0.02 and abs(res.ty_px - 2.2) <= 0.02
    assert abs(res.theta_deg - 0.4) <= 0.005


def test_integer_shift_matches_ssd_scan():
    ref, inp = pair(128, AffineTransform.translation(2, 1), seed=6)
    res = register_tru(ref, inp, TruConfig(depth=3, model="translation"))
    bx, by = ssd_scan(ref, inp, radius=4)
    assert abs(res.tx_px - bx) <= 0.01 and abs(res.ty_px - by) <= 0.01


def test_translation_model_and_affine_model():
    T = AffineTransform.translation(0.8, -1.3)
    ref, inp = pair(128, T, seed=7)
    for model in ("translation", "affine"):
        res = register_tru(ref, inp, TruConfig(depth=3, model=model))
        assert abs(res.tx_px - 0.8) <= 0.02 and abs(res.ty_px + 1.3) <= 0.02


def test_anti_symmetry():
    T = AffineTransform.rigid(1.2, -0.6, np.radians(0.3))
    ref, inp = pair(256, T, seed=8)
    fwd = register_tru(ref, inp).transform
    back = invert(register_tru(inp, ref).transform)
    assert abs(fwd.tx - back.tx) <= 0.01 and abs(fwd.ty - back.ty) <= 0.01
    assert abs(fwd.theta_deg - back.theta_deg) <= 0.002


@pytest.mark.parametrize("m,n", [(3, -2), (-5, 1)])
def test_translation_equivariance(m, n):
    # Crop the same drifted frame at two offsets; the recovered translation
    # moves by exactly the crop offset.
    spec = random_scene(320, 320, seed=9)
    T = AffineTransform.rigid(0.4, -0.7, np.radians(0.2))
    big_ref = render_scene(spec)
    big_in = render_scene(spec, T, center=(159.5, 159.5))
    a = 32
    ref = big_ref[a:a + 256, a:a + 256]
    r1 = register_tru(ref, big_in[a:a + 256, a:a + 256])
    r2 = register_tru(ref, big_in[a + n:a + n + 256, a + m:a + m + 256])
    assert abs((r1.tx_px - r2.tx_px) - m) <= 0.01
    assert abs((r1.ty_px - r2.ty_px) - n) <= 0.01


def test_noise_robustness():
    for seed in (10, 11):
        ref, inp = pair(256, AffineTransform.rigid(-0.9, 1.4, np.radians(-0.25)), seed=seed, noise=0.01)
        res = register_tru(ref, inp)
        assert abs(res.tx_px + 0.9) <= 0.1 and abs(res.ty_px - 1.4) <= 0.1


def test_monotone_refinement_per_level():
    ref, inp = pair(128, AffineTransform.rigid(0.6, 0.3, np.radians(0.3)), seed=12)
    cfg = TruConfig(depth=3)
    res = register_tru(ref, inp, cfg)
    # replay each level from its seeded start and check the cost did not rise
    ref, inp = gaussian_smooth(ref, cfg.presmooth_sigma), gaussian_smooth(inp, cfg.presmooth_sigma)
    rp, ip = build_pyramid(ref, cfg.depth), build_pyramid(inp, cfg.depth)
    T = AffineTransform.identity()
    for level, _, cost in res.per_level:
        s = 2.0 ** level
        prob = SSDProblem(rp[level], prefilter(ip[level]), cfg.model, center=(63.5 / s, 63.5 / s))
        r0 = prob.residuals(cfg.model.to_params(T))
        assert cost <= 0.5 * float(r0 @ r0)
        out = minimize(prob, cfg.model.to_params(T), cfg.ml)
        assert out.cost == cost
        T = prob.transform(out.params)
        if level:
            T = AffineTransform(T.a11, T.a12, T.a21, T.a22, 2 * T.tx, 2 * T.ty)


def test_photometric_mode():
    ref, inp = pair(128, AffineTransform.translation(0.3, 0.2), seed=13)
    res = register_tru(ref, 1.2 * inp + 40.0, TruConfig(depth=3, photometric=True))
    assert abs(res.tx_px - 0.3) <= 0.02 and abs(res.ty_px - 0.2) <= 0.02
    # gain and offset map input intensities onto the reference
    assert res.gain == pytest.approx(1 / 1.2, rel=1e-3)
    assert res.offset == pytest.approx(-40.0 / 1.2, rel=1e-2)


def test_finest_level_cap():
    ref, inp = pair(128, AffineTransform.translation(1.0, -1.0), seed=14)
    res = register_tru(ref, inp, TruConfig(depth=3, finest_level=1))
    assert [lvl for lvl, _, _ in res.per_level] == [3, 2, 1]
    assert abs(res.tx_px - 1.0) <= 0.1


def test_divisibility_error():
    img = smooth_image((120, 128), seed=1)
    with pytest.raises(ValueError, match="2\\*\\*4 = 16"):
        register_tru(img, img)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        register_tru(np.ones((64, 64)), np.ones((64, 128)), TruConfig(depth=2))


def test_failure_is_flagged_not_raised(monkeypatch):
    import subpixreg.tru as tru_mod

    real = tru_mod.minimize

    def flaky(problem, p0, cfg):
        if problem.h == 32:
            raise OptimizationError("normal equations not positive definite up to lambda_max")
        return real(problem, p0, cfg)

    monkeypatch.setattr(tru_mod, "minimize", flaky)
    ref, inp = pair(128, AffineTransform.translation(0.5, 0.5), seed=3)
    res = register_tru(ref, inp, TruConfig(depth=3))
    assert not res.converged and res.failed_level == 2
    assert [lvl for lvl, _, _ in res.per_level] == [3]
    assert res.message.startswith("level 2:")


def test_trial_steps_leaving_overlap_are_rejected():
    # At the 16x16 top level a 0.85 overlap floor leaves little slack, so
    # early damped trial steps can fall outside it.
    ref, inp = pair(128, AffineTransform.translation(0.4, -0.3), seed=5)
    res = register_tru(ref, inp, TruConfig(depth=3, min_valid_fraction=0.85))
    assert res.converged
    assert abs(res.tx_px - 0.4) <= 0.02 and abs(res.ty_px + 0.3) <= 0.02


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TruConfig(depth=0)
    with pytest.raises(ValueError):
        TruConfig(min_valid_fraction=0.0)
    cfg = TruConfig(depth=3, model="affine", ml=MLConfig(max_iters=20))
    assert TruConfig.from_dict(cfg.to_dict()) == cfg


# --- batch -----------------------------------------------------------------------

def batch_inputs():
    spec = random_scene(192, 128, seed=15)
    frames = [render_scene(spec, AffineTransform.translation(0.1 * i, -0.05 * i)) for i in range(3)]
    regions = {"left": (slice(0, 128), slice(0, 64)), "right": (slice(0, 128), slice(128, 192))}
    ref = {k: frames[0][s] for k, s in regions.items()}
    inputs = [(f"img_{i}", {k: f[s] for k, s in regions.items()}) for i, f in enumerate(frames)]
    return ref, inputs


def test_batch_shape_and_order():
    ref, inputs = batch_inputs()
    rows = register_batch_tru(ref, inputs, TruConfig(depth=2))
    assert len(rows) == 3 * 2
    assert [(i, n) for i, n, _ in rows] == [(f"img_{k}", n) for k in range(3) for n in ("left", "right")]
    assert abs(rows[0][2].tx_px) <= 1e-9 and abs(rows[1][2].ty_px) <= 1e-9


def test_batch_parallel_equals_serial():
    ref, inputs = batch_inputs()
    cfg = TruConfig(depth=2)
    a = register_batch_tru(ref, inputs, cfg, n_jobs=1)
    b = register_batch_tru(ref, inputs, cfg, n_jobs=2)
    for (ia, na, ra), (ib, nb, rb) in zip(a, b):
        assert (ia, na) == (ib, nb)
        assert (ra.tx_px, ra.ty_px, ra.theta_deg, ra.final_cost) == (rb.tx_px, rb.ty_px, rb.theta_deg, rb.final_cost)


def test_batch_failures_are_carried():
    ref, inputs = batch_inputs()
    inputs[1][1]["left"] = np.ones((100, 64))
    rows = register_batch_tru(ref, inputs, TruConfig(depth=2))
    assert len(rows) == 6
    bad = rows[2][2]
    assert isinstance(bad, RegistrationResult) and not bad.converged and np.isnan(bad.tx_px)
    assert rows[3][2].converged


def test_batch_missing_region():
    ref, inputs = batch_inputs()
    del inputs[0][1]["right"]
    with pytest.raises(ValueError, match="lacks region"):
        register_batch_tru(ref, inputs)


# --- estimator ---------------------------------------------------------------------

def test_estimator_params_and_clone():
    est = TRURegistration(depth=3, model="translation")
    assert est.get_params()["depth"] == 3
    twin = clone(est).set_params(max_iters=10)
    assert twin.get_params()["model"] == "translation" and twin.max_iters == 10


def test_estimator_predict_and_transform():
    ref, inp = pair(128, AffineTransform.translation(1.5, -0.5), seed=16)
    est = TRURegistration(depth=3).fit(ref)
    pred = est.predict([ref, inp])
    assert pred.shape == (2, 3)
    np.testing.assert_allclose(pred[0], 0.0, atol=1e-8)
    assert abs(pred[1, 0] - 1.5) <= 0.02 and abs(pred[1, 1] + 0.5) <= 0.02
    assert len(est.results_) == 2
    warped = est.transform(inp[None])
    inner = (slice(8, -8), slice(8, -8))
    assert np.abs(warped[0][inner] - ref[inner]).max() < 0.02 * np.ptp(ref)
    np.testing.assert_allclose(TRURegistration(depth=3).fit_predict(np.stack([ref, inp])), pred)


def test_estimator_not_fitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        TRURegistration().predict(np.ones((1, 64, 64)))


def test_compose_with_result_recovers_identity():
    T = AffineTransform.rigid(0.7, 0.2, np.radians(-0.3))
    ref, inp = pair(128, T, seed=17)
    res = register_tru(ref, inp, TruConfig(depth=3))
    resid = compose(invert(T), res.transform)
    assert abs(resid.tx) <= 0.02 and abs(resid.ty) <= 0.02


def test_presmooth_counters_noise_bias():
    # interpolating the noisy input pulls unsmoothed estimates toward the half-pixel phase
    tx, ty, th = np.random.default_rng(1003).uniform([-3, -3, -0.5], [3, 3, 0.5])
    spec = random_scene(512, 512, seed=3)
    spec = dataclasses.replace(spec, noise_sigma=0.01 * np.ptp(render_scene(spec)))
    a = render_scene(spec, noise_key=(0,))
    b = render_scene(spec, AffineTransform.rigid(tx, ty, np.radians(th)), noise_key=(1,))
    raw = register_tru(a, b, TruConfig(presmooth_sigma=0.0))
    smooth = register_tru(a, b)
    assert abs(raw.tx_px - tx) > 0.1
    assert abs(smooth.tx_px - tx) <= 0.01 and abs(smooth.ty_px - ty) <= 0.01


def test_presmooth_config():
    assert TruConfig().presmooth_sigma == 1.0
    assert TruConfig.from_dict(TruConfig(presmooth_sigma=0.5).to_dict()).presmooth_sigma == 0.5
    with pytest.raises(ValueError, match="presmooth"):
        TruConfig(presmooth_sigma=-1.0)
