import warnings

import numpy as np
import pytest
from sklearn.base import clone

from oracles import smooth_image
from subpixreg.affine import AffineTransform
from subpixreg.synth import random_scene, render_scene
from subpixreg.xreg import (
    BoxSpec,
    CorrelationSurface,
    XREGRegistration,
    XregError,
    auto_coarse_match,
    correlation_surface,
    parabolic_peak,
    register_xreg,
    select_boxes,
)


@pytest.fixture(scope="module")
def scene_pair():
    spec = random_scene(256, 256, seed=21)
    ref = render_scene(spec)
    inp = render_scene(spec, AffineTransform.translation(0.4, 0.7))
    return ref, inp


def shift_int(img, dx, dy):
    # content displaced by (+dx, +dy): out[y, x] = img[y - dy, x - dx]
    return np.roll(np.roll(img, dy, axis=0), dx, axis=1)


def paraboloid_surface(vx, vy, r=2, peak=1.0, a=-0.3, b=-0.2, c=0.05, offset=(0, 0)):
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(float)
    u, v = xx - vx, yy - vy
    return CorrelationSurface(peak + a * u * u + b * v * v + c * u * v, offset, r)


# --- BoxSpec ------------------------------------------------------------------------

def test_boxspec_window_and_round_trip():
    box = BoxSpec("b", (40.4, 30.6), (1, -2), half_size=5)
    assert box.ref_center == (40, 31)
    ys, xs = box.window(2, -1)
    assert (ys.start, ys.stop, xs.start, xs.stop) == (25, 36, 37, 48)
    assert BoxSpec.from_dict(box.to_dict()) == box
    assert box.fits((64, 64), 8) and not box.fits((64, 64), 20)


def test_boxspec_bad_half_size():
    with pytest.raises(ValueError):
        BoxSpec("b", (10, 10), half_size=0)


# --- coarse match ----------------------------------------------------------------------

def test_coarse_match_identity(smooth64):
    assert auto_coarse_match(smooth64, smooth64, BoxSpec("b", (32, 32), half_size=10)) == (0, 0)


def test_coarse_match_integer_shift():
    img = smooth_image((96, 96), sigma=2.0, seed=4)
    box = BoxSpec("b", (48, 48), half_size=12)
    assert auto_coarse_match(img, shift_int(img, 3, -2), box) == (3, -2)


@pytest.mark.parametrize("seed", range(6))
def test_coarse_match_agrees_with_ssd_argmin(seed):
    rng = np.random.default_rng(seed)
    img = smooth_image((96, 96), sigma=1.5, seed=seed + 30)
    dx, dy = (int(v) for v in rng.integers(-6, 7, 2))
    inp = shift_int(img, dx, dy) + rng.normal(0, 5.0, img.shape)
    box = BoxSpec("b", (48, 48), half_size=10)
    patch = img[box.window()]
    best = min(
        (np.sum((inp[box.window(i, j)] - patch) ** 2), i * i + j * j, i, j)
        for j in range(-8, 9) for i in range(-8, 9)
    )
    assert auto_coarse_match(img, inp, box) == (best[2], best[3]) == (dx, dy)


def test_coarse_match_flat_box():
    img = np.zeros((64, 64))
    img[40:, 40:] = 1.0
    with pytest.raises(XregError, match="zero-variance"):
        auto_coarse_match(img, img, BoxSpec("flat", (16, 16), half_size=6))


def test_coarse_match_tie_prefers_small_offset():
    # vertical stripes: every vertical offset scores the same
    img = np.tile(np.sin(np.arange(64) / 2.0), (64, 1))
    assert auto_coarse_match(img, img, BoxSpec("b", (32, 32), half_size=8)) == (0, 0)


def test_coarse_match_box_too_close_to_edge(smooth64):
    with pytest.raises(XregError, match="leaves the image"):
        auto_coarse_match(smooth64, smooth64, BoxSpec("b", (10, 32), half_size=8))


# --- correlation surface ----------------------------------------------------------------

def test_surface_identity_peak(scene_pair):
    ref, _ = scene_pair
    s = correlation_surface(ref, ref, BoxSpec("b", (128, 128)), r=2)
    assert s.values.shape == (5, 5) and s.r == 2
    assert s.values[2, 2] == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.delete(s.values.ravel(), 12) < s.values[2, 2])
    np.testing.assert_allclose(s.values, s.values[::-1, ::-1], atol=1e-15)
    assert np.all(np.abs(s.values) <= 1.0 + 1e-12)


@pytest.mark.parametrize("symmetric", [True, False])
def test_surface_integer_shift_peak(symmetric):
    img = smooth_image((96, 96), sigma=2.0, seed=9)
    s = correlation_surface(img, shift_int(img, 1, 0), BoxSpec("b", (48, 48)), symmetric=symmetric)
    assert np.unravel_index(np.argmax(s.values), s.values.shape) == (2, 3)


def test_surface_intensity_invariance(scene_pair):
    ref, inp = scene_pair
    box = BoxSpec("b", (128, 128), (0, 1))
    a = correlation_surface(ref, inp, box).values
    b = correlation_surface(ref, 3.7 * inp + 250.0, box).values
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_surface_raw_mode_is_exposure_dependent(scene_pair):
    ref, inp = scene_pair
    box = BoxSpec("b", (128, 128))
    a = correlation_surface(ref, inp, box, normalized=False).values
    b = correlation_surface(ref, 2.0 * inp, box, normalized=False).values
    np.testing.assert_allclose(b, 2.0 * a, rtol=1e-12)


def test_surface_errors(smooth64):
    with pytest.raises(ValueError):
        correlation_surface(smooth64, smooth64, BoxSpec("b", (32, 32)), r=0)
    with pytest.raises(XregError, match="leaves the image"):
        correlation_surface(smooth64, smooth64, BoxSpec("b", (32, 32), (14, 0)))
    flat = np.full((64, 64), 5.0)
    with pytest.raises(XregError, match="zero-variance"):
        correlation_surface(smooth64, flat, BoxSpec("b", (32, 32), half_size=8), symmetric=False)


# --- parabolic peak ------------------------------------------------------------------------

def test_peak_symmetric_surface():
    yy, xx = np.mgrid[-2:3, -2:3].astype(float)
    s = CorrelationSurface(np.exp(-(xx ** 2 + yy ** 2) / 3.0), (4, -1), 2)
    assert parabolic_peak(s) == pytest.approx((4.0, -1.0), abs=1e-15)


def test_peak_separable_slice():
    px = np.array([0.5, 1.0, 0.9])
    py = np.array([0.6, 1.0, 0.6])
    vals = np.full((5, 5), -5.0)
    vals[1:4, 1:4] = py[:, None] + px[None, :]
    dx, dy = parabolic_peak(CorrelationSurface(vals, (0, 0), 2))
    assert dx == pytest.approx((0.5 - 0.9) / (2 * (0.5 - 2.0 + 0.9)), abs=1e-12)
    assert dx == pytest.approx(1 / 3, abs=1e-12)
    assert dy == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("vx,vy", [(0.3, -0.2), (-0.45, 0.45), (0.0, 0.05)])
def test_peak_paraboloid_exact(vx, vy):
    dx, dy = parabolic_peak(paraboloid_surface(vx, vy, offset=(2, 3)))
    assert abs(dx - (vx + 2)) <= 1e-12 and abs(dy - (vy + 3)) <= 1e-12


def test_peak_off_center_discrete_max():
    # vertex near (+1.2, 0): the discrete max moves to i = r + 1
    dx, dy = parabolic_peak(paraboloid_surface(1.2, -0.1))
    assert dx == pytest.approx(1.2, abs=1e-12) and dy == pytest.approx(-0.1, abs=1e-12)


def test_peak_full_surface_fit():
    dx, dy = parabolic_peak(paraboloid_surface(0.3, -0.2), fit_size=5)
    assert dx == pytest.approx(0.3, abs=1e-12) and dy == pytest.approx(-0.2, abs=1e-12)
    with pytest.raises(ValueError):
        parabolic_peak(paraboloid_surface(0.3, -0.2), fit_size=4)


def test_peak_errors():
    with pytest.raises(XregError, match="border"):
        parabolic_peak(paraboloid_surface(2.0, 0.0))
    # the centre is the discrete max, but the rows above and below bow upward
    core = np.array([[0.9, 0.0, 0.9], [0.95, 1.0, 0.95], [0.9, 0.0, 0.9]])
    with pytest.raises(XregError, match="concave"):
        parabolic_peak(CorrelationSurface(np.pad(core, 1, constant_values=-9.0), (0, 0), 2))
    # a ridge whose least-squares vertex lands more than a pixel away
    yy, xx = np.mgrid[-2:3, -2:3].astype(float)
    ridge = -0.01 * (xx - 3.0) ** 2 - 0.5 * yy ** 2
    ridge[2, 3] += 0.02
    with pytest.raises(XregError):
        parabolic_peak(CorrelationSurface(ridge, (0, 0), 2))


# --- register_xreg ---------------------------------------------------------------------------

def test_register_identity(scene_pair):
    ref, _ = scene_pair
    boxes = select_boxes(ref)
    res = register_xreg(ref, ref, boxes)
    np.testing.assert_allclose(res.per_box, 0.0, atol=1e-12)
    assert abs(res.tx_px) <= 1e-12 and abs(res.ty_px) <= 1e-12 and res.n_used == 9


def test_register_global_shift(scene_pair):
    ref, inp = scene_pair
    res = register_xreg(ref, inp, select_boxes(ref))
    assert abs(res.tx_px - 0.4) <= 0.05 and abs(res.ty_px - 0.7) <= 0.05
    assert res.tx_px == np.median([p[0] for p in res.per_box])


def test_register_intensity_invariance(scene_pair):
    ref, inp = scene_pair
    boxes = select_boxes(ref)
    a = register_xreg(ref, inp, boxes)
    b = register_xreg(ref, 0.6 * inp + 123.0, boxes)
    assert abs(a.tx_px - b.tx_px) <= 1e-6 and abs(a.ty_px - b.ty_px) <= 1e-6


def corrupt(inp, boxes, idx, rng, reach=11):
    out = inp.copy()
    for k in idx:
        ys, xs = boxes[k].window()
        ys = slice(ys.start - reach, ys.stop + reach)
        xs = slice(xs.start - reach, xs.stop + reach)
        dx, dy = (int(v) for v in rng.integers(-4, 5, 2))
        src = np.roll(np.roll(inp, dy, axis=0), dx, axis=1)
        out[ys, xs] = src[ys, xs] + rng.normal(0, rng.uniform(0, 2000), (ys.stop - ys.start, xs.stop - xs.start))
    return out


def test_median_breakdown(scene_pair):
    ref, inp = scene_pair
    boxes = select_boxes(ref, half_size=12)
    rng = np.random.default_rng(5)
    for _ in range(3):
        bad = rng.choice(9, 4, replace=False)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = register_xreg(ref, corrupt(inp, boxes, bad, rng), boxes)
        good = np.array([res.per_box[k] for k in range(9) if k not in bad])
        assert good.min(0)[0] <= res.tx_px <= good.max(0)[0]
        assert good.min(0)[1] <= res.ty_px <= good.max(0)[1]


def test_dropped_boxes_warn_and_majority_rule():
    ref = smooth_image((256, 256), sigma=2.0, seed=12)
    inp = shift_int(ref, 1, -1)
    # 3x3 grid, far enough apart that flattening one box's search area
    # leaves its neighbours alone
    boxes = [BoxSpec(f"g{k}", (48 + 80 * (k % 3), 48 + 80 * (k // 3)), half_size=12) for k in range(9)]
    flat = inp.copy()
    for b in boxes[:4]:
        ys, xs = b.window()
        flat[ys.start - 11:ys.stop + 11, xs.start - 11:xs.stop + 11] = 1000.0
    with pytest.warns(RuntimeWarning, match="dropped"):
        res = register_xreg(ref, flat, boxes)
    assert res.n_used == 5 and set(res.failures) == {b.name for b in boxes[:4]}
    assert np.isnan(res.per_box[0][0])
    for b in boxes[4:5]:
        ys, xs = b.window()
        flat[ys.start - 11:ys.stop + 11, xs.start - 11:xs.stop + 11] = 1000.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(XregError, match="only 4 of 9"):
            register_xreg(ref, flat, boxes)


def test_register_needs_three_boxes(scene_pair):
    ref, _ = scene_pair
    with pytest.raises(ValueError, match="at least 3"):
        register_xreg(ref, ref, select_boxes(ref)[:2])


def test_manual_offsets(scene_pair):
    ref, inp = scene_pair
    boxes = [BoxSpec(b.name, b.ref_center, (0, 1), b.half_size) for b in select_boxes(ref)]
    res = register_xreg(ref, inp, boxes, auto_match=False)
    assert abs(res.tx_px - 0.4) <= 0.05 and abs(res.ty_px - 0.7) <= 0.05


def test_select_boxes(scene_pair):
    ref, _ = scene_pair
    boxes = select_boxes(ref, n=9, half_size=16)
    assert len(boxes) == 9 and len({b.name for b in boxes}) == 9
    for i, a in enumerate(boxes):
        assert a.fits(ref.shape, 11)
        for b in boxes[i + 1:]:
            assert max(abs(a.ref_center[0] - b.ref_center[0]), abs(a.ref_center[1] - b.ref_center[1])) > 16
    assert select_boxes(ref) == boxes
    with pytest.raises(ValueError):
        select_boxes(np.ones((40, 40)))
    with pytest.raises(ValueError, match="textured"):
        select_boxes(np.ones((256, 256)))


def test_estimator(scene_pair):
    ref, inp = scene_pair
    est = XREGRegistration(half_size=12)
    assert clone(est).get_params()["half_size"] == 12
    pred = est.fit(ref).predict([ref, inp])
    assert pred.shape == (2, 2) and len(est.boxes_) == 9
    np.testing.assert_allclose(pred[0], 0.0, atol=1e-12)
    assert abs(pred[1, 0] - 0.4) <= 0.05
    manual = XREGRegistration(boxes=[b.to_dict() for b in est.boxes_]).fit(ref)
    np.testing.assert_array_equal(manual.predict([inp]), pred[1:])
