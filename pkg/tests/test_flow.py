import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter, shift as nd_shift

from rvk.flow import (FlowPyramid, build_pyramid, downsample2, endpoint_error, estimate_flow,
                      match_level, oracle_flow_pyramid)
from rvk.formats import read_flo
from rvk.geometry import BoundingBox
from rvk.sampling import CropSpec, make_patch_pair


def _texture(h, w, seed, sigma=1.5):
    img = gaussian_filter(np.random.default_rng(seed).random((h, w)), sigma)
    return 255 * (img - img.min()) / np.ptp(img)


def test_pyramid_single_level_identity():
    a = np.random.default_rng(0).random((10, 12, 2))
    out = build_pyramid(a, 1)
    assert len(out) == 1
    np.testing.assert_array_equal(out[0], a)


def test_pyramid_flow_halving():
    f = np.zeros((16, 16, 2))
    f[..., 0], f[..., 1] = 4.0, 2.0
    lv = build_pyramid(f, 3)
    np.testing.assert_allclose(lv[2][..., 0], 1.0)
    np.testing.assert_allclose(lv[2][..., 1], 0.5)
    assert lv[2].shape == (4, 4, 2)


def test_pyramid_checkerboard_mid_grey():
    board = (np.indices((4, 4)).sum(0) % 2).astype(float)
    out = build_pyramid(board, 2, is_flow=False)[1]
    np.testing.assert_array_equal(out, np.full((2, 2), 0.5))


def test_pyramid_rejects():
    with pytest.raises(ValueError):
        build_pyramid(np.zeros((8, 8)), 0)
    with pytest.raises(ValueError):
        build_pyramid(np.zeros((8, 8)), 5)


@given(st.integers(1, 40), st.integers(1, 40))
def test_downsample_ceil_shape(h, w):
    assert downsample2(np.zeros((h, w))).shape == (-(-h // 2), -(-w // 2))


def test_pyramid_sizes_match_patch():
    lv = build_pyramid(np.zeros((384, 448, 2)), 4)
    assert [x.shape[:2] for x in lv] == [(384, 448), (192, 224), (96, 112), (48, 56)]


def test_oracle_static_zero():
    spec = CropSpec(BoundingBox(10, 10, 60, 50), 32, 24)
    pyr = oracle_flow_pyramid(np.zeros((100, 100, 2)), spec, 3)
    assert all(not lv.any() for lv in pyr.levels)


def test_oracle_unit_conversion():
    gt = np.zeros((100, 100, 2))
    gt[..., 0] = 3.0
    spec = CropSpec(BoundingBox(0, 0, 224, 192))  # scale 0.5
    pyr = oracle_flow_pyramid(gt, spec)
    np.testing.assert_allclose(pyr.levels[0][..., 0], 6.0)
    np.testing.assert_allclose(pyr.levels[0][..., 1], 0.0)
    np.testing.assert_allclose(pyr.levels[1][..., 0], 3.0)


def test_identical_patches_zero_flow():
    t = _texture(96, 112, 1)
    pyr = estimate_flow(t, t.copy())
    assert pyr.confident
    assert all(np.abs(lv).max() == 0 for lv in pyr.levels)


def test_constant_patch_not_confident():
    pyr = estimate_flow(np.full((64, 64), 7.0), _texture(64, 64, 2))
    assert not pyr.confident
    assert all(not lv.any() for lv in pyr.levels)
    with pytest.raises(ValueError):
        estimate_flow(np.zeros((8, 8)), np.zeros((8, 9)))


def test_global_shift_recovered():
    base = _texture(260, 300, 3)
    tpl, cur = base[20:212, 20:244], base[22:214, 14:238]  # content moves (+6, -2)
    fl = estimate_flow(tpl, cur).levels[0]
    inner = fl[20:-20, 20:-20]
    np.testing.assert_allclose(inner.reshape(-1, 2).mean(0), [6, -2], atol=0.5)


@settings(max_examples=15, deadline=None)
@given(st.floats(0, 2.25), st.floats(0, 2 * np.pi), st.integers(0, 1000))
def test_small_textured_shift_epe(mag, angle, seed):
    # shifts up to a quarter of the 9 px window
    u, v = mag * np.cos(angle), mag * np.sin(angle)
    base = _texture(140, 160, seed, sigma=2.0)
    cur = nd_shift(base, (v, u), order=3, mode="nearest")
    fl = estimate_flow(base, cur).levels[0][12:-12, 12:-12]
    assert endpoint_error(fl, np.array([u, v])).mean() < 0.5


def test_match_level_windows_are_rigid():
    # an initial guess that varies per pixel, but always within the search
    # radius of the truth, must give the same answer as a constant guess
    base = _texture(120, 140, 8, sigma=2.0)
    cur = nd_shift(base, (1.0, 2.0), order=3, mode="nearest")
    flat = match_level(base, cur, np.zeros((120, 140, 2)))
    noisy_init = np.random.default_rng(0).integers(-2, 3, (120, 140, 2)).astype(float)
    noisy = match_level(base, cur, noisy_init)
    inner = (slice(10, -10), slice(10, -10))
    np.testing.assert_allclose(noisy[inner], flat[inner], atol=1e-9)


def test_zero_motion_stability():
    t = _texture(128, 128, 4)
    assert np.abs(estimate_flow(t, t).levels[0]).max() < 0.05


def test_pyramid_levels_consistent():
    base = _texture(200, 230, 5, sigma=2.5)
    cur = nd_shift(base, (1.5, 4.0), order=3, mode="nearest")
    lv = estimate_flow(base, cur).levels
    for k in range(2):
        up = 2.0 * np.repeat(np.repeat(lv[k + 1], 2, 0), 2, 1)[:lv[k].shape[0], :lv[k].shape[1]]
        m = 16 // 2 ** k
        assert endpoint_error(up[m:-m, m:-m], lv[k][m:-m, m:-m]).mean() < 1.0


def test_magnified_subpixel_motion_recovered():
    # 0.4 px in the frame becomes 3.2 px after an 8x magnifying crop
    base = _texture(300, 400, 6, sigma=1.2)
    moved = nd_shift(base, (0.0, 0.4), order=3, mode="nearest")
    box = BoundingBox(190, 140, 210, 156)            # 20x16 box, 8 px margin
    t, c, spec = make_patch_pair(base, moved, box, delta=8.0)
    assert 1 / spec.scale_x == pytest.approx(8.0) and 1 / spec.scale_y == pytest.approx(8.0)
    fl = estimate_flow(t, c).levels[0]
    pb = spec.to_patch(box)
    inner = fl[int(pb.t):int(pb.b), int(pb.l):int(pb.r)]
    assert abs(np.median(inner[..., 0]) - 3.2) < 0.5
    assert abs(np.median(inner[..., 1])) < 0.5


def test_dump_writes_levels(tmp_path):
    pyr = FlowPyramid(build_pyramid(np.ones((16, 16, 2)), 3))
    paths = pyr.dump(tmp_path, "v0")
    assert [p.name for p in paths] == ["v0_l0.flo", "v0_l1.flo", "v0_l2.flo"]
    np.testing.assert_allclose(read_flo(paths[2]), 0.25)


def test_estimator_deterministic():
    base = _texture(96, 96, 7)
    cur = nd_shift(base, (0.3, 1.7), order=3, mode="nearest")
    a, b = estimate_flow(base, cur), estimate_flow(base, cur)
    for x, y in zip(a.levels, b.levels):
        assert x.tobytes() == y.tobytes()
