import numpy as np
import pytest

from splatview import scenegen
from splatview.cloud import RGBDFrame, cloud_from_rgbd
from splatview.errors import EmptyOverlap, RangeError, ShapeError
from splatview.geometry import Camera, RigidTransform, look_at
from splatview.losses import psnr
from splatview.raster import render
from splatview.warping import (WarpedImage, bilinear_sample, build_atlas, composite,
                               consistency_value, forward_depth_warp, fuse, inverse_warp_W,
                               iuv_warp)


@pytest.fixture(scope="module")
def view(fixture_small):
    return scenegen.raytrace(fixture_small.scene, fixture_small.input_camera), fixture_small


def test_warped_image_zeroes_invalid():
    w = WarpedImage(np.ones((2, 2, 3)), np.array([[True, False], [False, True]]))
    assert w.image[0, 1].tolist() == [0, 0, 0]
    assert w.coverage == 0.5
    with pytest.raises(ShapeError):
        WarpedImage(np.ones((2, 2)), np.ones((3, 2), dtype=bool))


def test_forward_warp_identity(view):
    frame, fx = view
    w = forward_depth_warp(frame, fx.input_camera, fx.input_camera)
    np.testing.assert_array_equal(w.validity, frame.valid_mask)
    np.testing.assert_array_equal(w.image[frame.valid_mask], frame.rgb[frame.valid_mask])


def test_forward_warp_never_gains_pixels(view):
    frame, fx = view
    for cam in fx.target_cameras:
        w = forward_depth_warp(frame, fx.input_camera, cam)
        assert w.validity.sum() <= frame.valid_mask.sum()


def test_forward_warp_ties_prefer_lower_index():
    cam = Camera(10.0, 10.0, 2.0, 1.0, 4, 2)
    dst = Camera(1.0, 1.0, 0.5, 0.5, 1, 1)  # every point lands on the single pixel
    rgb = np.arange(24, dtype=np.float64).reshape(2, 4, 3) / 24
    frame = RGBDFrame(rgb, np.full((2, 4), 2.0))
    w = forward_depth_warp(frame, cam, dst)
    # all points have the same depth, so the first source pixel wins
    np.testing.assert_array_equal(w.image[0, 0], rgb[0, 0])
    near = frame.depth.copy()
    near[1, 2] = 1.5
    w = forward_depth_warp(frame.with_depth(near), cam, dst)
    np.testing.assert_array_equal(w.image[0, 0], rgb[1, 2])


def test_bilinear_sample_values():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    val, ok = bilinear_sample(img, np.array([0.5, 1.0, 1.5, 0.2]), np.array([0.5, 1.0, 1.5, 0.5]))
    np.testing.assert_allclose(val[:3], [0.0, 1.5, 3.0])
    assert ok.tolist() == [True, True, True, False]
    assert val[3] == 0


def test_inverse_warp_identity(view):
    frame, fx = view
    w = inverse_warp_W(frame.rgb, frame.depth, fx.input_camera, fx.input_camera)
    np.testing.assert_array_equal(w.validity, frame.valid_mask)
    assert np.max(np.abs(w.image - frame.rgb)[frame.valid_mask]) < 1e-6


def test_inverse_warp_matches_ray_traced_view(view):
    # gather the input view into a nearby camera: covisible pixels must agree
    frame, fx = view
    cam = fx.input_camera
    moved = cam.with_pose(look_at(cam.center + np.array([0.05, 0.0, 0.02]),
                                  scenegen.SUBJECT_CENTROID))
    tgt = scenegen.raytrace(fx.scene, moved)
    w = inverse_warp_W(frame.rgb, tgt.depth, moved, cam)
    seen = w.validity & scenegen.visible_from(fx.scene, tgt, moved, cam)
    assert seen.sum() > 100
    assert psnr(w.image, tgt.rgb, seen) > 25


def test_consistency_zero_for_identical_cameras(view):
    frame, fx = view
    assert consistency_value(frame.rgb, frame.rgb, frame.depth, fx.input_camera,
                             fx.input_camera) == 0.0


def test_consistency_empty_overlap(cam):
    away = cam.with_pose(RigidTransform(np.diag([-1.0, 1.0, -1.0])))
    img = np.zeros((cam.height, cam.width, 3))
    with pytest.raises(EmptyOverlap):
        consistency_value(img, img, np.ones((cam.height, cam.width)), cam, away)


def test_iuv_round_trip(view):
    frame, _ = view
    w = iuv_warp(frame.rgb, frame.iuv, frame.iuv)
    np.testing.assert_array_equal(w.validity, np.rint(frame.iuv[..., 0]) > 0)
    assert psnr(w.image, frame.rgb, frame.fg_mask) > 35


def test_iuv_missing_part_invalid(view):
    frame, _ = view
    src_iuv = frame.iuv.copy()
    src_iuv[np.rint(src_iuv[..., 0]) == 2] = 0.0
    w = iuv_warp(frame.rgb, src_iuv, frame.iuv)
    assert not w.validity[np.rint(frame.iuv[..., 0]) == 2].any()


def test_atlas_shape(view):
    frame, _ = view
    atlases, present = build_atlas(frame.rgb, frame.iuv, size=32)
    assert atlases.shape == (25, 32, 32, 3)
    assert present[1] and not present[0]


def test_composite_and_fuse():
    raw = np.full((2, 2, 3), 0.5)
    m = np.array([[1.0, 0.0], [1.0, 1.0]])
    c = np.array([[1.0, 1.0], [0.5, 0.0]])
    p = composite(raw, m, c)
    np.testing.assert_allclose(p[..., 0], [[0.5, 0.0], [0.25, 0.0]])
    warped = WarpedImage(np.full((2, 2, 3), 0.8), np.array([[True, True], [True, False]]))
    f = fuse(p, c, warped)
    np.testing.assert_allclose(f[..., 0], [[0.5, 0.0], [0.65, 0.0]])
    with pytest.raises(RangeError):
        composite(raw, m * 2, c)
    with pytest.raises(RangeError):
        fuse(p, c - 1, warped)
    with pytest.raises(ShapeError):
        composite(raw, np.ones((3, 3)), c)


def test_fuse_is_noop_with_full_confidence(rng):
    p = rng.uniform(size=(4, 4, 3))
    warped = WarpedImage(rng.uniform(size=(4, 4, 3)), np.ones((4, 4), dtype=bool))
    np.testing.assert_array_equal(fuse(p, np.ones((4, 4)), warped), p)


def test_spheres_cover_at_least_forward_warp(view):
    # spheres at least one pixel footprint wide cover whatever point splats cover
    frame, fx = view
    cam = fx.input_camera
    radius = 1.5 * frame.depth[frame.valid_mask].max() / cam.fx
    cloud = cloud_from_rgbd(frame, cam, radius)
    for c in fx.target_cameras:
        alpha = render(cloud, c).alpha
        fw = forward_depth_warp(frame, cam, c)
        assert (alpha >= 0.5).mean() >= fw.coverage
