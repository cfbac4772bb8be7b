import logging

import numpy as np
import pytest

from splatview import scenegen
from splatview.cloud import cloud_from_rgbd
from splatview.experiments import covisible, fixture_data, load_fixture, save_fixture
from splatview.losses import psnr
from splatview.pipeline import foreground_hull, sparse_cloud, synthesize, unpremultiply


@pytest.fixture(scope="module")
def clear_fixture():
    fx = scenegen.make_fixture(101, n_targets=2, size=64, occluder=False)
    return fx, fixture_data(fx)


def _footprint_cloud(frame, cam):
    return cloud_from_rgbd(frame, cam, 1.5 * frame.depth[frame.valid_mask].max() / cam.fx)


def test_unpremultiply_inverts_blend(rng):
    fg = rng.uniform(size=(4, 4, 3))
    a = rng.uniform(0.1, 1.0, size=(4, 4))
    bg = np.array([0.2, 0.3, 0.4])
    blend = a[..., None] * fg + (1 - a[..., None]) * bg
    np.testing.assert_allclose(unpremultiply(blend, a, bg), fg, atol=1e-12)
    assert not unpremultiply(blend, np.zeros((4, 4)), bg).any()


def test_foreground_hull_closes_gaps():
    alpha = np.zeros((20, 20))
    alpha[5:15, 5:15] = 1.0
    alpha[9, 5:15] = 0.0  # a one-pixel crack
    hull = foreground_hull(alpha)
    assert hull[9, 8] and not hull[0, 0]
    iuv = np.zeros((20, 20, 3))
    iuv[2:4, 2:4, 0] = 3
    np.testing.assert_array_equal(foreground_hull(alpha, dst_iuv=iuv), iuv[..., 0] > 0)


def test_round_trip_at_source(clear_fixture):
    fx, data = clear_fixture
    frame, cam = data.input
    res = synthesize(cloud_from_rgbd(frame, cam), cam, data.background, complete=False)
    assert psnr(res.image, frame.rgb) >= 40
    # completion only touches the foreground hull
    done = synthesize(cloud_from_rgbd(frame, cam), cam, data.background)
    np.testing.assert_array_equal(done.image[~done.hull], res.image[~done.hull])


def test_fusion_without_occluder_changes_little(clear_fixture):
    fx, data = clear_fixture
    frame, cam = data.input
    free = data.occlusion_free[0]
    cloud = _footprint_cloud(frame, cam)
    for tgt, c in data.targets:
        base = synthesize(cloud, c, data.background, dst_iuv=tgt.iuv)
        fused = synthesize(cloud, c, data.background, dst_iuv=tgt.iuv,
                           occlusion_free=(free.rgb, free.iuv))
        changed = np.abs(fused.image - base.image).max(axis=-1) > 0.05
        assert changed.mean() <= 0.01


def test_fusion_fills_occluded_region(fixture_small):
    data = fixture_data(fixture_small)
    frame, cam = data.input
    cloud = cloud_from_rgbd(frame, cam)
    free = data.occlusion_free[0]
    tgt, c = data.targets[0]
    base = synthesize(cloud, c, data.background, dst_iuv=tgt.iuv)
    fused = synthesize(cloud, c, data.background, dst_iuv=tgt.iuv, occlusion_free=(free.rgb, free.iuv))
    assert psnr(fused.image, tgt.rgb) > psnr(base.image, tgt.rgb)


def test_missing_target_iuv_warns(clear_fixture, caplog):
    _, data = clear_fixture
    frame, cam = data.input
    free = data.occlusion_free[0]
    with caplog.at_level(logging.WARNING):
        res = synthesize(cloud_from_rgbd(frame, cam), data.targets[0][1], data.background,
                         occlusion_free=(free.rgb, free.iuv))
    assert res.warped is None
    assert "skipping texture transfer" in caplog.text


def test_without_completion_keeps_background(clear_fixture):
    _, data = clear_fixture
    frame, cam = data.input
    res = synthesize(sparse_cloud(frame, cam, 0.2, 0), data.targets[0][1], data.background,
                     complete=False)
    outside = ~res.hull
    np.testing.assert_allclose(res.image[outside], np.broadcast_to(data.background,
                                                                   (outside.sum(), 3)))


def test_fixture_disk_round_trip(tmp_path, fixture_small):
    save_fixture(fixture_small, tmp_path / "fx")
    data = load_fixture(tmp_path / "fx")
    assert len(data.targets) == len(fixture_small.target_cameras)
    assert data.scene.to_json() == fixture_small.scene.to_json()
    assert data.occlusion_free is not None


def test_covisible_self(clear_fixture):
    _, data = clear_fixture
    frame, cam = data.input
    np.testing.assert_array_equal(covisible(frame.depth, cam, frame.depth, cam), frame.valid_mask)
