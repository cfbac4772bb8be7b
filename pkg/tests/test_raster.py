import numpy as np
import pytest

from splatview.cloud import SphereCloud, radius_param_for
from splatview.errors import EmptyCloud, ShapeError
from splatview.geometry import Camera, RigidTransform, rotation_about
from splatview.gradcheck import check_gradients
from splatview.raster import (BACKENDS, RenderSettings, render, render_backward,
                              zbuffer_render)

from conftest import random_cloud

SETTINGS = [
    RenderSettings(),
    RenderSettings(gamma=0.5, tail=3.0, eps=0.1),
    RenderSettings(max_per_pixel=2, tail=2.0, tile_size=8),
]

needs_compiled = pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")


@needs_compiled
@pytest.mark.parametrize("settings", SETTINGS)
def test_backends_agree_forward(cloud, cam, settings):
    a = render(cloud, cam, settings, backend="compiled")
    b = render(cloud, cam, settings, backend="python")
    np.testing.assert_allclose(a.features, b.features, atol=1e-12)
    np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-12)
    np.testing.assert_allclose(a.depth, b.depth, atol=1e-12)
    np.testing.assert_allclose(a.margin, b.margin, atol=1e-12)
    np.testing.assert_array_equal(a.winner, b.winner)
    np.testing.assert_array_equal(a.count, b.count)
    np.testing.assert_array_equal(a.key, b.key)


@needs_compiled
@pytest.mark.parametrize("settings", SETTINGS)
def test_backends_agree_backward(cloud, cam, settings, rng):
    g = rng.normal(size=(cam.height, cam.width, 3))
    ga = rng.normal(size=(cam.height, cam.width))
    a = render_backward(cloud, cam, settings, g, ga, backend="compiled")
    b = render_backward(cloud, cam, settings, g, ga, backend="python")
    scale = np.abs(a.flat()).max()
    np.testing.assert_allclose(a.flat(), b.flat(), atol=1e-10 * scale)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_bit_stable_for_fixed_threads(cloud, cam, backend, rng):
    g = rng.normal(size=(cam.height, cam.width, 3))
    s = RenderSettings(tile_size=8)
    for threads in (1, 3):
        a = render(cloud, cam, s, threads=threads, backend=backend)
        b = render(cloud, cam, s, threads=threads, backend=backend)
        assert a.features.tobytes() == b.features.tobytes()
        ga = render_backward(cloud, cam, s, g, threads=threads, backend=backend)
        gb = render_backward(cloud, cam, s, g, threads=threads, backend=backend)
        assert ga.flat().tobytes() == gb.flat().tobytes()


def test_partition_of_unity(cloud, cam):
    # with every feature and the background equal to one, the blend is the weight sum
    ones = cloud.replace(features=np.ones((len(cloud), 1)))
    for s in SETTINGS:
        out = render(ones, cam, s.replace(background=(1.0,)))
        assert np.max(np.abs(out.features[..., 0] - 1.0)) < 1e-9
        assert np.all((out.alpha >= 0) & (out.alpha <= 1))


def test_linearity(cloud, cam, rng):
    f1 = rng.normal(size=(len(cloud), 3))
    f2 = rng.normal(size=(len(cloud), 3))
    a, b = 0.7, -1.3
    r = lambda f: render(cloud.replace(features=f), cam).features  # noqa: E731
    np.testing.assert_allclose(r(a * f1 + b * f2), a * r(f1) + b * r(f2), atol=1e-9)


def test_rigid_equivariance(cloud, cam):
    t = RigidTransform(rotation_about((0.2, 1.0, -0.4), 0.8), (0.3, -0.2, 1.5))
    moved_cam = cam.with_pose(cam.pose.compose(t.inverse()))
    a = render(cloud, cam)
    b = render(cloud.transformed(t), moved_cam)
    assert np.max(np.abs(a.features - b.features)) < 1e-6
    assert np.max(np.abs(a.alpha - b.alpha)) < 1e-6
    assert np.max(np.abs(a.depth - b.depth)) < 1e-6


def test_coverage_grows_with_radius(rng, cam):
    base = random_cloud(rng, n=150, radius=(0.002, 0.004))
    prev = -1.0
    for scale in (1.0, 2.0, 4.0, 8.0):
        c = base.replace(radius_params=radius_param_for(base.radii * scale))
        cov = float((render(c, cam, RenderSettings(max_per_pixel=1000)).alpha >= 0.5).mean())
        assert cov >= prev
        prev = cov
    assert prev > 0


def test_single_sphere_disc():
    cam = Camera(100.0, 100.0, 16.0, 16.0, 32, 32)
    # radius 0.1 at depth 2 -> 5 px disc centered on the image center
    cloud = SphereCloud([[0.0, 0.0, 2.0]], [[1.0, 0.5, 0.25]], radius_param_for([0.1], r_max=0.2),
                        r_max=0.2)
    out = zbuffer_render(cloud, cam)
    yy, xx = np.mgrid[:32, :32] + 0.5
    disc = (xx - 16) ** 2 + (yy - 16) ** 2 <= 25
    np.testing.assert_array_equal(out.winner >= 0, disc)
    np.testing.assert_allclose(out.features[disc], [[1.0, 0.5, 0.25]] * disc.sum())
    soft = render(cloud, cam, RenderSettings(gamma=1e-4, sharpness=50.0))
    sure = soft.margin > 1e-3
    np.testing.assert_array_equal(soft.winner[sure], out.winner[sure])
    assert soft.alpha[16, 16] > 0.99
    assert soft.alpha[0, 0] == 0.0


def test_zbuffer_keeps_nearest():
    cam = Camera(100.0, 100.0, 8.0, 8.0, 16, 16)
    pos = [[0.0, 0.0, 3.0], [0.0, 0.0, 2.0], [0.0, 0.0, 4.0]]
    cloud = SphereCloud(pos, np.eye(3), radius_param_for([0.02, 0.02, 0.02]))
    out = zbuffer_render(cloud, cam)
    assert out.winner[8, 8] == 1
    assert out.depth[8, 8] == pytest.approx(2.0)
    soft = render(cloud, cam, RenderSettings(gamma=1e-4))
    assert soft.winner[8, 8] == 1


def test_spheres_outside_clip_range_are_dropped(cam):
    cloud = SphereCloud([[0.0, 0.0, 0.05], [0.0, 0.0, 20.0]], np.ones((2, 3)), np.zeros(2))
    out = render(cloud, cam)
    assert not out.alpha.any()
    assert np.all(out.winner == -1)
    g = render_backward(cloud, cam, RenderSettings(), np.ones((64, 64, 3)))
    assert not g.flat().any()


def test_background_color(cam):
    cloud = SphereCloud([[5.0, 5.0, 2.0]], np.ones((1, 3)), np.zeros(1))
    out = render(cloud, cam, RenderSettings(background=(0.1, 0.2, 0.3)))
    np.testing.assert_allclose(out.features[0, 0], [0.1, 0.2, 0.3])


def test_per_pixel_cap(rng):
    cam = Camera(100.0, 100.0, 4.0, 4.0, 8, 8)
    n = 10
    pos = np.column_stack([np.zeros(n), np.zeros(n), np.linspace(1.0, 1.5, n)])
    cloud = SphereCloud(pos, rng.uniform(size=(n, 3)), np.full(n, 3.0))
    out = render(cloud, cam, RenderSettings(max_per_pixel=3))
    assert out.count.max() == 3


def test_errors(cam, cloud):
    empty = SphereCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(EmptyCloud):
        render(empty, cam)
    with pytest.raises(ShapeError):
        render_backward(cloud, cam, RenderSettings(), np.ones((3, 3, 3)))
    with pytest.raises(ValueError):
        RenderSettings(gamma=0.0)
    with pytest.raises(ValueError):
        RenderSettings(tile_size=12)
    with pytest.raises(ValueError):
        render(cloud, cam, backend="gpu")


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_finite_differences_soft(backend, rng):
    cam = Camera(40.0, 40.0, 12.0, 12.0, 24, 24)
    cloud = random_cloud(rng, n=60, radius=(0.01, 0.04))
    settings = RenderSettings(gamma=0.5, sharpness=1.0, tail=2.0, eps=0.1)
    probes = check_gradients(cloud, cam, settings, 60, rng, backend=backend)
    compared = [p for p in probes if not p.skipped and abs(p.analytic) > 1e-8]
    assert len(compared) > 30
    assert max(p.rel_error for p in compared) < 1e-4


def test_finite_differences_default_settings(rng):
    # sharp default blending: compare only well-conditioned probes
    cam = Camera(40.0, 40.0, 12.0, 12.0, 24, 24)
    cloud = random_cloud(rng, n=60, radius=(0.01, 0.04))
    probes = check_gradients(cloud, cam, RenderSettings(), 60, rng)
    compared = [p for p in probes if not p.skipped and abs(p.analytic) > 1e-4]
    assert compared
    assert max(p.rel_error for p in compared) < 1e-4


def test_feature_gradient_is_blend_weight(cam, cloud):
    # d(sum features)/d f_i is the total blend weight of sphere i
    g = render_backward(cloud, cam, RenderSettings(), np.ones((64, 64, 3)))
    assert np.all(g.d_features >= -1e-15)
    np.testing.assert_allclose(g.d_features[:, 0], g.d_features[:, 1])
    total = render(cloud, cam).alpha.sum()
    assert g.d_features[:, 0].sum() == pytest.approx(total, rel=1e-9)
