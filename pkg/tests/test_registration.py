import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invisnet import registration as reg
from invisnet import synthgen as sg
from invisnet.registration import DegenerateConfigurationError, Homography

from oracles import shift_image


def random_homography(rng, strength=0.05):
    m = np.eye(3)
    m[:2, :2] += rng.normal(0, strength, (2, 2))
    m[:2, 2] = rng.uniform(-6, 6, 2)
    m[2, :2] = rng.normal(0, 3e-4, 2)
    return Homography(m)


def test_identity_from_identical_points():
    pts = reg.checkerboard_points()
    h = reg.estimate_homography(np.hstack([pts, pts]))
    assert np.abs(h.matrix - np.eye(3)).max() < 1e-10


def test_noise_free_recovery():
    rng = np.random.default_rng(0)
    for _ in range(20):
        true = random_homography(rng)
        h = reg.estimate_homography(reg.synth_correspondences(true, reg.checkerboard_points()))
        assert np.abs(h.matrix - true.matrix).max() < 1e-8


def test_noisy_reprojection():
    rng = np.random.default_rng(1)
    errs = []
    for _ in range(50):
        true = random_homography(rng)
        pts_a = reg.checkerboard_points()
        h = reg.estimate_homography(reg.synth_correspondences(true, pts_a, 0.2, rng))
        clean = reg.synth_correspondences(true, pts_a)
        errs.append(reg.reprojection_error(h, clean).mean())
    assert np.mean(errs) < 0.5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10.0))
def test_scale_invariance_of_estimate(seed, scale):
    rng = np.random.default_rng(seed)
    true = random_homography(rng)
    pts = reg.synth_correspondences(true, reg.checkerboard_points(4, 5))
    h1 = reg.estimate_homography(pts)
    h2 = reg.estimate_homography(pts * scale)
    s = np.diag([scale, scale, 1.0])
    expected = s @ h1.matrix @ np.linalg.inv(s)
    expected /= expected[2, 2]
    np.testing.assert_allclose(h2.matrix, expected, atol=1e-7)


def test_fewer_than_four_points():
    pts = reg.checkerboard_points()[:3]
    with pytest.raises(DegenerateConfigurationError, match="4"):
        reg.estimate_homography(np.hstack([pts, pts]))


def test_collinear_points_rejected():
    line = np.stack([np.arange(6.0), 2 * np.arange(6.0)], axis=1)
    with pytest.raises(DegenerateConfigurationError, match="collinear"):
        reg.estimate_homography(np.hstack([line, line + 1]))
    quad = np.array([[0, 0], [1, 1], [2, 2], [0, 5.0]])
    with pytest.raises(DegenerateConfigurationError):
        reg.estimate_homography(np.hstack([quad, quad]))


def test_bad_shape_and_singular_matrix():
    with pytest.raises(ValueError):
        reg.estimate_homography(np.zeros((5, 3)))
    with pytest.raises(DegenerateConfigurationError):
        Homography(np.zeros((3, 3)) + np.eye(3) * [1, 1, 0])
    with pytest.raises(DegenerateConfigurationError):
        Homography(np.ones((3, 3)))


def test_warp_identity_returns_input():
    img = np.random.default_rng(2).uniform(size=(3, 20, 24))
    np.testing.assert_array_equal(reg.warp(img, Homography.identity()), img)


def test_warp_integer_translation():
    img = np.random.default_rng(3).uniform(size=(1, 16, 20))
    out = reg.warp(img, Homography.translation(3, 0), fill=-1.0)
    np.testing.assert_allclose(out[:, :, 3:], img[:, :, :-3], atol=1e-12)
    assert np.all(out[:, :, :3] == -1.0)
    np.testing.assert_allclose(out[:, :, 3:], shift_image(img, 3, 0)[:, :, 3:], atol=1e-12)


def test_warp_round_trip_interior():
    rng = np.random.default_rng(4)
    y, x = np.mgrid[0:48, 0:48] / 48.0
    img = (np.sin(6 * x) * np.cos(5 * y))[None] * 0.5 + 0.5
    h = random_homography(rng, 0.02)
    back = reg.warp(reg.warp(img, h), h.inverse())
    inner = back[:, 10:-10, 10:-10] - img[:, 10:-10, 10:-10]
    assert np.abs(inner).mean() < 5e-3


def test_compose_and_inverse():
    rng = np.random.default_rng(5)
    a, b = random_homography(rng), random_homography(rng)
    pts = reg.checkerboard_points(3, 3)
    np.testing.assert_allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-9)
    np.testing.assert_allclose(a.inverse().apply(a.apply(pts)), pts, atol=1e-9)


def test_register_pair_recovers_aligned_view():
    scene = sg.generate_scene(7)
    light = sg.LightingCondition.clear(1.0)
    rng = np.random.default_rng(7)
    h = random_homography(rng, 0.02)
    clean = sg.RenderConfig(sigma_a=0.0, sigma_b=0.0)
    aligned = sg.render_pair(scene, light, cfg=clean)
    mis = sg.render_pair(scene, light, sg.MisalignSpec(homography=h.matrix), cfg=clean)
    corr = reg.synth_correspondences(h, reg.checkerboard_points())
    est = reg.estimate_homography(corr)
    out = reg.register_pair(mis, est)
    assert out.misalign.homography is None
    inner = np.abs(out.imgB - aligned.imgB)[:, 12:-12, 12:-12]
    raw = np.abs(mis.imgB - aligned.imgB)[:, 12:-12, 12:-12]
    assert inner.mean() < 0.25 * raw.mean()


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    h = random_homography(rng)
    reg.write_homography(tmp_path / "h.txt", h)
    np.testing.assert_array_equal(reg.read_homography(tmp_path / "h.txt").matrix, h.matrix)
    pts = reg.synth_correspondences(h, reg.checkerboard_points(3, 4))
    reg.write_correspondences(tmp_path / "p.txt", pts, "test")
    np.testing.assert_allclose(reg.read_correspondences(tmp_path / "p.txt"), pts, atol=1e-9)
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        reg.read_correspondences(tmp_path / "bad.txt")
