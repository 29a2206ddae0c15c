from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invisnet import alignnet as an
from invisnet import synthgen as sg
from invisnet.training import History

from oracles import central_gradient_loop, shift_image

SMALL = sg.SceneConfig(height=48, width=48, size_range=(8.0, 14.0))


def frozen_scene(seed, cfg):
    scene = sg.generate_scene(seed, cfg)
    return replace(scene, objects=[replace(o, velocity=(0.0, 0.0)) for o in scene.objects])


def textured(seed, h=40, w=40):
    rng = np.random.default_rng(seed)
    base = rng.uniform(size=(1, h // 4, w // 4))
    return np.kron(base, np.ones((1, 4, 4))) + 0.05 * rng.normal(size=(1, h, w))


# edge maps ----------------------------------------------------------------------------


def test_edge_map_constant_is_zero():
    np.testing.assert_array_equal(an.edge_map(np.full((3, 10, 12), 0.4)), 0.0)


def test_edge_map_vertical_step():
    img = np.zeros((1, 8, 10))
    img[:, :, 5:] = 1.0
    e = an.edge_map(img)[0]
    # central difference at columns 4 and 5 is 0.5; interior rows only
    assert np.all(e[1:-1, 4:6] == 1.0)
    e2 = e.copy()
    e2[:, 4:6] = 0
    assert np.all(e2 == 0)


@pytest.mark.parametrize("seed", range(3))
def test_edge_gradient_matches_loop(seed):
    img = np.random.default_rng(seed).uniform(size=(3, 11, 9))
    np.testing.assert_allclose(an.edge_gradient(img), central_gradient_loop(img), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), c=st.sampled_from([-0.5, -0.125, 0.25, 1.0, 3.0]))
def test_edge_map_brightness_invariant(seed, c):
    # multiples of 3/64 keep the channel mean and every difference exact in floating point
    img = np.round(np.random.default_rng(seed).uniform(size=(3, 9, 9)) * 64) * 3 / 64
    np.testing.assert_array_equal(an.edge_map(img + c), an.edge_map(img))
    e = an.edge_map(img)
    assert e.max() == 1.0 and e.min() >= 0.0


# block matching -------------------------------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000))
def test_dense_flow_self_is_zero(seed):
    img = textured(seed, 24, 24)
    ff = an.dense_flow(img, img, radius=3, block=5)
    np.testing.assert_array_equal(ff.flow, 0.0)
    assert ff.confidence.min() >= 0 and ff.confidence.max() <= 1


@pytest.mark.parametrize("dx,dy", [(3, 0), (0, -2), (2, 1)])
def test_dense_flow_recovers_shift(dx, dy):
    ref = textured(10 + dx)
    tgt = shift_image(ref, dx, dy)
    ff = an.dense_flow(ref, tgt, radius=4, block=7)
    inner = (slice(8, -8), slice(8, -8))
    ok = (ff.flow[0][inner] == dx) & (ff.flow[1][inner] == dy)
    assert ok.mean() >= 0.95


def test_dense_flow_out_of_range_saturates():
    r = 3
    ref = textured(11)
    ff = an.dense_flow(ref, shift_image(ref, r + 2, 0), radius=r, block=7)
    inner = (slice(8, -8), slice(8, -8))
    assert np.abs(ff.flow).max() <= r
    assert ff.confidence[0][inner].mean() < 0.3
    good = an.dense_flow(ref, shift_image(ref, 2, 0), radius=r, block=7)
    assert ff.confidence[0][inner].mean() < good.confidence[0][inner].mean()


def test_dense_flow_errors():
    x = np.zeros((1, 6, 6))
    with pytest.raises(ValueError, match="block"):
        an.dense_flow(x, x, radius=2, block=7)
    with pytest.raises(ValueError, match="odd"):
        an.dense_flow(x, x, radius=2, block=4)
    with pytest.raises(ValueError, match="radius"):
        an.dense_flow(x, x, radius=0, block=3)


def test_warp_by_flow_integer_shift():
    img = textured(12, 16, 16)
    flow = np.zeros((2, 16, 16))
    flow[0] = -2.0
    np.testing.assert_allclose(an.warp_by_flow(img, flow), shift_image(img, 2, 0), atol=1e-12)


# streams -------------------------------------------------------------------------------


def test_stream_counts_for_100_frames():
    scene = sg.generate_scene(3, SMALL)
    video = sg.render_video(scene, sg.LightingCondition.clear(1.0), 100)
    samples, skipped = an.make_training_streams(video, radius=2, block=5)
    assert skipped == 0
    assert sum(s.stream == "cross_modal" for s in samples) == 99
    assert sum(s.stream == "temporal" for s in samples) == 99


def test_missing_frames_are_skipped_and_counted():
    scene = sg.generate_scene(4, SMALL)
    video = sg.render_video(scene, sg.LightingCondition.clear(1.0), 6)
    video[2] = None
    samples, skipped = an.make_training_streams(video, radius=2, block=5)
    assert skipped == 2
    assert len(samples) == 2 * 3


def test_aligned_pair_stream1_target_is_source():
    s = sg.render_pair(sg.generate_scene(5, SMALL), sg.LightingCondition.clear(1.0))
    zero = an.FlowField(np.zeros((2, 48, 48)), np.ones((1, 48, 48)), 8)
    t = an.cross_modal_sample(s, flow=zero)
    np.testing.assert_array_equal(t.target, t.source)


def test_static_scene_temporal_target_equals_source_within_noise():
    scene = frozen_scene(6, SMALL)
    video = sg.render_video(scene, sg.LightingCondition.clear(1.0), 2)
    t = an.temporal_sample(video[0], video[1], radius=2, block=5)
    assert np.abs(t.target - t.source).mean() < 3 * sg.RenderConfig().sigma_a


def test_bad_stream_name():
    z = np.zeros((3, 8, 8))
    with pytest.raises(ValueError):
        an.AlignTrainSample(z, z[:1], z, "other", np.zeros((2, 8, 8)))


# training ----------------------------------------------------------------------------------


def static_samples(n=4, size=32):
    cfg = sg.SceneConfig(height=size, width=size, size_range=(6.0, 10.0))
    out = []
    for seed in range(n):
        scene = frozen_scene(seed, cfg)
        v = sg.render_video(scene, sg.LightingCondition.clear(1.0), 2)
        out += an.make_training_streams(v, radius=2, block=5)[0]
    return out


def test_static_video_reconstruction_loss_drops():
    samples = static_samples()
    hist = History(["epoch", "l1", "cue_l1", "adv_g", "d", "d_m"])
    an.train_align(samples, an.AlignConfig(epochs=30, lambda_adv=0.0, radius=2, block=5), hist)
    l1 = hist.column("l1")
    assert l1[-1] < 0.1 * l1[0]


@pytest.fixture(scope="module")
def copy_models():
    samples = []
    for s in static_samples(6):
        samples.append(an.AlignTrainSample(s.source, an.edge_map(s.source), s.source, s.stream,
                                           np.zeros((2,) + s.source.shape[1:])))
    cfg = an.AlignConfig(epochs=40, lambda_adv=0.0, width=4, radius=2, block=5, lr=3e-3)
    return an.train_align(samples, cfg), samples


def test_copy_task(copy_models):
    models, samples = copy_models
    for s in samples:
        out = an.align(s.source, s.edge_target, models)
        assert np.abs(out - s.source).mean() < 0.02


def test_align_zero_edge_is_finite_and_deterministic(copy_models):
    models, samples = copy_models
    src = samples[0].source
    a = an.align(src, np.zeros((1,) + src.shape[1:]), models)
    b = an.align(src, np.zeros((1,) + src.shape[1:]), models)
    assert np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)


def test_align_errors(copy_models):
    models, samples = copy_models
    src = samples[0].source
    with pytest.raises(ValueError, match="channels"):
        an.align(src[:1], samples[0].edge_target, models)
    with pytest.raises(ValueError, match="edge"):
        an.align(src, np.zeros((2,) + src.shape[1:]), models)


def test_train_align_needs_both_streams():
    s = static_samples(1)
    with pytest.raises(ValueError, match="temporal"):
        an.train_align([x for x in s if x.stream == "cross_modal"], an.AlignConfig(epochs=1, width=4))


def test_models_save_load(tmp_path, copy_models):
    models, samples = copy_models
    models.save(tmp_path)
    back = an.AlignModels.load(tmp_path)
    src, edge = samples[0].source, samples[0].edge_target
    np.testing.assert_array_equal(an.align(src, edge, back), an.align(src, edge, models))
    assert back.config.radius == 2


def test_generator_input_channels():
    m = an.AlignModels.init(an.AlignConfig(width=4))
    assert m.G.net.cin == 3 + 1 + 2
