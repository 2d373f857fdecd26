import numpy as np
import pytest
from hypothesis import given, settings, strategies as hs

from deltapillars import oracle
from deltapillars.canvas import FeatureCanvas
from deltapillars.grid import D, ChangeMap, GridConfig, PillarBuffer, PillarGrid
from deltapillars.pfn import EncoderWeights, encode_pillar, point_features, scatter_changed
from deltapillars.stream import make_stream, packetize

from conftest import toy_config


def buffer_with(points):
    b = PillarBuffer(0, 0, 100)
    b.push(np.arange(len(points), dtype=np.float64), np.asarray(points, dtype=np.float64))
    return b


def test_identity_weights_return_point():
    p = np.arange(1, D + 1, dtype=np.float64)
    np.testing.assert_array_equal(encode_pillar(buffer_with([p]), EncoderWeights.identity()), p)


@settings(max_examples=50)
@given(hs.integers(0, 2**31 - 1), hs.integers(1, 30))
def test_max_is_per_channel_over_points(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, D))
    w = EncoderWeights.random(seed, channels=16)
    got = encode_pillar(buffer_with(pts), w)
    per_point = [(w.linear @ p + w.bias) * w.bn_scale + w.bn_shift for p in pts]
    np.testing.assert_allclose(got, np.max(per_point, axis=0), rtol=1e-12, atol=1e-12)


def test_two_points_max_picks_dominant():
    w = EncoderWeights(np.eye(2, D), np.zeros(2), np.ones(2), np.zeros(2))
    a = np.zeros(D)
    b = np.zeros(D)
    a[0], a[1] = 5.0, -1.0
    b[0], b[1] = 1.0, 2.0
    np.testing.assert_array_equal(encode_pillar(buffer_with([a, b]), w), [5.0, 2.0])


def test_zero_weights_give_zero():
    w = EncoderWeights(np.zeros((8, D)), np.zeros(8), np.zeros(8), np.zeros(8))
    out = encode_pillar(buffer_with(np.random.default_rng(0).standard_normal((5, D))), w)
    np.testing.assert_array_equal(out, 0.0)


def test_empty_pillar_rejected():
    with pytest.raises(ValueError):
        encode_pillar(PillarBuffer(0, 0, 4), EncoderWeights.identity())


@settings(max_examples=30)
@given(hs.integers(0, 2**31 - 1), hs.integers(1, 60))
def test_point_features_independent_of_batching(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, D))
    w = EncoderWeights.random(seed)
    whole = point_features(pts, w)
    split = np.concatenate([point_features(pts[i:i + 1], w) for i in range(n)])
    np.testing.assert_array_equal(whole, split)


def test_weights_round_trip(tmp_path):
    w = EncoderWeights.random(5, channels=12)
    w.save(tmp_path / "e.sscw")
    back = EncoderWeights.load(tmp_path / "e.sscw")
    for a, b in zip((w.linear, w.bias, w.bn_scale, w.bn_shift),
                    (back.linear, back.bias, back.bn_scale, back.bn_shift)):
        np.testing.assert_array_equal(a, b)


def test_bad_weights_file(tmp_path):
    (tmp_path / "e.sscw").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        EncoderWeights.load(tmp_path / "e.sscw")


def _pts(t, x, y):
    t = np.asarray(t, dtype=np.float64)
    return make_stream(t, x, y, np.zeros(len(t)), np.ones(len(t)))


def test_no_changes_leave_canvas_untouched():
    cfg = GridConfig.square(8)
    g = PillarGrid(cfg)
    w = EncoderWeights.random(1, channels=4)
    canvas = FeatureCanvas.zeros(4, cfg.shape)
    cm = ChangeMap(cfg.shape)
    g.step(_pts([0.001, 0.002], [0.1, 0.5], [0.0, 0.2]), 0.01, cm)
    scatter_changed(g, cm, w, canvas)
    before = canvas.copy()
    scatter_changed(g, ChangeMap(cfg.shape), w, canvas)
    assert canvas.values.tobytes() == before.values.tobytes()
    np.testing.assert_array_equal(canvas.active, before.active)
    assert not canvas.change.any()


def test_emptied_pillar_is_cleared():
    cfg = GridConfig.square(8)
    g = PillarGrid(cfg)
    w = EncoderWeights.random(1, channels=4)
    canvas = FeatureCanvas.zeros(4, cfg.shape)
    cm = ChangeMap(cfg.shape)
    g.step(_pts([0.001], [0.1], [0.0]), 0.01, cm)
    scatter_changed(g, cm, w, canvas)
    site = np.argwhere(canvas.active)[0]
    assert np.any(canvas.values[:, site[0], site[1]] != 0)
    cm = ChangeMap(cfg.shape)
    g.step(_pts([], [], []), 0.2, cm)
    scatter_changed(g, cm, w, canvas)
    assert not canvas.active.any()
    np.testing.assert_array_equal(canvas.values, 0.0)
    assert canvas.change[site[0], site[1]]


def test_incremental_pseudo_image_is_bit_exact(drone_stream):
    cfg = toy_config()
    g = PillarGrid(cfg)
    w = EncoderWeights.random(2)
    canvas = FeatureCanvas.zeros(w.channels, cfg.shape)
    for packet in packetize(drone_stream, cfg.stride):
        cm = ChangeMap(cfg.shape)
        g.step(packet.points, packet.t_end, cm)
        scatter_changed(g, cm, w, canvas)
        values, active = oracle.pseudo_image(oracle.window_points(drone_stream, packet.t_end, cfg.window),
                                             cfg, w)
        assert canvas.values.tobytes() == values.tobytes()
        np.testing.assert_array_equal(canvas.active, active)
