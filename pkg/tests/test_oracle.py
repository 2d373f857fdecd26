import numpy as np
import pytest
from hypothesis import given, settings, strategies as hs
from hypothesis.extra import numpy as hnp

from deltapillars import oracle
from deltapillars.backbone import BackboneSpec, BackboneWeights, BlockSpec
from deltapillars.grid import GridConfig
from deltapillars.pfn import EncoderWeights
from deltapillars.sconv import ShapeMismatch
from deltapillars.stream import empty_stream, make_stream

from conftest import toy_config, toy_stream

TAU = 1e-4


def base():
    rng = np.random.default_rng(0)
    return rng.uniform(-1, 1, (3, 6, 6)).astype(np.float32)


def test_identical_canvases():
    a = base()
    r = oracle.compare(a, a.copy(), np.zeros((6, 6), bool), TAU)
    assert (r.max_abs_diff, r.max_rel_diff, r.passed, r.change_soundness_violations) == (0.0, 0.0, True, 0)
    assert r.worst_site is None


def test_perturbation_at_changed_site_fails():
    a = base()
    a[0, 0, 0] = 1.0
    b = a.copy()
    b[2, 4, 1] += 2 * TAU
    change = np.zeros((6, 6), bool)
    change[4, 1] = True
    r = oracle.compare(a, b, change, TAU)
    assert not r.passed
    assert r.worst_site == (2, 4, 1)
    assert r.change_soundness_violations == 0


def test_perturbation_at_unchanged_site_is_violation():
    a = base()
    b = a.copy()
    b[1, 2, 3] += 0.5
    r = oracle.compare(a, b, np.zeros((6, 6), bool), TAU)
    assert r.change_soundness_violations == 1


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        oracle.compare(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


finite = hnp.arrays(np.float64, (2, 4, 4), elements=hs.floats(-1e6, 1e6))


@settings(max_examples=100)
@given(finite, finite)
def test_compare_is_symmetric(a, b):
    ab, ba = oracle.compare(a, b), oracle.compare(b, a)
    assert ab.max_abs_diff == ba.max_abs_diff
    assert ab.max_rel_diff == ba.max_rel_diff
    assert ab.passed == ba.passed


@settings(max_examples=100)
@given(finite, finite, hnp.arrays(bool, (4, 4)))
def test_violations_count_differing_unflagged_sites(a, b, change):
    r = oracle.compare(a, b, change)
    assert r.change_soundness_violations == int(((a != b).any(axis=0) & ~change).sum())
    assert 0 <= r.max_rel_diff
    assert r.passed == (r.max_rel_diff <= 1e-4)


def test_empty_window_gives_zero_canvas():
    cfg = GridConfig.square(16)
    spec = BackboneSpec(in_channels=8, blocks=(BlockSpec(2, 1, 4), BlockSpec(2, 1, 4), BlockSpec(2, 1, 4)),
                        upsample_channels=2)
    res = oracle.full_recompute_pipeline(empty_stream(), EncoderWeights.random(0, channels=8),
                                         BackboneWeights.random(spec, seed=0), cfg)
    for r in res.values():
        np.testing.assert_array_equal(r.values, 0)
        assert not r.active.any()


def test_static_frame_is_stationary():
    cfg = GridConfig.square(16)
    rng = np.random.default_rng(1)
    n = 40
    xyz = rng.uniform(0, 2.56, (n, 3)) - [0, 1.28, 1.28]
    frames = [make_stream(k * cfg.stride + (np.arange(n) + 1) * 1e-5, *xyz.T, np.full(n, 9.0))
              for k in range(30)]
    data = np.concatenate(frames)
    spec = BackboneSpec(in_channels=8, blocks=(BlockSpec(2, 2, 4), BlockSpec(2, 1, 4), BlockSpec(2, 1, 4)),
                        upsample_channels=2)
    enc, w = EncoderWeights.random(0, channels=8), BackboneWeights.random(spec, seed=0)
    outs = []
    for k in range(12, 30):
        t_now = (k + 1) * cfg.stride
        outs.append(oracle.full_recompute_pipeline(oracle.window_points(data, t_now, cfg.window), enc, w, cfg))
    for res in outs[1:]:
        for name, r in res.items():
            assert r.values.tobytes() == outs[0][name].values.tobytes(), name


def test_pfn_ops_full_counts_in_bounds_points():
    cfg = toy_config()
    data = toy_stream(0.05)
    n = len(oracle.rebin(data, cfg)[0])
    assert 0 < n <= len(data)
    assert oracle.pfn_ops_full(data, cfg) == 6 * n + n + 3 * n
